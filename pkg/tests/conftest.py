import numpy as np
import pytest

from uncpnp.bench import NoiseSchedule, SceneSpec, generate_trial
from uncpnp.geometry import Pose, random_rotation


def random_spd(rng, dim, scale=1.0, floor=0.05):
    A = rng.standard_normal((dim, dim))
    return scale * (A @ A.T / dim + floor * np.eye(dim))


def random_pose(rng, depth=6.0):
    return Pose(random_rotation(rng), rng.uniform(-1, 1, 3) + [0, 0, depth])


def rel_fro(A, B):
    return np.linalg.norm(A - B) / np.linalg.norm(B)


def make_trial(n=20, m=0, mode="3d", seed=0):
    return generate_trial(SceneSpec(n_points=n, n_lines=m), NoiseSchedule.for_mode(mode), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
