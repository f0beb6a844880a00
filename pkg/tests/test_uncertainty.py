import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import noisy_lines, rel_fro
from uncpnp.errors import DegenerateBaseline, LevelOutOfRange
from uncpnp.geometry import Pose, so3_exp
from uncpnp.uncertainty import (PyramidDetectorSpec, isotropic_approximation, pyramid_covariance,
                                triangulate_line_with_covariance, triangulate_point_with_covariance)


def test_pyramid_examples():
    S, s2 = pyramid_covariance(PyramidDetectorSpec(kappa=1.2, n_levels=8, epsilon=1.0), 1)
    np.testing.assert_array_equal(S, np.eye(2))
    assert s2 == 1.0
    _, s2 = pyramid_covariance(PyramidDetectorSpec(1.2, 8, 1.0), 2)
    assert s2 == pytest.approx(1.44)
    _, s2 = pyramid_covariance(PyramidDetectorSpec(2.0, 8, 0.5), 3)
    assert np.sqrt(s2) == pytest.approx(2.0)


def test_pyramid_validation_and_monotone():
    spec = PyramidDetectorSpec()
    with pytest.raises(LevelOutOfRange):
        pyramid_covariance(spec, 0)
    with pytest.raises(LevelOutOfRange):
        pyramid_covariance(spec, 9)
    with pytest.raises(ValueError):
        PyramidDetectorSpec(kappa=1.0)
    with pytest.raises(ValueError):
        PyramidDetectorSpec(epsilon=0.0)
    s = [pyramid_covariance(spec, o)[1] for o in range(1, 9)]
    assert all(b > a for a, b in zip(s, s[1:]))


def test_isotropic_examples():
    assert isotropic_approximation(np.eye(3)) == 1.0
    assert isotropic_approximation(np.diag([3.0, 0, 0])) == 1.0


def _grid_beaten(S):
    s = isotropic_approximation(S)
    best = np.linalg.norm(S - s * np.eye(3))
    grid = np.linspace(0.5, 2.0, 21) * s
    return all(best <= np.linalg.norm(S - g * np.eye(3)) + 1e-15 for g in grid)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_isotropic_beats_grid(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3)) * rng.uniform(0.01, 10)
    assert _grid_beaten(A @ A.T)


# -- point triangulation --------------------------------------------------------

def _stereo(b=0.5):
    return [Pose(np.eye(3), np.zeros(3)), Pose(np.eye(3), np.array([-b, 0, 0]))]


def _views(rng, n=2):
    poses = [Pose(np.eye(3), np.zeros(3))]
    for _ in range(n - 1):
        # small relative rotation, camera offset sideways
        poses.append(Pose(so3_exp(rng.normal(0, 0.1, 3)), rng.normal(0, 0.5, 3) + [-1.0, 0, 0]))
    return poses


def _proj(P, X):
    x = P.transform(X)
    return x[:2] / x[2]


def test_point_exact_two_views(rng):
    for _ in range(20):
        poses = _views(rng, 2)
        X = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(4, 8)])
        r = triangulate_point_with_covariance(poses, [_proj(P, X) for P in poses], [1e-6 * np.eye(2)] * 2)
        assert np.abs(r.X - X).max() < 1e-9
        assert np.allclose(r.cov, r.cov.T) and np.linalg.eigvalsh(r.cov)[0] > 0
        assert np.isfinite(r.condition)


def _depth_var(d):
    poses = _stereo()
    X = np.array([0.0, 0.0, d])
    return triangulate_point_with_covariance(poses, [_proj(P, X) for P in poses], [1e-6 * np.eye(2)] * 2).cov[2, 2]


def test_depth_variance_grows_with_fourth_power():
    # sigma_z ~ d^2 / b, so the variance scales as d^4
    assert 16 / 1.5 <= _depth_var(8.0) / _depth_var(4.0) <= 16 * 1.5
    assert 256 / 1.5 <= _depth_var(16.0) / _depth_var(4.0) <= 256 * 1.5


def test_point_covariance_scales_linearly_with_detection_covariance():
    poses = _stereo()
    X = np.array([0.3, -0.2, 5.0])
    u = [_proj(P, X) for P in poses]
    a = triangulate_point_with_covariance(poses, u, [1e-6 * np.eye(2)] * 2).cov
    b = triangulate_point_with_covariance(poses, u, [3e-6 * np.eye(2)] * 2).cov
    np.testing.assert_allclose(b, 3 * a, rtol=1e-9)


def test_point_degenerate_baseline():
    poses = [Pose(np.eye(3), np.zeros(3)), Pose(np.eye(3), np.array([0, 0, -1e-6]))]
    X = np.array([0.0, 0, 5])
    with pytest.raises(DegenerateBaseline):
        triangulate_point_with_covariance(poses, [_proj(P, X) for P in poses], [np.eye(2)] * 2)
    with pytest.raises(DegenerateBaseline):
        triangulate_point_with_covariance(poses[:1], [_proj(poses[0], X)], [np.eye(2)])


def test_point_covariance_matches_sampling():
    rng = np.random.default_rng(7)
    poses = _views(rng, 3)
    X = np.array([0.2, -0.3, 5.0])
    covs = []
    for _ in poses:
        A = rng.standard_normal((2, 2))
        covs.append(1e-5 * (A @ A.T + 0.2 * np.eye(2)))
    clean = [_proj(P, X) for P in poses]
    ref = triangulate_point_with_covariance(poses, clean, covs).cov
    chol = [np.linalg.cholesky(C) for C in covs]
    draws = np.array([
        triangulate_point_with_covariance(poses, [u + L @ rng.standard_normal(2) for u, L in zip(clean, chol)],
                                          covs).X
        for _ in range(10_000)])
    assert rel_fro(ref, np.cov(draws.T)) < 0.10


# -- segment triangulation -------------------------------------------------------

def _segment_setup(direction, b=0.5, d=6.0, half=1.0, s2=1e-6):
    poses = _stereo(b)
    c = np.array([0.0, 0.0, d])
    v = np.asarray(direction, float)
    v /= np.linalg.norm(v)
    p, q = c - half * v, c + half * v
    ends = [_proj(poses[0], p), _proj(poses[0], q)]
    a, bb = _proj(poses[1], p), _proj(poses[1], q)
    l = np.cross(np.r_[a, 1], np.r_[bb, 1])
    l /= np.linalg.norm(l[:2])
    return poses, p, q, ends, [s2 * np.eye(2)] * 2, [l], [s2]


def test_segment_exact():
    for direction in ([0, 1, 0], [1, 1, 0.3], [0.2, -1, 0.5]):
        poses, p, q, ends, ecov, ls, lv = _segment_setup(direction)
        r = triangulate_line_with_covariance(poses, ends, ecov, ls, lv)
        assert np.abs(r.p - p).max() < 1e-8 and np.abs(r.q - q).max() < 1e-8
        assert r.cross_cov.shape == (3, 3)
        for S in (r.Sigma_p, r.Sigma_q):
            assert np.allclose(S, S.T) and np.linalg.eigvalsh(S)[0] > 0


def test_segment_near_parallel_to_baseline_is_worse():
    a = np.radians(10.0)
    near = triangulate_line_with_covariance(*_segment_setup([np.cos(a), np.sin(a), 0])[:1],
                                            *_segment_setup([np.cos(a), np.sin(a), 0])[3:])
    perp = triangulate_line_with_covariance(*_segment_setup([0, 1, 0])[:1], *_segment_setup([0, 1, 0])[3:])
    ratio = np.trace(near.Sigma_p) / np.trace(perp.Sigma_p)
    assert ratio >= 5.0
    # frozen from the reference computation on this geometry
    assert ratio == pytest.approx(32.9476, rel=1e-3)


def test_segment_exactly_parallel_is_degenerate():
    poses, p, q, ends, ecov, ls, lv = _segment_setup([1, 0, 0])
    with pytest.raises(DegenerateBaseline):
        triangulate_line_with_covariance(poses, ends, ecov, ls, lv)


def test_segment_covariance_matches_sampling():
    rng = np.random.default_rng(11)
    poses, p, q, ends, ecov, ls, lv = _segment_setup([0.3, 1.0, 0.4], s2=2e-6)
    ref = triangulate_line_with_covariance(poses, ends, ecov, ls, lv)
    a2, b2 = _proj(poses[1], p), _proj(poses[1], q)
    L = noisy_lines(rng, ls[0], a2, b2, lv[0], 10_000)
    sd = np.sqrt(ecov[0][0, 0])
    ps, qs = [], []
    for k in range(10_000):
        e = [ends[0] + sd * rng.standard_normal(2), ends[1] + sd * rng.standard_normal(2)]
        r = triangulate_line_with_covariance(poses, e, ecov, [L[k]], lv)
        ps.append(r.p)
        qs.append(r.q)
    assert rel_fro(ref.Sigma_p, np.cov(np.array(ps).T)) < 0.10
    assert rel_fro(ref.Sigma_q, np.cov(np.array(qs).T)) < 0.10
