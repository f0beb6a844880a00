import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_trial, random_pose
from uncpnp.bench import NoiseSchedule, SceneSpec, generate_trial, rotation_error, with_outliers
from uncpnp.errors import DegenerateTriple, NoModelFound
from uncpnp.geometry import project
from uncpnp.robust import RansacConfig, gate, p3p, point_scores, ransac, run_pipeline, solve

MILD = NoiseSchedule(sigma2d_range=(1.0, 1.0), noise_3d=False)


def _exact_triple(rng):
    pose = random_pose(rng)
    X = rng.uniform(-2, 2, (3, 3))
    return pose, X, project(pose.transform(X))


def test_p3p_exact_triple_contains_truth(rng):
    pose, X, U = _exact_triple(rng)
    cands = p3p(X, U)
    assert min(rotation_error(pose.R, c.R) + np.abs(c.t - pose.t).max() for c in cands) < 1e-7


def test_p3p_rejects_degenerate_triples(rng):
    X = np.outer([0.0, 1.0, 2.0], [1.0, 2.0, 0.5]) + [0, 0, 5]
    with pytest.raises(DegenerateTriple):
        p3p(X, project(X))
    X = rng.uniform(-1, 1, (3, 3)) + [0, 0, 5]
    U = project(X)
    U[1] = U[0]
    with pytest.raises(DegenerateTriple):
        p3p(X, U)


def test_p3p_sweep():
    rng = np.random.default_rng(2)
    counts = []
    for _ in range(1000):
        pose, X, U = _exact_triple(rng)
        cands = p3p(X, U)
        counts.append(len(cands))
        scale = np.abs(pose.transform(X)).max()
        for c in cands:
            x = c.transform(X)
            assert np.abs(x[:, :2] - U * x[:, 2:3]).max() < 1e-8 * scale
        assert min(rotation_error(pose.R, c.R) for c in cands) < 1e-6
    assert set(counts) <= {1, 2, 3, 4}


def test_clean_points_all_inliers():
    tr = make_trial(30, 0, mode="none", seed=1)
    r = ransac(tr.corr)
    assert r.inliers.all()


def test_ransac_recall_with_outliers():
    """30 inliers + 30 gross outliers, 1 px anisotropic 2D noise, exact 3D, 50 seeded runs."""
    recalled, false = [], []
    for k in range(50):
        tr = generate_trial(SceneSpec(n_points=30, n_lines=0), MILD, [5, k])
        tr2, mask = with_outliers(tr, 30, [6, k])
        r = ransac(tr2.corr, RansacConfig(rng_seed=k))
        recalled.append(int((r.inliers & mask).sum()))
        false.append(int((r.inliers & ~mask).sum()))
    print(f"mean recall {np.mean(recalled):.2f}/30, max false inliers {max(false)}")
    assert max(false) <= 1
    assert np.mean(recalled) >= 28


def test_ransac_deterministic():
    tr, _ = with_outliers(make_trial(30, 0, mode="2d", seed=3), 20, 4)
    a = ransac(tr.corr, RansacConfig(rng_seed=9))
    b = ransac(tr.corr, RansacConfig(rng_seed=9))
    assert np.array_equal(a.inliers, b.inliers)
    assert np.array_equal(a.pose.R, b.pose.R) and np.array_equal(a.pose.t, b.pose.t)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 50), st.floats(0.1, 1.0))
def test_gating_monotone_in_threshold(seed, tau2, shrink):
    tr, _ = with_outliers(make_trial(15, 5, mode="3d", seed=seed), 5, seed)
    pose = random_pose(np.random.default_rng(seed)) if seed % 2 else tr.pose
    p_big, l_big = gate(pose, tr.corr, tau2)
    p_small, l_small = gate(pose, tr.corr, tau2 * shrink)
    assert not np.any(p_small & ~p_big) and not np.any(l_small & ~l_big)


def test_ransac_errors_and_config():
    with pytest.raises(NoModelFound):
        ransac(make_trial(2, 0, seed=0).corr)
    with pytest.raises(ValueError):
        RansacConfig(tau2=0)
    with pytest.raises(ValueError):
        RansacConfig(confidence=1.0)


def test_behind_camera_scores_infinite():
    tr = make_trial(10, 0, mode="none", seed=2)
    flipped = tr.pose.__class__(tr.pose.R, tr.pose.t - [0, 0, 100])
    assert np.all(np.isinf(point_scores(flipped, tr.corr)))


def test_refinement_does_not_hurt_on_clean_scene():
    base, final = [], []
    for k in range(20):
        tr = make_trial(40, 0, mode="2d", seed=[40, k])
        res = run_pipeline(tr.corr, "epnpu", "uncertain", d_bar=6.0)
        base.append(rotation_error(tr.pose.R, res.solver_pose.R))
        final.append(rotation_error(tr.pose.R, res.pose.R))
    assert np.mean(final) <= np.mean(base)


def test_injected_solver_failure_falls_back_to_ransac():
    tr, _ = with_outliers(make_trial(30, 0, mode="2d", seed=5), 10, 6)

    def broken(*args, **kwargs):
        raise DegenerateTriple("injected")

    res = run_pipeline(tr.corr, "epnpu", "uncertain", solver_override=broken)
    assert res.flags["solver_failed_fallback_to_ransac"]
    assert res.solver_pose is None
    ref = run_pipeline(tr.corr, "p3p", "uncertain")
    assert np.array_equal(res.pose.R, ref.pose.R) and np.array_equal(res.inliers, ref.inliers)


def test_solver_with_too_few_inliers_falls_back():
    tr = make_trial(30, 0, mode="2d", seed=7)
    far = random_pose(np.random.default_rng(0), depth=50.0)
    res = run_pipeline(tr.corr, "epnpu", "none", solver_override=lambda *a, **k: far)
    assert res.flags["solver_failed_fallback_to_ransac"]
    assert np.array_equal(res.pose.R, res.ransac_pose.R)


def test_line_routing():
    tr = make_trial(20, 10, mode="lines", seed=8)
    point_only = run_pipeline(tr.corr, "epnpu", "uncertain", d_bar=6.0)
    assert len(point_only.line_inliers) == 10
    # the point-only solver never sees the lines
    no_lines = run_pipeline(tr.corr.without_lines(), "epnpu", "uncertain", d_bar=6.0)
    np.testing.assert_array_equal(point_only.solver_pose.R, no_lines.solver_pose.R)
    # but refinement does, unless switched off
    assert not np.array_equal(point_only.pose.R, no_lines.pose.R)
    off = run_pipeline(tr.corr, "epnpu", "uncertain", d_bar=6.0, refine_with_lines=False)
    np.testing.assert_array_equal(off.pose.R, no_lines.pose.R)
    # without a refinement stage the lines have no effect on a point-only run
    none = run_pipeline(tr.corr, "epnpu", "none", d_bar=6.0)
    np.testing.assert_array_equal(none.pose.R, run_pipeline(tr.corr.without_lines(), "epnpu", "none", d_bar=6.0).pose.R)
    line_aware = run_pipeline(tr.corr, "epnplu", "none", d_bar=6.0)
    assert not np.array_equal(line_aware.pose.R, none.pose.R)


def test_starred_solver_uses_hypothesis():
    tr = make_trial(20, 0, mode="3d", seed=9)
    with pytest.raises(ValueError):
        solve("epnpu*", tr.corr)
    a = solve("epnpu*", tr.corr, pose_hypothesis=tr.pose)
    b = solve("epnpu", tr.corr, d_bar=6.0)
    assert not np.array_equal(a.R, b.R)
    res = run_pipeline(tr.corr, "dlsu*", "none")
    assert res.pose.is_valid()


def test_pipeline_deterministic_and_shapes():
    tr, _ = with_outliers(make_trial(25, 5, mode="lines", seed=10), 10, 11)
    a = run_pipeline(tr.corr, "dlslu", "full")
    b = run_pipeline(tr.corr, "dlslu", "full")
    assert a.inliers.shape == (35,) and a.line_inliers.shape == (5,)
    assert np.array_equal(a.pose.R, b.pose.R) and np.array_equal(a.inliers, b.inliers)
    assert set(a.timings) == {"ransac_ms", "solver_ms", "refine_ms"}
