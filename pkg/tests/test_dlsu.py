import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_trial, random_pose
from oracles import dlsu_random_restart_min
from uncpnp.bench import rotation_error, translation_error
from uncpnp.dlsu import (assemble, eliminate_translation, seed_grid, solve_dls, solve_dlsu,
                         solve_polynomial_system, vec)
from uncpnp.geometry import Pose, cayley_to_rotation, rotation_to_cayley, so3_exp
from uncpnp.residuals import (Correspondences, line_algebraic_residual, point_algebraic_residual,
                              solver_covariances)


def _cost_for(corr, d_bar=6.0):
    Sp, Sl = solver_covariances(corr, d_bar=d_bar)
    return eliminate_translation(assemble(corr, Sp, Sl)), Sp, Sl


def _inner_min_oracle(corr, Sp, Sl, R):
    """min over t of 0.5 sum r^T Sigma^-1 r, by whitened least squares."""
    blocks = assemble(corr, Sp, Sl)
    rows_A, rows_b = [], []
    for b in blocks:
        W = np.linalg.cholesky(np.linalg.inv(b.Sigma)).T
        rows_A.append(W @ b.T)
        rows_b.append(-W @ b.A @ vec(R))
    A, y = np.vstack(rows_A), np.concatenate(rows_b)
    t = np.linalg.lstsq(A, y, rcond=None)[0]
    r = A @ t - y
    return 0.5 * r @ r, t


def test_blocks_reproduce_algebraic_residuals(rng):
    tr = make_trial(8, 5, seed=4)
    c = tr.corr
    Sp, Sl = solver_covariances(c, d_bar=6.0)
    blocks = assemble(c, Sp, Sl)
    assert len(blocks) == 13
    assert all(b.A.shape == (2, 9) and b.T.shape == (2, 3) and b.Sigma.shape == (2, 2) for b in blocks)
    pose = random_pose(rng)
    want = np.concatenate([point_algebraic_residual(pose, c), line_algebraic_residual(pose, c)])
    got = np.array([b.evaluate(pose.R, pose.t) for b in blocks])
    np.testing.assert_allclose(got, want, atol=1e-12 * np.abs(want).max())


def test_elimination_matches_inner_minimum(rng):
    for seed in range(5):
        c = make_trial(10, 3, seed=seed).corr
        cost, Sp, Sl = _cost_for(c)
        f0, t0 = _inner_min_oracle(c, Sp, Sl, np.eye(3))
        assert abs(cost.value(np.zeros(3)) - f0) <= 1e-10 * f0
        for _ in range(5):
            s = rng.standard_normal(3)
            f, t = _inner_min_oracle(c, Sp, Sl, cayley_to_rotation(s))
            assert abs(cost.value(s) - f) <= 1e-10 * f
            np.testing.assert_allclose(cost.translation(s), t, atol=1e-9 * np.abs(t).max())


def test_truth_has_zero_cost_on_exact_data():
    tr = make_trial(12, 4, mode="none", seed=5)
    cost, _, _ = _cost_for(tr.corr)
    assert cost.rotation_cost(tr.pose.R) < 1e-18 * cost.scale
    np.testing.assert_allclose(cost.t_map @ vec(tr.pose.R), tr.pose.t, atol=1e-9)


def test_rotation_cost_equals_cayley_value(rng):
    cost, _, _ = _cost_for(make_trial(10, 2, seed=6).corr)
    for _ in range(10):
        s = rng.standard_normal(3) * 2
        assert np.isclose(cost.rotation_cost(cayley_to_rotation(s)), cost.value(s), rtol=1e-12)


def test_stationary_points_meet_gradient_tolerance():
    for seed in range(5):
        cost, _, _ = _cost_for(make_trial(15, 0, seed=seed).corr)
        S = solve_polynomial_system(cost)
        assert np.all(np.linalg.norm(cost.poly_grad(S), axis=1) < 1e-8 * cost.scale)


def test_exact_data_lists_true_rotation_among_stationary_points():
    for seed in range(10):
        tr = make_trial(12, 3, mode="none", seed=[seed, 1])
        res = solve_dlsu(tr.corr, d_bar=6.0)
        errs = [rotation_error(tr.pose.R, R) for R in res.diagnostics["stationary_rotations"]]
        assert min(errs) < 1e-6
        assert rotation_error(tr.pose.R, res.pose.R) < 1e-6
        assert translation_error(tr.pose.t, res.pose.t) < 1e-6


def test_polynomial_coefficients_reproduce_quartic(rng):
    cost, _, _ = _cost_for(make_trial(10, 0, seed=8).corr)
    coef = cost.coefficients()
    grads = cost.gradient_coefficients()
    assert all(sum(e) <= 4 for e in coef) and all(sum(e) <= 3 for g in grads for e in g)
    for _ in range(5):
        s = rng.standard_normal(3)
        poly = sum(c * np.prod(s ** np.array(e)) for e, c in coef.items())
        assert np.isclose(poly, cost.poly_value(s), rtol=1e-10)
        g = [sum(c * np.prod(s ** np.array(e)) for e, c in ga.items()) for ga in grads]
        np.testing.assert_allclose(g, cost.poly_grad(s), rtol=1e-9, atol=1e-12 * cost.scale)


def _fd_grad(f, s, h):
    return np.array([(f(s + h * e) - f(s - h * e)) / (2 * h) for e in np.eye(3)])


def test_gradient_and_hessian_against_finite_differences(rng):
    for seed in range(5):
        cost, _, _ = _cost_for(make_trial(10, 3, seed=seed).corr)
        for _ in range(10):
            s = rng.standard_normal(3)
            for val, grad, hess in ((cost.value, cost.grad, cost.hess),
                                    (cost.poly_value, cost.poly_grad, cost.poly_hess)):
                g = grad(s)
                g_fd = _fd_grad(val, s, 1e-6)
                assert np.linalg.norm(g - g_fd) <= 1e-5 * max(np.linalg.norm(g), 1e-8 * cost.scale)
                H = hess(s)
                H_fd = np.array([_fd_grad(lambda x: grad(x)[a], s, 1e-6) for a in range(3)])
                assert np.linalg.norm(H - H_fd) <= 1e-5 * np.linalg.norm(H)
                np.testing.assert_allclose(H, H.T, atol=1e-12 * np.linalg.norm(H))


def test_global_minimum_against_random_restarts():
    rng = np.random.default_rng(77)
    worse = 0
    for k in range(50):
        n = int(rng.integers(6, 40))
        m = int(rng.integers(0, 6))
        tr = make_trial(n, m, mode="3d", seed=[99, k])
        res = solve_dlsu(tr.corr, d_bar=6.0)
        cost = res.diagnostics["reduced_cost"]
        oracle = dlsu_random_restart_min(cost, rng)
        worse += res.cost > oracle * (1 + 1e-6)
    assert worse == 0


def test_near_half_turn_solution():
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    for angle in (170.0, 175.0, 179.5):
        R = so3_exp(np.radians(angle) * axis)
        tr = make_trial(15, 0, mode="none", seed=3)
        G = Pose(tr.pose.R.T @ R, np.zeros(3))  # re-express world so the true rotation is R
        corr = tr.corr.transformed(G.inverse())
        res = solve_dlsu(corr, d_bar=6.0)
        assert rotation_error(R, res.pose.R) < 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_covariance_scale_invariance(seed, c):
    corr = make_trial(12, 2, seed=seed).corr
    a = solve_dlsu(corr, d_bar=6.0).pose
    b = solve_dlsu(corr.scaled_covariances(c), d_bar=6.0).pose
    assert np.abs(a.R - b.R).max() < 1e-9 and np.abs(a.t - b.t).max() < 1e-9 * max(1, np.abs(a.t).max())


def test_se3_equivariance(rng):
    for seed in range(5):
        tr = make_trial(15, 3, seed=seed)
        G = random_pose(rng, depth=0.0)
        a = solve_dlsu(tr.corr, d_bar=6.0).pose
        b = solve_dlsu(tr.corr.transformed(G), d_bar=6.0).pose
        W = tr.corr.world_features()
        np.testing.assert_allclose(b.transform(G.transform(W)), a.transform(W), atol=1e-7)


def test_unweighted_baseline_exact():
    tr = make_trial(10, 4, mode="none", seed=12)
    p = solve_dls(tr.corr).pose
    assert rotation_error(tr.pose.R, p.R) < 1e-6


def test_seed_grid_avoids_half_turns():
    S = seed_grid()
    assert len(S) > 20 and np.all(np.isfinite(S))
    for s in S:
        np.testing.assert_allclose(rotation_to_cayley(cayley_to_rotation(s)), s, atol=1e-9)
