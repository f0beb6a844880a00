"""Cayley-parameterized weighted algebraic least squares (DLS-style) PnP(L).

Every algebraic residual is linear in ``vec(R)`` (column-major) and ``t``:
``r_k = A_k vec(R) + T_k t``. Minimizing the covariance-weighted cost over
``t`` in closed form leaves ``0.5 vec(R)^T Q vec(R)``. With Cayley parameters
``R(s) = Rbar(s) / (1 + |s|^2)`` and ``Rbar`` quadratic in ``s``, the cost
times ``(1 + |s|^2)^2`` is a quartic polynomial ``P(s) = 0.5 m(s)^T K m(s)``
over the ten monomials of degree <= 2. Stationary points of ``P`` are found by
Newton's method from a fixed quasi-uniform grid of rotations; the best ones are
then polished on the true cost in a frame re-centred on the candidate, which
keeps the Cayley singularity away from the solution.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .errors import AllCandidatesBehindCamera, NoStationaryPoint, Singular180, TranslationGaugeDegenerate
from .geometry import Pose, cayley_to_rotation, rotation_angle_deg, rotation_to_cayley, super_fibonacci_rotations
from .residuals import Correspondences, regularize, solver_covariances

N_SEEDS = 40
MAX_SEED_ANGLE_DEG = 175.0
GRAD_TOL = 1e-8
DEDUP_TOL = 1e-6
NEWTON_ITERS = 50
POLISH_ITERS = 20
N_POLISH = 3
# identity plus half turns about x, y, z
FRAME_TURNS = (None, np.diag([1.0, -1.0, -1.0]), np.diag([-1.0, 1.0, -1.0]), np.diag([-1.0, -1.0, 1.0]))

# monomials m(s) = [1, s1, s2, s3, s1^2, s2^2, s3^2, s1 s2, s1 s3, s2 s3]
_MONO_EXP = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1],
                      [2, 0, 0], [0, 2, 0], [0, 0, 2], [1, 1, 0], [1, 0, 1], [0, 1, 1]])
_PAIRS = [(0, 1, 7), (0, 2, 8), (1, 2, 9)]


def _rbar_basis() -> np.ndarray:
    """``B`` (9, 10) with ``vec(Rbar(s)) = B m(s)`` (column-major vec)."""
    E = np.eye(3)
    mats = [np.zeros((3, 3)) for _ in range(10)]
    mats[0] = np.eye(3)
    for k in range(3):
        sk = np.zeros((3, 3))
        a = E[k]
        sk[0, 1], sk[0, 2], sk[1, 0], sk[1, 2], sk[2, 0], sk[2, 1] = -a[2], a[1], a[2], -a[0], -a[1], a[0]
        mats[1 + k] = 2.0 * sk
        mats[4 + k] = -np.eye(3) + 2.0 * np.outer(a, a)
    for a, b, idx in _PAIRS:
        mats[idx] = 2.0 * (np.outer(E[a], E[b]) + np.outer(E[b], E[a]))
    return np.column_stack([M.reshape(-1, order="F") for M in mats])


_B = _rbar_basis()
# second derivatives of each monomial w.r.t. s, (10, 3, 3)
_M_HESS = np.zeros((10, 3, 3))
for _k in range(3):
    _M_HESS[4 + _k, _k, _k] = 2.0
for _a, _b, _idx in _PAIRS:
    _M_HESS[_idx, _a, _b] = _M_HESS[_idx, _b, _a] = 1.0


def _monomials(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``m(s)`` (..., 10) and its Jacobian (..., 10, 3)."""
    s = np.asarray(s, float)
    s1, s2, s3 = s[..., 0], s[..., 1], s[..., 2]
    m = np.empty(s.shape[:-1] + (10,))
    m[..., 0] = 1.0
    m[..., 1:4] = s
    m[..., 4:7] = s * s
    m[..., 7] = s1 * s2
    m[..., 8] = s1 * s3
    m[..., 9] = s2 * s3
    D = np.zeros(s.shape[:-1] + (10, 3))
    for k in range(3):
        D[..., 1 + k, k] = 1.0
        D[..., 4 + k, k] = 2.0 * s[..., k]
    D[..., 7, 0], D[..., 7, 1] = s2, s1
    D[..., 8, 0], D[..., 8, 2] = s3, s1
    D[..., 9, 1], D[..., 9, 2] = s3, s2
    return m, D


def vec(R: np.ndarray) -> np.ndarray:
    return np.asarray(R, float).reshape(-1, order="F")


@dataclass(frozen=True)
class LinearizedResidual:
    A: np.ndarray  # (2, 9) acting on vec(R)
    T: np.ndarray  # (2, 3) acting on t
    Sigma: np.ndarray  # (2, 2)

    def evaluate(self, R: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.A @ vec(R) + self.T @ np.asarray(t, float)


def _point_blocks(X: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(X)
    T = np.zeros((n, 2, 3))
    T[:, 0, 0] = T[:, 1, 1] = 1.0
    T[:, :, 2] = -U
    # (x^T kron I3): column 3 j + i of row i holds x_j
    Kx = np.zeros((n, 3, 9))
    for j in range(3):
        for i in range(3):
            Kx[:, i, 3 * j + i] = X[:, j]
    return T @ Kx, T


def _line_blocks(P: np.ndarray, Q: np.ndarray, L: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = len(P)
    A = np.zeros((m, 2, 9))
    for j in range(3):
        A[:, 0, 3 * j:3 * j + 3] = L * P[:, j:j + 1]
        A[:, 1, 3 * j:3 * j + 3] = L * Q[:, j:j + 1]
    T = np.stack([L, L], axis=1)
    return A, T


def _assemble_arrays(corr: Correspondences, point_covs, line_covs):
    Ap, Tp = _point_blocks(corr.X, corr.U)
    Al, Tl = _line_blocks(corr.P, corr.Q, corr.L)
    A = np.concatenate([Ap, Al])
    T = np.concatenate([Tp, Tl])
    S = np.concatenate([np.asarray(point_covs, float).reshape(-1, 2, 2),
                        np.asarray(line_covs, float).reshape(-1, 2, 2)])
    return A, T, S


def assemble(corr: Correspondences, point_covs: np.ndarray, line_covs: np.ndarray) -> list[LinearizedResidual]:
    """One ``(A_k, T_k, Sigma_k)`` block per point, then per line."""
    A, T, S = _assemble_arrays(corr, point_covs, line_covs)
    return [LinearizedResidual(a, b, c) for a, b, c in zip(A, T, S)]


@dataclass
class ReducedCost:
    """Weighted algebraic cost after eliminating the translation.

    ``value(s)`` is the true cost ``0.5 vec(R(s))^T Q vec(R(s))``;
    ``poly_*`` refer to the quartic ``P(s) = (1 + |s|^2)^2 value(s)``,
    stored in Gram form ``0.5 m(s)^T K m(s)``.
    """

    Q: np.ndarray
    t_map: np.ndarray  # t(s) = t_map @ vec(R(s))
    K: np.ndarray = field(init=False)
    scale: float = field(init=False)

    def __post_init__(self):
        self.Q = 0.5 * (self.Q + self.Q.T)
        self.K = _B.T @ self.Q @ _B
        self.scale = float(np.linalg.norm(self.K)) or 1.0

    # quartic
    def poly_value(self, s):
        m, _ = _monomials(s)
        return 0.5 * np.einsum("...i,ij,...j->...", m, self.K, m)

    def poly_grad(self, s):
        m, D = _monomials(s)
        return np.einsum("...ia,ij,...j->...a", D, self.K, m)

    def poly_hess(self, s):
        m, D = _monomials(s)
        Km = m @ self.K
        return (np.einsum("...ia,ij,...jb->...ab", D, self.K, D)
                + np.einsum("...i,iab->...ab", Km, _M_HESS))

    # true cost
    def value(self, s):
        s = np.asarray(s, float)
        return self.poly_value(s) / (1.0 + np.sum(s * s, -1)) ** 2

    def grad(self, s):
        s = np.asarray(s, float)
        D = (1.0 + np.sum(s * s, -1))[..., None]
        return self.poly_grad(s) / D**2 - 4.0 * self.poly_value(s)[..., None] * s / D**3

    def hess(self, s):
        s = np.asarray(s, float)
        D = (1.0 + np.sum(s * s, -1))[..., None, None]
        P = self.poly_value(s)[..., None, None]
        g = self.poly_grad(s)
        gs = g[..., :, None] * s[..., None, :]
        ss = s[..., :, None] * s[..., None, :]
        return (self.poly_hess(s) / D**2 - 4.0 * (gs + np.swapaxes(gs, -1, -2)) / D**3
                - 4.0 * P * np.eye(3) / D**3 + 24.0 * P * ss / D**4)

    def translation(self, s) -> np.ndarray:
        return self.t_map @ vec(cayley_to_rotation(s))

    def rotation_cost(self, R: np.ndarray) -> float:
        r = vec(R)
        return float(0.5 * r @ self.Q @ r)

    def coefficients(self) -> dict[tuple[int, int, int], float]:
        """Monomial coefficients of the quartic ``P``."""
        out: dict = defaultdict(float)
        for i in range(10):
            for j in range(10):
                e = tuple(int(v) for v in _MONO_EXP[i] + _MONO_EXP[j])
                out[e] += 0.5 * self.K[i, j]
        return dict(out)

    def gradient_coefficients(self) -> list[dict[tuple[int, int, int], float]]:
        """Coefficients of the three cubic gradient polynomials of ``P``."""
        grads = []
        for a in range(3):
            g: dict = defaultdict(float)
            for e, c in self.coefficients().items():
                if e[a] > 0:
                    e2 = list(e)
                    e2[a] -= 1
                    g[tuple(e2)] += c * e[a]
            grads.append(dict(g))
        return grads


def _reduce(A: np.ndarray, T: np.ndarray, S: np.ndarray) -> ReducedCost:
    Om = np.linalg.inv(regularize(S))
    OmA = Om @ A
    OmT = Om @ T
    AA = np.einsum("kri,krj->ij", A, OmA)
    AT = np.einsum("kri,krj->ij", A, OmT)
    TT = np.einsum("kri,krj->ij", T, OmT)
    if np.linalg.cond(TT) > 1e10:
        raise TranslationGaugeDegenerate("translation normal equations are singular")
    TT_inv_ATt = np.linalg.solve(TT, AT.T)
    return ReducedCost(AA - AT @ TT_inv_ATt, -TT_inv_ATt)


def eliminate_translation(blocks: list[LinearizedResidual]) -> ReducedCost:
    """Closed-form translation ``t(s)`` and the translation-free cost.

    Raises:
        TranslationGaugeDegenerate: if ``sum T^T Sigma^-1 T`` is ill-conditioned.
    """
    A = np.array([b.A for b in blocks])
    T = np.array([b.T for b in blocks])
    S = np.array([b.Sigma for b in blocks])
    return _reduce(A, T, S)


def seed_grid(n: int = N_SEEDS, max_angle_deg: float = MAX_SEED_ANGLE_DEG) -> np.ndarray:
    """Cayley parameters of the deterministic rotation seed grid."""
    seeds = []
    for R in super_fibonacci_rotations(n):
        if rotation_angle_deg(R) > max_angle_deg:
            continue
        try:
            seeds.append(rotation_to_cayley(R))
        except Singular180:
            continue
    return np.array(seeds)


_SEEDS = seed_grid()


def _batched_newton(fun_grad, fun_hess, S: np.ndarray, iters: int) -> np.ndarray:
    S = np.array(S, float)
    active = np.ones(len(S), bool)
    for _ in range(iters):
        if not active.any():
            break
        g = fun_grad(S[active])
        H = fun_hess(S[active])
        try:
            step = -np.linalg.solve(H, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -np.array([np.linalg.lstsq(h, v, rcond=None)[0] for h, v in zip(H, g)])
        # limit wild jumps from near-singular Hessians
        norm = np.linalg.norm(step, axis=1)
        cap = 1.0 + np.linalg.norm(S[active], axis=1)
        step *= np.minimum(1.0, cap / np.maximum(norm, 1e-300))[:, None]
        S[active] += step
        idx = np.flatnonzero(active)
        done = np.linalg.norm(step, axis=1) < 1e-15 * cap
        active[idx[done]] = False
    return S


def solve_polynomial_system(cost: ReducedCost, seeds: np.ndarray | None = None,
                            grad_tol: float = GRAD_TOL) -> np.ndarray:
    """Stationary points of the quartic ``P(s)`` reached from the seed grid.

    A point is accepted when ``|grad P| < grad_tol * |K|_F`` (the tolerance is
    relative to the cost's scale so that rescaling all covariances does not
    change the answer). Returns an (k, 3) array deduplicated at 1e-6.

    Raises:
        NoStationaryPoint: if no start converges.
    """
    seeds = _SEEDS if seeds is None else np.asarray(seeds, float)
    S = _batched_newton(cost.poly_grad, cost.poly_hess, seeds, NEWTON_ITERS)
    ok = np.all(np.isfinite(S), axis=1)
    S = S[ok]
    gn = np.linalg.norm(cost.poly_grad(S), axis=1)
    S = S[gn < grad_tol * cost.scale]
    if len(S) == 0:
        raise NoStationaryPoint("no seed converged to a stationary point")
    order = np.lexsort((S[:, 2], S[:, 1], S[:, 0], cost.poly_value(S)))
    out: list[np.ndarray] = []
    for s in S[order]:
        if all(np.linalg.norm(s - o) > DEDUP_TOL * max(1.0, np.linalg.norm(s)) for o in out):
            out.append(s)
    return np.array(out)


def _newton_polish(cost: ReducedCost, s0: np.ndarray, iters: int = POLISH_ITERS) -> np.ndarray:
    """Damped Newton on the true cost with the analytic Hessian."""
    s = np.array(s0, float)
    f = float(cost.value(s))
    mu = 0.0
    for _ in range(iters):
        g = cost.grad(s)
        H = cost.hess(s)
        lam_min = np.linalg.eigvalsh(H)[0]
        mu = 0.0 if lam_min > 0 else -lam_min + 1e-12 * (abs(lam_min) + 1.0)
        improved = False
        for _ in range(30):
            step = -np.linalg.solve(H + mu * np.eye(3), g)
            s_new = s + step
            f_new = float(cost.value(s_new))
            if f_new <= f:
                improved = True
                break
            mu = max(10.0 * mu, 1e-9 * (abs(np.trace(H)) + 1.0))
        if not improved:
            break
        s, f_old, f = s_new, f, f_new
        if np.linalg.norm(step) < 1e-15 * (1.0 + np.linalg.norm(s)) or f_old - f <= 1e-16 * max(f_old, 1e-300):
            break
    return s


@dataclass
class DlsuResult:
    pose: Pose
    cost: float
    diagnostics: dict = field(default_factory=dict)


def _mean_depth(corr: Correspondences, pose: Pose) -> float:
    return float(np.mean(pose.transform(corr.world_features())[:, 2]))


def solve_dlsu(corr: Correspondences, d_bar: float | None = None,
               pose_hypothesis: Pose | None = None, polish: bool = True,
               seeds: np.ndarray | None = None) -> DlsuResult:
    """Uncertainty-aware DLS(L) pose.

    Args:
        corr: correspondences with covariances.
        d_bar: average scene depth (used without a pose hypothesis).
        pose_hypothesis: rough pose for per-feature depths and rotated 3D
            covariances.
        polish: refine the best stationary points with Newton's method on
            the weighted cost.
        seeds: override of the Cayley seed grid.

    Raises:
        AllCandidatesBehindCamera: no stationary point yields positive depth.
    """
    point_covs, line_covs = solver_covariances(corr, d_bar=d_bar, pose=pose_hypothesis)
    A, T, S = _assemble_arrays(corr, point_covs, line_covs)
    cost = _reduce(A, T, S)

    # Minima near 180 deg sit at huge |s|; solving again in world frames
    # turned by 180 deg about each axis moves them back near the origin.
    scored = []
    n_stationary = 0
    all_cands = []
    for G in FRAME_TURNS:
        if G is None:
            cost_g = cost
        else:
            A_g, T_g, _ = _assemble_arrays(corr.transformed(Pose(G, np.zeros(3))), point_covs, line_covs)
            cost_g = _reduce(A_g, T_g, S)
        try:
            cands = solve_polynomial_system(cost_g, seeds)
        except NoStationaryPoint:
            continue
        n_stationary += len(cands)
        for k, s in enumerate(cands):
            R = cayley_to_rotation(s) if G is None else cayley_to_rotation(s) @ G
            all_cands.append(R)
            pose = Pose(R, cost.t_map @ vec(R))
            if _mean_depth(corr, pose) > 0:
                scored.append((cost.rotation_cost(R), (len(all_cands), k), pose))
    if n_stationary == 0:
        raise NoStationaryPoint("no seed converged to a stationary point in any frame")
    if not scored:
        raise AllCandidatesBehindCamera("no DLS stationary point lies in front of the camera")
    scored.sort(key=lambda c: (c[0], c[1]))

    if polish:
        polished = []
        for _, key, pose in scored[:N_POLISH]:
            # re-centre the world frame on the candidate rotation, polish near s = 0
            G = Pose(pose.R, np.zeros(3))
            corr_g = corr.transformed(G)
            A_g, T_g, _ = _assemble_arrays(corr_g, point_covs, line_covs)
            cost_g = _reduce(A_g, T_g, S)
            s_g = _newton_polish(cost_g, np.zeros(3))
            R = cayley_to_rotation(s_g) @ pose.R
            p = Pose(R, cost_g.translation(s_g))
            if _mean_depth(corr, p) > 0:
                polished.append((cost.rotation_cost(R), key, p))
        scored = sorted(polished + scored, key=lambda c: (c[0], c[1]))

    best_cost, _, best = scored[0]
    return DlsuResult(best, float(best_cost), {
        "n_stationary": n_stationary,
        "stationary_rotations": np.array(all_cands),
        "reduced_cost": cost,
    })


def solve_dls(corr: Correspondences, polish: bool = True) -> DlsuResult:
    """Unweighted baseline: identical pipeline with identity covariances."""
    return solve_dlsu(corr.with_identity_covariances(), d_bar=1.0, polish=polish)
