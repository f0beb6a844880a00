"""Control-point linear PnP(L) solver with covariance-whitened residuals.

Feature points are written in barycentric coordinates of four (three for
planar scenes) control points. Each algebraic point/line residual then becomes
linear in the camera-frame control points; residual blocks are whitened by
their covariance before the null-space analysis. With identity covariances the
solver reduces to plain EPnP(L).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import AllCandidatesBehindCamera, DegenerateGeometry
from .geometry import Pose, procrustes
from .residuals import Correspondences, isotropic_variance, solver_covariances, whitening

PLANAR_REL_SV = 1e-6
GN_ITERS = 10
# exact (zero-variance) features get a large but finite weight
PCA_VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class ControlPointBasis:
    C: np.ndarray  # (K, 3) with K = 4, or 3 for planar structure

    @property
    def planar(self) -> bool:
        return len(self.C) == 3


@dataclass
class EpnpSystem:
    M: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray


@dataclass
class EpnpResult:
    pose: Pose
    cost: float
    diagnostics: dict = field(default_factory=dict)


def _pca_weights(sigma2: np.ndarray) -> np.ndarray:
    sigma2 = np.asarray(sigma2, float)
    top = sigma2.max() if sigma2.size else 0.0
    if not top > 0:
        return np.ones_like(sigma2)
    return 1.0 / np.maximum(sigma2, PCA_VAR_FLOOR * top)


def select_control_points_weighted(points: np.ndarray, sigma2: np.ndarray) -> ControlPointBasis:
    """Control points from a ``1/sigma^2``-weighted PCA of the 3D features.

    The first control point is the weighted centroid, the others sit one
    weighted standard deviation along each principal direction. Direction
    signs are fixed by the sign of the weighted third moment so the basis
    moves rigidly with the structure.

    Raises:
        DegenerateGeometry: if the weighted scatter has rank < 2.
    """
    X = np.asarray(points, float)
    if len(X) < 3:
        raise DegenerateGeometry("need at least three 3D features")
    w = _pca_weights(sigma2)
    w = w / w.sum()
    c1 = w @ X
    D = X - c1
    scatter = (D * w[:, None]).T @ D
    lam, V = np.linalg.eigh(scatter)
    lam, V = lam[::-1].clip(min=0.0), V[:, ::-1]
    if lam[0] <= 0 or np.sqrt(lam[1] / lam[0]) < PLANAR_REL_SV:
        raise DegenerateGeometry("3D features are (nearly) collinear")
    for k in range(3):
        m3 = w @ (D @ V[:, k]) ** 3
        if m3 < 0:
            V[:, k] = -V[:, k]
    K = 3 if np.sqrt(lam[2] / lam[0]) < PLANAR_REL_SV else 4
    C = [c1] + [c1 + np.sqrt(lam[k]) * V[:, k] for k in range(K - 1)]
    return ControlPointBasis(np.array(C))


def barycentric(points: np.ndarray, basis: ControlPointBasis) -> np.ndarray:
    """Coordinates ``alpha`` (n, K) with ``alpha @ C = x`` and rows summing to 1."""
    X = np.atleast_2d(np.asarray(points, float))
    C = basis.C
    if basis.planar:
        E = (C[1:] - C[0]).T  # (3, 2)
        a = np.linalg.lstsq(E, (X - C[0]).T, rcond=None)[0].T
        return np.column_stack([1.0 - a.sum(axis=1), a])
    H = np.vstack([C.T, np.ones(4)])
    if np.linalg.cond(H) > 1e8:
        raise DegenerateGeometry("control points are not affinely independent")
    return np.linalg.solve(H, np.vstack([X.T, np.ones(len(X))])).T


def build_system(corr: Correspondences, point_covs: np.ndarray, line_covs: np.ndarray,
                 basis: ControlPointBasis) -> EpnpSystem:
    """Whitened design matrix ``M_U`` acting on the stacked camera control points."""
    K = len(basis.C)
    blocks = []
    if corr.n_points:
        a = barycentric(corr.X, basis)
        Mp = np.zeros((corr.n_points, 2, K, 3))
        Mp[:, 0, :, 0] = a
        Mp[:, 1, :, 1] = a
        Mp[:, 0, :, 2] = -a * corr.U[:, 0:1]
        Mp[:, 1, :, 2] = -a * corr.U[:, 1:2]
        Mp = Mp.reshape(corr.n_points, 2, 3 * K)
        blocks.append(whitening(point_covs) @ Mp)
    if corr.n_lines:
        ap = barycentric(corr.P, basis)
        aq = barycentric(corr.Q, basis)
        Ml = np.stack([ap[:, :, None] * corr.L[:, None, :],
                       aq[:, :, None] * corr.L[:, None, :]], axis=1)
        Ml = Ml.reshape(corr.n_lines, 2, 3 * K)
        blocks.append(whitening(line_covs) @ Ml)
    M = np.concatenate(blocks, axis=0).reshape(-1, 3 * K)
    lam, V = np.linalg.eigh(M.T @ M)
    return EpnpSystem(M, lam, V)


def _pair_diffs(V: np.ndarray, K: int) -> np.ndarray:
    """Per control-point pair, the difference vectors of each null vector: (pairs, N, 3)."""
    Vs = V.T.reshape(V.shape[1], K, 3)
    return np.array([Vs[:, i] - Vs[:, j] for i, j in combinations(range(K), 2)])


def _beta_cases(dv: np.ndarray, rho: np.ndarray) -> list[np.ndarray]:
    """Linearized beta estimates for null-space dimensions N = 1..4."""
    n_vec = dv.shape[1]
    dots = np.einsum("pai,pbi->pab", dv, dv)
    out = []
    # N = 1
    d1 = np.sqrt(dots[:, 0, 0])
    b1 = (d1 @ np.sqrt(rho)) / (d1 @ d1)
    out.append(np.array([b1]))
    def lin(sel):
        L = np.column_stack([dots[:, a, b] * (1 if a == b else 2) for a, b in sel])
        return np.linalg.lstsq(L, rho, rcond=None)[0]

    if n_vec >= 2:
        b11, b12, b22 = lin([(0, 0), (0, 1), (1, 1)])
        if b11 < 0:
            b11, b12, b22 = -b11, -b12, -b22
        bb1 = np.sqrt(max(b11, 0.0))
        bb2 = np.sqrt(max(b22, 0.0)) * (np.sign(b12) or 1.0)
        out.append(np.array([bb1, bb2]))
    if n_vec >= 3 and len(rho) >= 5:
        b11, b12, b22, b13, b23 = lin([(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)])
        if b11 < 0:
            b11, b12, b22, b13 = -b11, -b12, -b22, -b13
        bb1 = np.sqrt(max(b11, 0.0))
        bb2 = np.sqrt(max(b22, 0.0)) * (np.sign(b12) or 1.0)
        bb3 = b13 / bb1 if bb1 > 0 else 0.0
        out.append(np.array([bb1, bb2, bb3]))
    if n_vec >= 4:
        b11, b12, b13, b14 = lin([(0, 0), (0, 1), (0, 2), (0, 3)])
        if b11 < 0:
            b11, b12, b13, b14 = -b11, -b12, -b13, -b14
        bb1 = np.sqrt(max(b11, 0.0))
        rest = np.array([b12, b13, b14]) / bb1 if bb1 > 0 else np.zeros(3)
        out.append(np.concatenate([[bb1], rest]))
    return out


def _gauss_newton_betas(dv: np.ndarray, rho: np.ndarray, beta0: np.ndarray, iters: int) -> np.ndarray:
    beta = np.zeros(dv.shape[1])
    beta[:len(beta0)] = beta0
    for _ in range(iters):
        diff = np.einsum("b,pbi->pi", beta, dv)
        e = np.sum(diff * diff, axis=1) - rho
        J = 2.0 * np.einsum("pi,pbi->pb", diff, dv)
        step = np.linalg.lstsq(J, -e, rcond=None)[0]
        beta = beta + step
        if np.linalg.norm(step) < 1e-14 * max(1.0, np.linalg.norm(beta)):
            break
    return beta


def _whitened_cost(system: EpnpSystem, basis: ControlPointBasis, pose: Pose) -> float:
    vec = pose.transform(basis.C).reshape(-1)
    r = system.M @ vec
    return float(r @ r)


def solve_epnpu(corr: Correspondences, d_bar: float | None = None,
                pose_hypothesis: Pose | None = None, gn_iters: int = GN_ITERS) -> EpnpResult:
    """Uncertainty-aware EPnP(L).

    Args:
        corr: correspondences with covariances.
        d_bar: average scene depth, used when no pose hypothesis is given
            (isotropic 3D covariances, common depth).
        pose_hypothesis: rough pose; when given, per-feature depths and
            rotated 3D covariances enter the residual covariances.
        gn_iters: Gauss-Newton iterations on the beta coefficients.

    Raises:
        DegenerateGeometry: degenerate structure or too few constraints.
        AllCandidatesBehindCamera: no candidate places the features in front.
    """
    if 2 * (corr.n_points + corr.n_lines) < 6:
        raise DegenerateGeometry("need at least three point-equivalent features")
    world = corr.world_features()
    sig2 = np.concatenate([isotropic_variance(corr.Sx), isotropic_variance(corr.Sp),
                           isotropic_variance(corr.Sq)])
    basis = select_control_points_weighted(world, sig2)
    point_covs, line_covs = solver_covariances(corr, d_bar=d_bar, pose=pose_hypothesis)
    system = build_system(corr, point_covs, line_covs, basis)

    K = len(basis.C)
    n_null = 4 if K == 4 else 3
    V = system.eigvecs[:, :n_null]
    dv = _pair_diffs(V, K)
    rho = np.array([np.sum((basis.C[i] - basis.C[j]) ** 2) for i, j in combinations(range(K), 2)])

    if pose_hypothesis is not None:
        depths = np.concatenate([pose_hypothesis.transform(A)[:, 2] for A in (corr.X, corr.P, corr.Q)])
        depths = np.where(depths > 0, depths, np.nan)
        fill = np.nanmean(depths) if np.any(np.isfinite(depths)) else (d_bar or 1.0)
        depths = np.nan_to_num(depths, nan=fill)
    else:
        depths = np.full(len(world), d_bar if d_bar is not None else 1.0)
    su = np.concatenate([np.trace(corr.Su, axis1=1, axis2=2) / 2.0, corr.sl2, corr.sl2])
    proc_w = 1.0 / np.maximum(sig2 + depths**2 * su, 1e-300)
    if not np.all(np.isfinite(proc_w)) or np.ptp(proc_w) == 0:
        proc_w = np.ones(len(world))

    alphas = barycentric(world, basis)
    candidates = []
    for case, beta0 in enumerate(_beta_cases(dv, rho), start=1):
        beta = _gauss_newton_betas(dv, rho, beta0, gn_iters) if gn_iters else np.pad(beta0, (0, n_null - len(beta0)))
        Cc = (V @ beta).reshape(K, 3)
        cam = alphas @ Cc
        if cam[:, 2].mean() < 0:
            Cc, cam = -Cc, -cam
        if not cam[:, 2].mean() > 0:
            continue
        pose = procrustes(world, cam, proc_w)
        if not np.mean(pose.transform(world)[:, 2]) > 0:
            continue
        candidates.append((_whitened_cost(system, basis, pose), case, pose))
    if not candidates:
        raise AllCandidatesBehindCamera("no EPnP candidate has positive mean depth")
    cost, case, pose = min(candidates, key=lambda c: (c[0], c[1]))
    return EpnpResult(pose, cost, {
        "case": case,
        "candidate_costs": {c: k for k, c, _ in candidates},
        "eigenvalues": system.eigvals,
        "planar": basis.planar,
        "control_points": basis.C,
    })


def solve_epnp(corr: Correspondences, gn_iters: int = GN_ITERS) -> EpnpResult:
    """Plain EPnP(L): the uncertainty-aware solver with identity covariances."""
    return solve_epnpu(corr.with_identity_covariances(), d_bar=1.0, gn_iters=gn_iters)
