"""Motion-only bundle adjustment over the camera pose.

Three covariance regimes for the reprojection residuals:

``standard``
    detection covariances only, fixed; Levenberg-Marquardt.
``iterative_uncertain``
    detection + projected 3D covariances evaluated at the current pose before
    every step and frozen within it (IRLS-like); Levenberg-Marquardt.
``full_uncertain``
    the pose dependence of the covariances is part of the objective; damped
    Newton with an analytic gradient and a finite-difference Hessian.

Poses are updated as ``R <- exp([dw]) R``, ``t <- t + dt``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, skew, so3_exp
from .residuals import Correspondences, regularize

log = logging.getLogger(__name__)

REGIMES = ("standard", "iterative_uncertain", "full_uncertain")
MIN_DEPTH = 1e-9


@dataclass
class RefineConfig:
    regime: str = "iterative_uncertain"
    max_iters: int = 20
    step_tol: float = 1e-10
    cost_tol: float = 1e-12
    lm_lambda: float = 1e-3
    lm_factor: float = 10.0
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if min(self.step_tol, self.cost_tol, self.lm_lambda, self.fd_step) <= 0 or self.lm_factor <= 1:
            raise ValueError("tolerances and damping must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class RefineResult:
    pose: Pose
    cost_trace: list[float]
    iterations: int
    converged: bool
    dropped: int = 0
    timings: dict = field(default_factory=dict)
    # (cost before, cost after) of each accepted step under that step's weights
    step_costs: list = field(default_factory=list)


def apply_update(pose: Pose, delta: np.ndarray) -> Pose:
    return Pose(so3_exp(delta[:3]) @ pose.R, pose.t + delta[3:])


@dataclass
class _Group:
    """Residual rows ``rho = L pi(R x + t) - o`` sharing a dimension ``d``."""

    X: np.ndarray   # (N, 3)
    Sx: np.ndarray  # (N, 3, 3)
    L: np.ndarray   # (N, d, 2)
    o: np.ndarray   # (N, d)
    S0: np.ndarray  # (N, d, d) detection covariance

    def subset(self, mask):
        return _Group(self.X[mask], self.Sx[mask], self.L[mask], self.o[mask], self.S0[mask])


def _groups(corr: Correspondences) -> list[_Group]:
    n, m = corr.n_points, corr.n_lines
    pts = _Group(corr.X, corr.Sx, np.tile(np.eye(2), (n, 1, 1)), corr.U, corr.Su)
    l2 = corr.L[:, None, :2]
    o = -corr.L[:, 2:3]
    S0 = corr.sl2[:, None, None]
    ends = _Group(np.concatenate([corr.P, corr.Q]), np.concatenate([corr.Sp, corr.Sq]),
                  np.concatenate([l2, l2]), np.concatenate([o, o]), np.concatenate([S0, S0]))
    return [g for g in (pts, ends) if len(g.X)]


def _pi_jac(xh):
    x, y, z = xh[:, 0], xh[:, 1], xh[:, 2]
    J = np.zeros((len(xh), 2, 3))
    J[:, 0, 0] = J[:, 1, 1] = 1.0 / z
    J[:, 0, 2] = -x / z**2
    J[:, 1, 2] = -y / z**2
    return J


def _eval(group: _Group, pose: Pose, regime: str, need_jac: bool = True):
    """Residuals, their pose Jacobians and covariances for one group."""
    Rx = group.X @ pose.R.T
    xh = Rx + pose.t
    Jpi = _pi_jac(xh)
    rho = np.einsum("nij,nj->ni", group.L, xh[:, :2] / xh[:, 2:3]) - group.o
    LJ = group.L @ Jpi  # (N, d, 3)
    if regime == "standard":
        S = group.S0
    else:
        Y = pose.R @ group.Sx @ pose.R.T
        S = group.S0 + LJ @ Y @ np.swapaxes(LJ, 1, 2)
    if not need_jac:
        return rho, None, S
    G = np.concatenate([-skew(Rx), np.tile(np.eye(3), (len(xh), 1, 1))], axis=2)  # (N, 3, 6)
    return rho, LJ @ G, S


def _split_valid(groups, pose):
    valid, dropped = [], 0
    for g in groups:
        z = g.X @ pose.R[2] + pose.t[2]
        ok = z > MIN_DEPTH
        dropped += int((~ok).sum())
        valid.append(g if ok.all() else g.subset(ok))
    return valid, dropped


def _cost_frozen(groups, pose, Ws):
    total = 0.0
    for g, W in zip(groups, Ws):
        z = g.X @ pose.R[2] + pose.t[2]
        if np.any(z <= MIN_DEPTH):
            return np.inf
        rho, _, _ = _eval(g, pose, "standard", need_jac=False)
        rw = np.einsum("nij,nj->ni", W, rho)
        total += float(np.sum(rw * rw))
    return total


def _whiten(S):
    info = np.linalg.inv(regularize(S))
    info = 0.5 * (info + np.swapaxes(info, 1, 2))
    return np.swapaxes(np.linalg.cholesky(info), 1, 2)


def reprojection_residuals(pose: Pose, corr: Correspondences) -> tuple[np.ndarray, np.ndarray]:
    """Stacked residual rows and their Jacobian w.r.t. the 6-dof update.

    Rows: ``pi(x_hat) - u`` per point (two each), then ``l^T [pi; 1]`` for
    every first endpoint and every second endpoint of the lines.
    """
    rows, jacs = [], []
    for g in _groups(corr):
        rho, J, _ = _eval(g, pose, "standard")
        rows.append(rho.reshape(-1))
        jacs.append(J.reshape(-1, 6))
    if not rows:
        return np.zeros(0), np.zeros((0, 6))
    return np.concatenate(rows), np.concatenate(jacs)


def objective(pose: Pose, corr: Correspondences, regime: str) -> float:
    """Covariance-weighted reprojection cost, covariances taken at ``pose``."""
    total = 0.0
    for g in _groups(corr):
        rho, _, S = _eval(g, pose, regime, need_jac=False)
        total += float(np.einsum("ni,ni->", rho, np.linalg.solve(regularize(S), rho[..., None])[..., 0]))
    return total


def full_objective_and_grad(pose: Pose, corr: Correspondences) -> tuple[float, np.ndarray]:
    """Full-uncertainty cost and its exact gradient w.r.t. the 6-dof update.

    Differentiates through the pose dependence of the residual covariances.
    """
    f = 0.0
    grad = np.zeros(6)
    E = np.eye(3)
    for g in _groups(corr):
        Rx = g.X @ pose.R.T
        xh = Rx + pose.t
        a, b, c = xh[:, 0], xh[:, 1], xh[:, 2]
        Jpi = _pi_jac(xh)
        LJ = g.L @ Jpi
        Y = pose.R @ g.Sx @ pose.R.T
        S = regularize(g.S0 + LJ @ Y @ np.swapaxes(LJ, 1, 2))
        rho = np.einsum("nij,nj->ni", g.L, xh[:, :2] / c[:, None]) - g.o
        w = np.linalg.solve(S, rho[..., None])[..., 0]
        f += float(np.sum(w * rho))
        G = np.concatenate([-skew(Rx), np.tile(E, (len(xh), 1, 1))], axis=2)
        drho = LJ @ G  # (N, d, 6)
        grad += 2.0 * np.einsum("ni,nik->k", w, drho)
        LJt_w = np.einsum("nij,ni->nj", LJ, w)  # (N, 3) = (L J)^T w
        YLJt_w = np.einsum("nab,nb->na", Y, LJt_w)
        for k in range(6):
            dx = G[:, :, k]
            da, db, dc = dx[:, 0], dx[:, 1], dx[:, 2]
            dJ = np.zeros_like(Jpi)
            dJ[:, 0, 0] = dJ[:, 1, 1] = -dc / c**2
            dJ[:, 0, 2] = -da / c**2 + 2.0 * a * dc / c**3
            dJ[:, 1, 2] = -db / c**2 + 2.0 * b * dc / c**3
            dLJt_w = np.einsum("nij,ni->nj", g.L @ dJ, w)
            quad = 2.0 * np.einsum("na,na->n", dLJt_w, YLJt_w)
            if k < 3:
                K = skew(E[k])
                dY = K @ Y - Y @ K
                quad = quad + np.einsum("na,nab,nb->n", LJt_w, dY, LJt_w)
            grad[k] -= float(np.sum(quad))
    return f, grad


def _lm(pose, corr, cfg: RefineConfig) -> RefineResult:
    groups = _groups(corr)
    lam = cfg.lm_lambda
    trace: list[float] = []
    steps: list[tuple[float, float]] = []
    dropped_total = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        active, dropped = _split_valid(groups, pose)
        if dropped:
            log.info("refine: dropped %d features with non-positive depth", dropped)
            dropped_total += dropped
        Ws, H, gvec = [], np.zeros((6, 6)), np.zeros(6)
        cost = 0.0
        for g in active:
            rho, J, S = _eval(g, pose, cfg.regime)
            W = _whiten(S)
            rw = np.einsum("nij,nj->ni", W, rho)
            Jw = W @ J
            H += np.einsum("nik,nil->kl", Jw, Jw)
            gvec += np.einsum("nik,ni->k", Jw, rw)
            cost += float(np.sum(rw * rw))
            Ws.append(W)
        if not trace:
            trace.append(cost)
        if np.linalg.norm(gvec) <= 1e-14 * max(cost, 1.0) or cost == 0.0:
            converged = True
            it -= 1
            break
        accepted = False
        while lam < 1e16:
            A = H + lam * np.diag(np.diag(H) + 1e-12 * np.trace(H))
            delta = np.linalg.solve(A, -gvec)
            cand = apply_update(pose, delta)
            new_cost = _cost_frozen(active, cand, Ws)
            if new_cost <= cost:
                accepted = True
                break
            lam *= cfg.lm_factor
        if not accepted:
            converged = True
            break
        lam = max(lam / cfg.lm_factor, 1e-12)
        pose = cand
        trace.append(new_cost)
        steps.append((cost, new_cost))
        if np.linalg.norm(delta) < cfg.step_tol or cost - new_cost <= cfg.cost_tol * cost:
            converged = True
            break
    return RefineResult(pose, trace, it, converged, dropped_total, step_costs=steps)


def _full(pose, corr, cfg: RefineConfig) -> RefineResult:
    f, g = full_objective_and_grad(pose, corr)
    trace = [f]
    steps: list[tuple[float, float]] = []
    converged = False
    it = 0
    h = cfg.fd_step
    mu = cfg.lm_lambda
    for it in range(1, cfg.max_iters + 1):
        if np.linalg.norm(g) <= 1e-14 * max(f, 1.0) or f == 0.0:
            converged = True
            it -= 1
            break
        H = np.zeros((6, 6))
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            _, gp = full_objective_and_grad(apply_update(pose, e), corr)
            _, gm = full_objective_and_grad(apply_update(pose, -e), corr)
            H[:, k] = (gp - gm) / (2 * h)
        H = 0.5 * (H + H.T)
        lam_min = np.linalg.eigvalsh(H)[0]
        scale = np.trace(np.abs(H)) / 6 + 1e-300
        shift = 0.0 if lam_min > 0 else -lam_min
        accepted = False
        while mu < 1e16:
            delta = np.linalg.solve(H + (shift + mu * scale) * np.eye(6), -g)
            cand = apply_update(pose, delta)
            try:
                f_new, g_new = full_objective_and_grad(cand, corr)
            except (FloatingPointError, np.linalg.LinAlgError):
                f_new = np.inf
            if np.isfinite(f_new) and f_new <= f and _all_in_front(corr, cand):
                accepted = True
                break
            mu = max(mu * cfg.lm_factor, 1e-12)
        if not accepted:
            converged = True
            break
        mu = max(mu / cfg.lm_factor, 1e-12)
        f_old = f
        pose, f, g = cand, f_new, g_new
        trace.append(f)
        steps.append((f_old, f))
        if np.linalg.norm(delta) < cfg.step_tol or f_old - f <= cfg.cost_tol * f_old:
            converged = True
            break
    return RefineResult(pose, trace, it, converged, step_costs=steps)


def _all_in_front(corr, pose):
    return bool(np.all(pose.transform(corr.world_features())[:, 2] > MIN_DEPTH))


def refine(pose0: Pose, corr: Correspondences, config: RefineConfig | None = None) -> RefineResult:
    """Refine ``pose0`` by minimizing covariance-weighted reprojection errors.

    Returns the best pose reached; ``converged`` is False when the iteration
    budget ran out first.
    """
    cfg = config or RefineConfig()
    if corr.n_points + corr.n_lines < 3:
        raise ValueError("refinement needs at least three features")
    if cfg.regime == "full_uncertain":
        corr_front = corr
        if not _all_in_front(corr, pose0):
            z = lambda A: pose0.transform(A)[:, 2] > MIN_DEPTH  # noqa: E731
            corr_front = corr.subset(z(corr.X), z(corr.P) & z(corr.Q))
        return _full(pose0, corr_front, cfg)
    return _lm(pose0, corr, cfg)
