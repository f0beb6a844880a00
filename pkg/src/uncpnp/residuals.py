"""Point and line residuals with closed-form covariances.

Two residual families are provided:

* algebraic residuals, linear in the camera-frame coordinates, used by the
  closed-form solvers;
* gold-standard (reprojection) residuals used for refinement and RANSAC gating.

Every function accepts either single observations or stacked arrays with a
leading feature axis; the math broadcasts over it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, project, projection_jacobian

REG_EPS = 1e-10


@dataclass(frozen=True)
class PointObservation:
    x: np.ndarray
    Sigma_x: np.ndarray
    u: np.ndarray
    Sigma_u: np.ndarray


@dataclass(frozen=True)
class LineObservation:
    """3D segment (p, q) matched to a normalized 2D line ``l`` (``|l[:2]| = 1``)."""

    p: np.ndarray
    q: np.ndarray
    Sigma_p: np.ndarray
    Sigma_q: np.ndarray
    l: np.ndarray
    sigma_l2: float


def _arr(a, shape):
    return np.asarray(a, dtype=float).reshape(shape)


@dataclass
class Correspondences:
    """Stacked 2D-3D point and line correspondences with their covariances.

    Attributes:
        X, Sx, U, Su: points (n, 3), their covariances (n, 3, 3), detections
            (n, 2) and detection covariances (n, 2, 2).
        P, Q, Sp, Sq: line endpoints (m, 3) with covariances (m, 3, 3).
        L, sl2: normalized 2D line coefficients (m, 3) and detection
            variances (m,).
    """

    X: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    Sx: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    U: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    Su: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    P: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    Q: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    Sp: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    Sq: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    L: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sl2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        n = np.asarray(self.X).reshape(-1, 3).shape[0]
        m = np.asarray(self.P).reshape(-1, 3).shape[0]
        self.X = _arr(self.X, (n, 3))
        self.Sx = _arr(self.Sx, (n, 3, 3))
        self.U = _arr(self.U, (n, 2))
        self.Su = _arr(self.Su, (n, 2, 2))
        self.P = _arr(self.P, (m, 3))
        self.Q = _arr(self.Q, (m, 3))
        self.Sp = _arr(self.Sp, (m, 3, 3))
        self.Sq = _arr(self.Sq, (m, 3, 3))
        self.L = _arr(self.L, (m, 3))
        self.sl2 = _arr(self.sl2, (m,))

    @property
    def n_points(self) -> int:
        return len(self.X)

    @property
    def n_lines(self) -> int:
        return len(self.P)

    @classmethod
    def from_observations(cls, points=(), lines=()) -> "Correspondences":
        points, lines = list(points), list(lines)
        kw = {}
        if points:
            kw.update(X=[o.x for o in points], Sx=[o.Sigma_x for o in points],
                      U=[o.u for o in points], Su=[o.Sigma_u for o in points])
        if lines:
            kw.update(P=[o.p for o in lines], Q=[o.q for o in lines],
                      Sp=[o.Sigma_p for o in lines], Sq=[o.Sigma_q for o in lines],
                      L=[o.l for o in lines], sl2=[o.sigma_l2 for o in lines])
        return cls(**kw)

    def points(self) -> list[PointObservation]:
        return [PointObservation(*a) for a in zip(self.X, self.Sx, self.U, self.Su)]

    def lines(self) -> list[LineObservation]:
        return [LineObservation(*a) for a in zip(self.P, self.Q, self.Sp, self.Sq, self.L, self.sl2)]

    def subset(self, point_mask=None, line_mask=None) -> "Correspondences":
        pm = slice(None) if point_mask is None else np.asarray(point_mask)
        lm = slice(None) if line_mask is None else np.asarray(line_mask)
        return Correspondences(self.X[pm], self.Sx[pm], self.U[pm], self.Su[pm],
                               self.P[lm], self.Q[lm], self.Sp[lm], self.Sq[lm],
                               self.L[lm], self.sl2[lm])

    def without_lines(self) -> "Correspondences":
        return self.subset(line_mask=np.zeros(self.n_lines, dtype=bool))

    def transformed(self, G: Pose) -> "Correspondences":
        """Apply a rigid transform to the 3D structure (covariances rotate too)."""
        R = G.R
        rot = lambda S: R @ S @ R.T  # noqa: E731
        return Correspondences(G.transform(self.X), rot(self.Sx), self.U, self.Su,
                               G.transform(self.P), G.transform(self.Q),
                               rot(self.Sp), rot(self.Sq), self.L, self.sl2)

    def scaled_covariances(self, c: float) -> "Correspondences":
        return Correspondences(self.X, c * self.Sx, self.U, c * self.Su,
                               self.P, self.Q, c * self.Sp, c * self.Sq,
                               self.L, c * self.sl2)

    def with_identity_covariances(self) -> "Correspondences":
        """Unweighted problem: zero 3D covariances, unit 2D covariances."""
        n, m = self.n_points, self.n_lines
        return Correspondences(self.X, np.zeros((n, 3, 3)), self.U, np.tile(np.eye(2), (n, 1, 1)),
                               self.P, self.Q, np.zeros((m, 3, 3)), np.zeros((m, 3, 3)),
                               self.L, np.ones(m))

    def world_features(self) -> np.ndarray:
        """All 3D feature locations: points followed by line endpoints."""
        return np.concatenate([self.X, self.P, self.Q], axis=0)


# ----------------------------------------------------------------------------
# covariance hygiene


def regularize(S: np.ndarray) -> np.ndarray:
    """Make covariance(s) safely invertible.

    A matrix whose smallest eigenvalue falls below ``1e-12 * trace`` gets
    ``1e-10 * trace / dim`` added to its diagonal. An all-zero covariance
    carries no weighting information and is replaced by the identity.
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    dim = S.shape[-1]
    tr = np.trace(S, axis1=-2, axis2=-1)
    lam_min = np.linalg.eigvalsh(S)[..., 0]
    out = S.copy()
    bump = lam_min < 1e-12 * tr
    out[bump] += (REG_EPS * tr[bump] / dim)[..., None, None] * np.eye(dim)
    dead = ~(tr > 0)
    out[dead] = np.eye(dim)
    return out


def whitening(S: np.ndarray) -> np.ndarray:
    """Upper-triangular ``W`` with ``W.T @ W = inv(S)`` (after regularization)."""
    info = np.linalg.inv(regularize(S))
    info = 0.5 * (info + np.swapaxes(info, -1, -2))
    return np.swapaxes(np.linalg.cholesky(info), -1, -2)


@dataclass(frozen=True)
class ResidualBlock:
    r: np.ndarray
    Sigma_r: np.ndarray
    W: np.ndarray

    @classmethod
    def from_covariance(cls, r, Sigma_r) -> "ResidualBlock":
        Sigma_r = regularize(Sigma_r)
        return cls(np.asarray(r, dtype=float), Sigma_r, whitening(Sigma_r))

    @property
    def mahalanobis2(self) -> float:
        w = self.W @ self.r
        return float(w @ w)


def mahalanobis2(r: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis norms of stacked residuals (..., d) under (..., d, d)."""
    S = regularize(S)
    return np.einsum("...i,...i->...", r, np.linalg.solve(S, r[..., None])[..., 0])


# ----------------------------------------------------------------------------
# algebraic residuals


def _pose_args(pose):
    return (np.eye(3), np.zeros(3)) if pose is None else (pose.R, pose.t)


def point_algebraic_residual(pose: Pose, obs) -> np.ndarray:
    """``x_hat[:2] - u * x_hat[2]`` with ``x_hat = R x + t``."""
    x, u = _xu(obs)
    xh = x @ pose.R.T + pose.t
    return xh[..., :2] - u * xh[..., 2:3]


def line_algebraic_residual(pose: Pose, obs) -> np.ndarray:
    """``(l.p_hat, l.q_hat)`` for camera-frame endpoints."""
    p, q, l = _pql(obs)
    ph = p @ pose.R.T + pose.t
    qh = q @ pose.R.T + pose.t
    return np.stack([np.sum(l * ph, -1), np.sum(l * qh, -1)], axis=-1)


def _xu(obs):
    if isinstance(obs, PointObservation):
        return np.asarray(obs.x, float), np.asarray(obs.u, float)
    return obs.X, obs.U


def _pql(obs):
    if isinstance(obs, LineObservation):
        return np.asarray(obs.p, float), np.asarray(obs.q, float), np.asarray(obs.l, float)
    return obs.P, obs.Q, obs.L


def _point_fields(obs):
    if isinstance(obs, PointObservation):
        return tuple(np.asarray(a, float) for a in (obs.x, obs.Sigma_x, obs.u, obs.Sigma_u))
    return obs.X, obs.Sx, obs.U, obs.Su


def _line_fields(obs):
    if isinstance(obs, LineObservation):
        return (*(np.asarray(a, float) for a in (obs.p, obs.q, obs.Sigma_p, obs.Sigma_q, obs.l)),
                np.asarray(obs.sigma_l2, float))
    return obs.P, obs.Q, obs.Sp, obs.Sq, obs.L, obs.sl2


# ----------------------------------------------------------------------------
# algebraic residual covariances


def point_residual_covariance(R: np.ndarray | None, obs, depth) -> np.ndarray:
    """Covariance of the algebraic point residual.

    With ``R Sx R^T = [[S, w], [w^T, gamma]]`` the covariance is
    ``S + gamma u u^T + depth^2 Su - (u w^T + w u^T)``.

    Args:
        R: rotation used to express the 3D covariance in the camera frame;
            ``None`` means the covariance is taken as-is (isotropic case).
        obs: a :class:`PointObservation` or :class:`Correspondences`.
        depth: camera-frame depth(s) of the point(s), scalar or (n,).
    """
    _, Sx, u, Su = _point_fields(obs)
    Sh = Sx if R is None else R @ Sx @ R.T
    S = Sh[..., :2, :2]
    w = Sh[..., :2, 2]
    gamma = Sh[..., 2, 2][..., None, None]
    d2 = (np.asarray(depth, float) ** 2)[..., None, None]
    uu = u[..., :, None] * u[..., None, :]
    uw = u[..., :, None] * w[..., None, :]
    return S + gamma * uu + d2 * Su - (uw + np.swapaxes(uw, -1, -2))


def line_residual_covariance(R: np.ndarray | None, obs, depths) -> np.ndarray:
    """Diagonal covariance of the algebraic line residual.

    ``sl2 diag(lam_p^2, lam_q^2) + diag(l^T Sp_hat l, l^T Sq_hat l)``.

    Args:
        depths: ``(lam_p, lam_q)``; each scalar or (m,).
    """
    _, _, Sp, Sq, l, sl2 = _line_fields(obs)
    lam_p, lam_q = (np.asarray(d, float) for d in depths)
    Sph = Sp if R is None else R @ Sp @ R.T
    Sqh = Sq if R is None else R @ Sq @ R.T
    vp = sl2 * lam_p**2 + np.einsum("...i,...ij,...j->...", l, Sph, l)
    vq = sl2 * lam_q**2 + np.einsum("...i,...ij,...j->...", l, Sqh, l)
    out = np.zeros(np.shape(vp) + (2, 2))
    out[..., 0, 0] = vp
    out[..., 1, 1] = vq
    return out


def epnp_point_residual_covariance(obs, sigma_x2, d_bar: float) -> np.ndarray:
    """Isotropic / average-depth approximation ``sx2 I + d^2 Su + sx2 u u^T``."""
    _, _, u, Su = _point_fields(obs)
    s2 = np.asarray(sigma_x2, float)[..., None, None]
    uu = u[..., :, None] * u[..., None, :]
    return s2 * np.eye(2) + d_bar**2 * Su + s2 * uu


def epnp_line_residual_covariance(obs, sigma_p2, sigma_q2, d_bar: float) -> np.ndarray:
    """``sl2 d^2 I + |l|^2 diag(sp2, sq2)``."""
    _, _, _, _, l, sl2 = _line_fields(obs)
    ll = np.sum(l * l, axis=-1)
    vp = sl2 * d_bar**2 + ll * np.asarray(sigma_p2, float)
    vq = sl2 * d_bar**2 + ll * np.asarray(sigma_q2, float)
    out = np.zeros(np.shape(vp) + (2, 2))
    out[..., 0, 0] = vp
    out[..., 1, 1] = vq
    return out


def isotropic_variance(S: np.ndarray) -> np.ndarray:
    """Frobenius-optimal scalar variance ``trace(S) / 3`` (broadcasts)."""
    S = np.asarray(S, float)
    return np.trace(S, axis1=-2, axis2=-1) / S.shape[-1]


def solver_covariances(corr: Correspondences, d_bar: float | None = None,
                       pose: Pose | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Algebraic residual covariances for all features.

    Without a pose hypothesis the isotropic/average-depth approximations are
    used; with one, the full rotated 3D covariances and per-feature depths.

    Returns:
        (point covariances (n, 2, 2), line covariances (m, 2, 2)).
    """
    if pose is None:
        if d_bar is None:
            raise ValueError("either d_bar or a pose hypothesis is required")
        Sp = epnp_point_residual_covariance(corr, isotropic_variance(corr.Sx), d_bar)
        Sl = epnp_line_residual_covariance(corr, isotropic_variance(corr.Sp),
                                           isotropic_variance(corr.Sq), d_bar)
        return Sp, Sl
    # non-positive hypothesized depths carry no information; fall back to the mean
    dx = _positive_depths(pose.transform(corr.X)[:, 2], d_bar)
    dp = _positive_depths(pose.transform(corr.P)[:, 2], d_bar)
    dq = _positive_depths(pose.transform(corr.Q)[:, 2], d_bar)
    return (point_residual_covariance(pose.R, corr, dx),
            line_residual_covariance(pose.R, corr, (dp, dq)))


def _positive_depths(z: np.ndarray, fallback: float | None) -> np.ndarray:
    z = np.asarray(z, float).copy()
    bad = ~(z > 0)
    if np.any(bad):
        good = z[~bad]
        fill = fallback if fallback is not None else (good.mean() if good.size else 1.0)
        z[bad] = fill
    return z


# ----------------------------------------------------------------------------
# gold-standard residuals


def gold_point_residual(pose: Pose, obs) -> np.ndarray:
    """Reprojection residual ``u - pi(R x + t)``."""
    x, u = _xu(obs)
    return u - project(x @ pose.R.T + pose.t)


def gold_point_covariance(pose: Pose, obs) -> np.ndarray:
    """``Su + J R Sx R^T J^T`` with ``J`` the projection Jacobian at ``R x + t``."""
    x, Sx, _, Su = _point_fields(obs)
    J = projection_jacobian(x @ pose.R.T + pose.t)
    JR = J @ pose.R
    return Su + JR @ Sx @ np.swapaxes(JR, -1, -2)


def gold_line_residual(pose: Pose, obs) -> np.ndarray:
    """``(l . [pi(p_hat), 1], l . [pi(q_hat), 1])``."""
    p, q, l = _pql(obs)
    pp = project(p @ pose.R.T + pose.t)
    pq = project(q @ pose.R.T + pose.t)
    rp = np.sum(l[..., :2] * pp, -1) + l[..., 2]
    rq = np.sum(l[..., :2] * pq, -1) + l[..., 2]
    return np.stack([rp, rq], axis=-1)


def gold_line_covariance(pose: Pose, obs) -> np.ndarray:
    """``sl2 I + diag(l^T Sp_pi l, l^T Sq_pi l)`` with projected 3D covariances."""
    p, q, Sp, Sq, l, sl2 = _line_fields(obs)
    l2 = l[..., :2]

    def proj_var(X, S):
        g = np.einsum("...i,...ij->...j", l2, projection_jacobian(X @ pose.R.T + pose.t) @ pose.R)
        return np.einsum("...i,...ij,...j->...", g, S, g)

    vp = sl2 + proj_var(p, Sp)
    vq = sl2 + proj_var(q, Sq)
    out = np.zeros(np.shape(vp) + (2, 2))
    out[..., 0, 0] = vp
    out[..., 1, 1] = vq
    return out


def standard_point_covariance(obs) -> np.ndarray:
    return _point_fields(obs)[3]


def standard_line_covariance(obs) -> np.ndarray:
    sl2 = np.asarray(_line_fields(obs)[5], float)
    return sl2[..., None, None] * np.eye(2)
