"""Feature covariances: detector pyramid levels and triangulation propagation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBaseline, LevelOutOfRange, NoConvergence
from .geometry import Pose, project, projection_jacobian
from .residuals import regularize

MIN_TRIANGULATION_ANGLE = 1e-4
MAX_GN_ITERS = 50


@dataclass(frozen=True)
class PyramidDetectorSpec:
    kappa: float = 1.2
    n_levels: int = 8
    epsilon: float = 1.0

    def __post_init__(self):
        if not self.kappa > 1.0:
            raise ValueError("kappa must exceed 1")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be positive")
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")


def pyramid_covariance(spec: PyramidDetectorSpec, level: int) -> tuple[np.ndarray, float]:
    """Detection covariance at pyramid ``level`` (1-based).

    ``sigma_o = kappa**(o - 1) * epsilon``; returns ``(sigma_o^2 I, sigma_o^2)``
    for point and line detections respectively.
    """
    if not 1 <= level <= spec.n_levels:
        raise LevelOutOfRange(f"level {level} outside [1, {spec.n_levels}]")
    sigma2 = (spec.kappa ** (level - 1) * spec.epsilon) ** 2
    return sigma2 * np.eye(2), sigma2


def isotropic_approximation(Sigma: np.ndarray) -> float:
    """Scalar ``s`` minimizing ``||Sigma - s I||_F``, i.e. ``trace / 3``."""
    return float(np.trace(Sigma) / 3.0)


@dataclass
class TriangulationResult:
    X: np.ndarray
    cov: np.ndarray
    iterations: int
    condition: float


@dataclass
class SegmentTriangulation:
    p: np.ndarray
    q: np.ndarray
    Sigma_p: np.ndarray
    Sigma_q: np.ndarray
    cross_cov: np.ndarray
    iterations: int
    condition: float


def _center(pose: Pose) -> np.ndarray:
    return -pose.R.T @ pose.t


def _ray(pose: Pose, u: np.ndarray) -> np.ndarray:
    d = pose.R.T @ np.array([u[0], u[1], 1.0])
    return d / np.linalg.norm(d)


def _max_ray_angle(rays: list[np.ndarray]) -> float:
    best = 0.0
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            c = np.clip(abs(rays[i] @ rays[j]), -1.0, 1.0)
            best = max(best, float(np.arccos(c)))
    return best


def _midpoint(poses, detections) -> np.ndarray:
    """Least-squares point closest to all back-projected rays."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for pose, u in zip(poses, detections):
        c = _center(pose)
        d = _ray(pose, u)
        M = np.eye(3) - np.outer(d, d)
        A += M
        b += M @ c
    return np.linalg.solve(A, b)


def _gauss_newton(x0, residual_jac, n_iter=MAX_GN_ITERS, tol=1e-13):
    """Weighted GN where ``residual_jac(x)`` returns whitened (r, J)."""
    x = np.array(x0, dtype=float)
    for it in range(1, n_iter + 1):
        r, J = residual_jac(x)
        dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        x = x + dx
        if np.linalg.norm(dx) <= tol * max(1.0, np.linalg.norm(x)):
            return x, it
    raise NoConvergence(f"triangulation did not converge in {n_iter} iterations")


def triangulate_point_with_covariance(poses: list[Pose], detections, covariances) -> TriangulationResult:
    """Triangulate one point from ≥2 calibrated views and propagate uncertainty.

    The point minimizes the covariance-weighted reprojection error (Gauss-Newton
    from the midpoint solution); its covariance is the inverse information
    matrix ``(J^T Sigma^-1 J)^-1`` at convergence.

    Raises:
        DegenerateBaseline: if the widest angle between rays is below 1e-4 rad.
        NoConvergence: after 50 Gauss-Newton iterations.
    """
    if len(poses) < 2:
        raise DegenerateBaseline("need at least two views")
    detections = [np.asarray(u, float) for u in detections]
    rays = [_ray(P, u) for P, u in zip(poses, detections)]
    if _max_ray_angle(rays) < MIN_TRIANGULATION_ANGLE:
        raise DegenerateBaseline("rays are (near) parallel")
    Ws = [np.linalg.cholesky(np.linalg.inv(regularize(np.asarray(S, float)))).T for S in covariances]

    def rj(X):
        rs, Js = [], []
        for P, u, W in zip(poses, detections, Ws):
            xc = P.transform(X)
            rs.append(W @ (project(xc) - u))
            Js.append(W @ projection_jacobian(xc) @ P.R)
        return np.concatenate(rs), np.vstack(Js)

    X, iters = _gauss_newton(_midpoint(poses, detections), rj)
    _, J = rj(X)
    info = J.T @ J
    cov = np.linalg.inv(info)
    return TriangulationResult(X, 0.5 * (cov + cov.T), iters, float(np.linalg.cond(info)))


def _plane_of_line(pose: Pose, l: np.ndarray) -> tuple[np.ndarray, float]:
    """World plane ``n.X + d = 0`` back-projecting image line ``l``."""
    n = pose.R.T @ l
    return n, float(l @ pose.t)


def triangulate_line_with_covariance(poses: list[Pose], endpoints, endpoint_covs,
                                     lines, line_vars) -> SegmentTriangulation:
    """Triangulate a 3D segment's endpoints with propagated covariances.

    The first view observes the two segment endpoints as points (reprojection
    residuals); every other view observes only the infinite image line
    (point-to-line residuals of both projected endpoints).

    Args:
        poses: camera poses, first one being the endpoint view.
        endpoints: the two endpoint detections in view 1, shape (2, 2).
        endpoint_covs: their 2x2 covariances, shape (2, 2, 2).
        lines: normalized line coefficients for views 2.., shape (k-1, 3).
        line_vars: line detection variances for views 2.., shape (k-1,).

    Returns:
        endpoints, their 3x3 covariances (diagonal blocks of the 6x6 inverse
        information matrix), and the discarded cross-covariance block.
    """
    if len(poses) < 2:
        raise DegenerateBaseline("need at least two views")
    a, b = (np.asarray(e, float) for e in endpoints)
    lines = [np.asarray(l, float) for l in lines]
    P1 = poses[0]
    c1 = _center(P1)
    Xs = []
    for e in (a, b):
        d = _ray(P1, e)
        n, dd = _plane_of_line(poses[1], lines[0])
        denom = n @ d
        if abs(denom) < 1e-12 * np.linalg.norm(n):
            raise DegenerateBaseline("endpoint ray parallel to the line's back-projected plane")
        Xs.append(c1 - (n @ c1 + dd) / denom * d)
        if np.arccos(np.clip(abs(denom) / np.linalg.norm(n), 0, 1)) > np.pi / 2 - MIN_TRIANGULATION_ANGLE:
            raise DegenerateBaseline("segment lies in an epipolar plane")
    W_end = [np.linalg.cholesky(np.linalg.inv(regularize(np.asarray(S, float)))).T for S in endpoint_covs]
    w_line = [1.0 / np.sqrt(max(float(v), 1e-300)) for v in line_vars]

    def rj(z):
        p, q = z[:3], z[3:]
        rs, Js = [], []
        for k, (X, e, W) in enumerate(zip((p, q), (a, b), W_end)):
            xc = P1.transform(X)
            rs.append(W @ (project(xc) - e))
            Jk = np.zeros((2, 6))
            Jk[:, 3 * k:3 * k + 3] = W @ projection_jacobian(xc) @ P1.R
            Js.append(Jk)
        for P, l, w in zip(poses[1:], lines, w_line):
            for k, X in enumerate((p, q)):
                xc = P.transform(X)
                rs.append(np.atleast_1d(w * (l[:2] @ project(xc) + l[2])))
                Jk = np.zeros((1, 6))
                Jk[0, 3 * k:3 * k + 3] = w * l[:2] @ projection_jacobian(xc) @ P.R
                Js.append(Jk)
        return np.concatenate(rs), np.vstack(Js)

    z, iters = _gauss_newton(np.concatenate(Xs), rj)
    _, J = rj(z)
    info = J.T @ J
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return SegmentTriangulation(z[:3], z[3:], cov[:3, :3], cov[3:, 3:], cov[:3, 3:],
                                iters, float(np.linalg.cond(info)))
