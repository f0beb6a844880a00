"""Rigid transforms, Cayley rotation parameters and pinhole projection.

All image quantities live in normalized coordinates (calibration K = I).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DepthZero, Singular180

DEPTH_EPS = 1e-12


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]_x`` so that ``skew(a) @ b == cross(a, b)``.

    Accepts a single 3-vector or a stack of shape (..., 3).
    """
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform, ``x_cam = R @ x_world + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Map world points of shape (3,) or (n, 3) into the camera frame."""
        return np.asarray(x, dtype=float) @ self.R.T + self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def is_valid(self, tol: float = 1e-9) -> bool:
        ortho = np.linalg.norm(self.R.T @ self.R - np.eye(3))
        return bool(ortho < tol and abs(np.linalg.det(self.R) - 1.0) < tol
                    and np.all(np.isfinite(self.t)))


def cayley_to_rotation(s: np.ndarray) -> np.ndarray:
    """Rotation matrix for Cayley parameters ``s``.

    ``R(s) = ((1 - s.s) I + 2 [s]_x + 2 s s^T) / (1 + s.s)``. Works on a single
    3-vector or on a stack (..., 3).
    """
    s = np.asarray(s, dtype=float)
    ss = np.sum(s * s, axis=-1)[..., None, None]
    outer = s[..., :, None] * s[..., None, :]
    R_bar = (1.0 - ss) * np.eye(3) + 2.0 * skew(s) + 2.0 * outer
    return R_bar / (1.0 + ss)


def rotation_to_cayley(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`cayley_to_rotation`.

    Raises:
        Singular180: if the rotation angle is 180 degrees (trace(R) = -1).
    """
    R = np.asarray(R, dtype=float)
    denom = np.trace(R) + 1.0
    if denom < 1e-9:
        raise Singular180(f"trace(R) + 1 = {denom:.3e}; Cayley parameters undefined")
    # s = axis * tan(angle / 2); the skew part of R equals 2 s / (1 + s.s) * ...,
    # which reduces to vee(R - R^T) / (1 + trace(R)).
    return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / denom


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    cos = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # near pi the skew part vanishes; take the axis from the symmetric part
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[k] / axis[k]
        axis /= np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def project(x_cam: np.ndarray) -> np.ndarray:
    """Perspective division of camera-frame points, shape (3,) or (n, 3).

    Raises:
        DepthZero: if any depth magnitude is below 1e-12.
    """
    x_cam = np.asarray(x_cam, dtype=float)
    z = x_cam[..., 2]
    if np.any(np.abs(z) < DEPTH_EPS):
        raise DepthZero("point on the principal plane")
    return x_cam[..., :2] / z[..., None]


def projection_jacobian(x_cam: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`project` w.r.t. the camera-frame point, (..., 2, 3)."""
    x_cam = np.asarray(x_cam, dtype=float)
    x, y, z = x_cam[..., 0], x_cam[..., 1], x_cam[..., 2]
    if np.any(np.abs(z) < DEPTH_EPS):
        raise DepthZero("point on the principal plane")
    J = np.zeros(x_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = 1.0 / z
    J[..., 1, 1] = 1.0 / z
    J[..., 0, 2] = -x / z**2
    J[..., 1, 2] = -y / z**2
    return J


def procrustes(world: np.ndarray, cam: np.ndarray, weights: np.ndarray | None = None) -> Pose:
    """Weighted least-squares rigid alignment ``cam ≈ R @ world + t``."""
    world = np.asarray(world, dtype=float)
    cam = np.asarray(cam, dtype=float)
    w = np.ones(len(world)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mw = w @ world
    mc = w @ cam
    H = (cam - mc).T @ ((world - mw) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return Pose(R, mc - R @ mw)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return quat_to_rotation(q)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation for a unit quaternion ``(x, y, z, w)``."""
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def super_fibonacci_rotations(n: int) -> np.ndarray:
    """Deterministic, quasi-uniform set of ``n`` rotations (super-Fibonacci spiral)."""
    phi = np.sqrt(2.0)
    psi = 1.533751168755204288118041
    i = np.arange(n) + 0.5
    r = np.sqrt(i / n)
    R = np.sqrt(1.0 - i / n)
    alpha = 2.0 * np.pi * i / phi
    beta = 2.0 * np.pi * i / psi
    quats = np.stack([r * np.sin(alpha), r * np.cos(alpha),
                      R * np.sin(beta), R * np.cos(beta)], axis=1)
    return np.array([quat_to_rotation(q) for q in quats])


def rotation_angle_deg(R: np.ndarray) -> float:
    """Rotation angle of ``R`` in degrees.

    Equal to ``acos((trace(R) - 1) / 2)`` but evaluated with ``atan2`` so that
    angles near zero keep full precision.
    """
    R = np.asarray(R, dtype=float)
    sin = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos = 0.5 * (np.trace(R) - 1.0)
    return float(np.degrees(np.arctan2(sin, cos)))
