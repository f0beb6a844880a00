"""JSON problem, result and track files.

All validation errors raise :class:`SchemaError` carrying the path of the
offending field, e.g. ``points[3].cov_x``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Pose
from .residuals import Correspondences

PSD_TOL = 1e-12


class SchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _vec(obj, path, n):
    try:
        a = np.asarray(obj, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(path, f"expected {n} numbers") from None
    if a.shape != (n,):
        raise SchemaError(path, f"expected {n} numbers, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SchemaError(path, "non-finite value")
    return a


def _cov(obj, path, n):
    try:
        a = np.asarray(obj, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(path, f"expected a {n}x{n} matrix") from None
    if a.shape != (n, n):
        raise SchemaError(path, f"expected a {n}x{n} matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SchemaError(path, "non-finite value")
    scale = max(np.abs(a).max(), 1e-300)
    if np.abs(a - a.T).max() > 1e-9 * scale:
        raise SchemaError(path, "covariance is not symmetric")
    if np.linalg.eigvalsh(0.5 * (a + a.T))[0] < -PSD_TOL * scale:
        raise SchemaError(path, "covariance is not positive semidefinite")
    return 0.5 * (a + a.T)


def _scalar(obj, path, positive=False, nonneg=False):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise SchemaError(path, "expected a number")
    v = float(obj)
    if not np.isfinite(v):
        raise SchemaError(path, "non-finite value")
    if positive and v <= 0:
        raise SchemaError(path, "must be positive")
    if nonneg and v < 0:
        raise SchemaError(path, "must be non-negative")
    return v


def _rotation(obj, path):
    a = np.asarray(obj, dtype=float)
    if a.size != 9:
        raise SchemaError(path, "rotation needs 9 numbers (row-major) or a 3x3 matrix")
    R = a.reshape(3, 3)
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) <= 0:
        raise SchemaError(path, "not a rotation matrix")
    return R


def parse_pose(obj, path="pose") -> Pose:
    if not isinstance(obj, dict) or "R" not in obj or "t" not in obj:
        raise SchemaError(path, "expected an object with R and t")
    return Pose(_rotation(obj["R"], f"{path}.R"), _vec(obj["t"], f"{path}.t", 3))


def pose_to_json(pose: Pose) -> dict:
    return {"R": [float(v) for v in pose.R.reshape(-1)], "t": [float(v) for v in pose.t]}


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 1.0
    fy: float = 1.0
    cx: float = 0.0
    cy: float = 0.0

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def normalize_point(self, u, cov):
        D = np.diag([1 / self.fx, 1 / self.fy])
        return (np.asarray(u) - [self.cx, self.cy]) / [self.fx, self.fy], D @ cov @ D

    def normalize_line(self, l, sigma_l2):
        """Pixel line (any scale) and its point-to-line variance in px^2 -> normalized line and variance."""
        l = np.asarray(l, float) / np.linalg.norm(l[:2])
        ln = self.K.T @ l
        c = np.linalg.norm(ln[:2])
        return ln / c, sigma_l2 / c**2


def parse_intrinsics(obj, path="intrinsics") -> Intrinsics:
    if obj is None:
        return Intrinsics()
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    kw = {}
    for k in ("fx", "fy", "cx", "cy"):
        if k in obj:
            kw[k] = _scalar(obj[k], f"{path}.{k}", positive=k in ("fx", "fy"))
    return Intrinsics(**kw)


@dataclass
class Problem:
    corr: Correspondences
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    pose_hypothesis: Pose | None = None
    d_bar: float | None = None
    ground_truth: Pose | None = None


def parse_problem(doc: dict) -> Problem:
    """Validate a problem document and normalize it to unit focal length."""
    if not isinstance(doc, dict):
        raise SchemaError("$", "expected a JSON object")
    K = parse_intrinsics(doc.get("intrinsics"))
    pts = doc.get("points", [])
    lns = doc.get("lines", [])
    if not isinstance(pts, list):
        raise SchemaError("points", "expected a list")
    if not isinstance(lns, list):
        raise SchemaError("lines", "expected a list")
    X, Sx, U, Su = [], [], [], []
    for i, p in enumerate(pts):
        base = f"points[{i}]"
        if not isinstance(p, dict):
            raise SchemaError(base, "expected an object")
        for k in ("x", "u"):
            if k not in p:
                raise SchemaError(f"{base}.{k}", "missing")
        X.append(_vec(p["x"], f"{base}.x", 3))
        Sx.append(_cov(p.get("cov_x", np.zeros((3, 3))), f"{base}.cov_x", 3))
        u, c = K.normalize_point(_vec(p["u"], f"{base}.u", 2), _cov(p.get("cov_u", np.eye(2)), f"{base}.cov_u", 2))
        U.append(u)
        Su.append(c)
    P, Q, Sp, Sq, L, sl2 = [], [], [], [], [], []
    for i, ln in enumerate(lns):
        base = f"lines[{i}]"
        if not isinstance(ln, dict):
            raise SchemaError(base, "expected an object")
        for k in ("p", "q", "l"):
            if k not in ln:
                raise SchemaError(f"{base}.{k}", "missing")
        P.append(_vec(ln["p"], f"{base}.p", 3))
        Q.append(_vec(ln["q"], f"{base}.q", 3))
        Sp.append(_cov(ln.get("cov_p", np.zeros((3, 3))), f"{base}.cov_p", 3))
        Sq.append(_cov(ln.get("cov_q", np.zeros((3, 3))), f"{base}.cov_q", 3))
        l = _vec(ln["l"], f"{base}.l", 3)
        if np.linalg.norm(l[:2]) == 0:
            raise SchemaError(f"{base}.l", "line normal is zero")
        s = _scalar(ln.get("sigma_l2", 1.0), f"{base}.sigma_l2", nonneg=True)
        l, s = K.normalize_line(l, s)
        L.append(l)
        sl2.append(s)
    if len(X) + len(P) == 0:
        raise SchemaError("points", "problem has no features")
    corr = Correspondences(np.reshape(X, (-1, 3)), np.reshape(Sx, (-1, 3, 3)), np.reshape(U, (-1, 2)),
                           np.reshape(Su, (-1, 2, 2)), np.reshape(P, (-1, 3)), np.reshape(Q, (-1, 3)),
                           np.reshape(Sp, (-1, 3, 3)), np.reshape(Sq, (-1, 3, 3)),
                           np.reshape(L, (-1, 3)), np.asarray(sl2, float))
    hyp = parse_pose(doc["pose_hypothesis"], "pose_hypothesis") if doc.get("pose_hypothesis") else None
    gt = parse_pose(doc["ground_truth"], "ground_truth") if doc.get("ground_truth") else None
    d_bar = _scalar(doc["d_bar"], "d_bar", positive=True) if doc.get("d_bar") is not None else None
    return Problem(corr, K, hyp, d_bar, gt)


def load_problem(path) -> Problem:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from None
    return parse_problem(doc)


def problem_to_json(corr: Correspondences, ground_truth: Pose | None = None,
                    d_bar: float | None = None, pose_hypothesis: Pose | None = None) -> dict:
    """Problem document in normalized coordinates (no intrinsics block)."""
    doc = {
        "points": [{"x": x.tolist(), "cov_x": sx.tolist(), "u": u.tolist(), "cov_u": su.tolist()}
                   for x, sx, u, su in zip(corr.X, corr.Sx, corr.U, corr.Su)],
        "lines": [{"p": p.tolist(), "q": q.tolist(), "cov_p": sp.tolist(), "cov_q": sq.tolist(),
                   "l": l.tolist(), "sigma_l2": float(s)}
                  for p, q, sp, sq, l, s in zip(corr.P, corr.Q, corr.Sp, corr.Sq, corr.L, corr.sl2)],
    }
    if ground_truth is not None:
        doc["ground_truth"] = pose_to_json(ground_truth)
    if d_bar is not None:
        doc["d_bar"] = float(d_bar)
    if pose_hypothesis is not None:
        doc["pose_hypothesis"] = pose_to_json(pose_hypothesis)
    return doc


@dataclass
class ResultFile:
    R: list
    t: list
    inliers: list
    line_inliers: list
    timings: dict
    flags: dict
    method: str
    config: dict

    @property
    def pose(self) -> Pose:
        return Pose(np.reshape(self.R, (3, 3)), np.asarray(self.t))

    def to_json(self) -> str:
        doc = asdict(self)
        doc["pose"] = {"R": doc.pop("R"), "t": doc.pop("t")}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ResultFile":
        doc = json.loads(text)
        try:
            pose = doc.pop("pose")
            return cls(R=pose["R"], t=pose["t"], **doc)
        except (KeyError, TypeError) as exc:
            raise SchemaError("$", f"malformed result file: {exc}") from None


def parse_tracks(doc: dict) -> tuple[Intrinsics, list[dict]]:
    """Validate a multi-view track document.

    Point tracks: ``{"type": "point", "views": [{"pose", "u", "cov_u"}, ...]}``.
    Line tracks: ``{"type": "line", "views": [{"pose", "endpoints", "endpoint_covs"},
    {"pose", "l", "sigma_l2"}, ...]}``; the first view carries the endpoint
    detections, later views the image line.
    """
    if not isinstance(doc, dict) or not isinstance(doc.get("tracks"), list):
        raise SchemaError("tracks", "expected a list of tracks")
    K = parse_intrinsics(doc.get("intrinsics"))
    out = []
    for i, tr in enumerate(doc["tracks"]):
        base = f"tracks[{i}]"
        kind = tr.get("type", "point") if isinstance(tr, dict) else None
        views = tr.get("views") if isinstance(tr, dict) else None
        if kind not in ("point", "line") or not isinstance(views, list) or len(views) < 2:
            raise SchemaError(base, "expected type point|line and at least two views")
        poses = [parse_pose(v.get("pose"), f"{base}.views[{j}].pose") for j, v in enumerate(views)]
        if kind == "point":
            us, covs = [], []
            for j, v in enumerate(views):
                u, c = K.normalize_point(_vec(v.get("u"), f"{base}.views[{j}].u", 2),
                                         _cov(v.get("cov_u", np.eye(2)), f"{base}.views[{j}].cov_u", 2))
                us.append(u)
                covs.append(c)
            out.append({"type": "point", "poses": poses, "detections": us, "covariances": covs})
        else:
            v0 = views[0]
            ends, ecovs = [], []
            for k in range(2):
                e = np.asarray(v0.get("endpoints", [None, None])[k] if isinstance(v0.get("endpoints"), list) else None)
                u, c = K.normalize_point(_vec(e, f"{base}.views[0].endpoints[{k}]", 2),
                                         _cov(np.asarray(v0.get("endpoint_covs", [np.eye(2)] * 2))[k],
                                              f"{base}.views[0].endpoint_covs[{k}]", 2))
                ends.append(u)
                ecovs.append(c)
            lines, lvars = [], []
            for j, v in enumerate(views[1:], start=1):
                l, s = K.normalize_line(_vec(v.get("l"), f"{base}.views[{j}].l", 3),
                                        _scalar(v.get("sigma_l2", 1.0), f"{base}.views[{j}].sigma_l2", nonneg=True))
                lines.append(l)
                lvars.append(s)
            out.append({"type": "line", "poses": poses, "endpoints": ends, "endpoint_covs": ecovs,
                        "lines": lines, "line_vars": lvars})
    return K, out
