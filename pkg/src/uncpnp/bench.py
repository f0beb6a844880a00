"""Synthetic scene generation, error metrics and the Monte Carlo driver."""
from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import PnPError
from .geometry import Pose, random_rotation
from .residuals import Correspondences
from .robust import RansacConfig, p3p, run_pipeline, solve

NOISE_MODES = ("none", "2d", "3d", "lines")
CSV_FIELDS = ["method", "n_points", "n_lines", "noise_mode", "trial",
              "e_rot_deg", "e_trans_pct", "time_ms", "flags"]


@dataclass(frozen=True)
class SceneSpec:
    """Scene layout in camera coordinates; pixel quantities are converted with ``focal``."""

    n_points: int = 20
    n_lines: int = 0
    box: tuple = ((-2.0, 2.0), (-2.0, 2.0), (4.0, 8.0))
    image_size: tuple = (640, 480)
    focal: float = 800.0
    endpoint_shift_frac: float = 0.10

    def __post_init__(self):
        if self.n_points < 0 or self.n_lines < 0:
            raise ValueError("feature counts must be non-negative")
        if self.box[2][0] <= 0 or self.box[2][1] <= self.box[2][0]:
            raise ValueError("box depth range must be positive and increasing")

    @property
    def mid_depth(self) -> float:
        return 0.5 * (self.box[2][0] + self.box[2][1])


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-subset noise levels; ``sigma2d_range`` is in pixels.

    Feature ``i`` of ``n`` belongs to subset ``i * n_subsets // n`` and gets
    the matching rung of each linear schedule.
    """

    n_subsets: int = 10
    sigma3d_range: tuple = (0.05, 0.5)
    sigma2d_range: tuple = (1.0, 10.0)
    noise_2d: bool = True
    noise_3d: bool = True
    anisotropic: bool = True

    def __post_init__(self):
        for lo, hi in (self.sigma3d_range, self.sigma2d_range):
            if not 0 < lo <= hi:
                raise ValueError("noise ranges must be positive and non-decreasing")
        if self.n_subsets < 1:
            raise ValueError("n_subsets must be positive")

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "NoiseSchedule":
        if mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {mode!r}")
        return cls(noise_2d=mode != "none", noise_3d=mode in ("3d", "lines"), **kw)

    def levels(self, n: int, which: str) -> np.ndarray:
        lo, hi = self.sigma3d_range if which == "3d" else self.sigma2d_range
        rungs = np.linspace(lo, hi, self.n_subsets)
        return rungs[subset_index(n, self.n_subsets)]


def subset_index(n: int, n_subsets: int) -> np.ndarray:
    return np.arange(n) * n_subsets // max(n, 1)


@dataclass
class Trial:
    pose: Pose
    corr: Correspondences
    d_bar: float
    spec: SceneSpec
    schedule: NoiseSchedule


@dataclass
class TrialResult:
    method: str
    e_rot: float
    e_trans: float
    time_ms: float
    flags: str = ""


def anisotropic_covariances(rng: np.random.Generator, sigmas: np.ndarray, dim: int,
                            anisotropic: bool = True) -> np.ndarray:
    """Random-orientation covariances with principal std devs ``{s, s1, s2}``, ``s_i ~ U(0, s]``."""
    sigmas = np.asarray(sigmas, float)
    n = len(sigmas)
    out = np.zeros((n, dim, dim))
    for i, s in enumerate(sigmas):
        if not anisotropic:
            out[i] = s * s * np.eye(dim)
            continue
        # U(0, s]: 1 - U[0, 1) lies in (0, 1]
        d = np.concatenate([[s], s * (1.0 - rng.random(dim - 1))])
        if dim == 3:
            V = random_rotation(rng)
        else:
            a = rng.uniform(0, 2 * np.pi)
            V = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        out[i] = (V * d**2) @ V.T
    return out


def sample_gaussian(rng: np.random.Generator, covs: np.ndarray) -> np.ndarray:
    """One zero-mean draw per covariance in a stack (covariances may be singular)."""
    covs = np.asarray(covs, float)
    w, V = np.linalg.eigh(covs)
    z = rng.standard_normal(covs.shape[:-1])
    return np.einsum("nij,nj->ni", V, np.sqrt(np.clip(w, 0, None)) * z)


def _box_points(rng, box, n):
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return lo + (hi - lo) * rng.random((n, 3))


def generate_trial(spec: SceneSpec, schedule: NoiseSchedule, seed, noise_seed=None) -> Trial:
    """Draw a random scene, pose, and noisy observations with their true covariances.

    The structure (points, pose, covariances) depends only on ``seed``; the
    noise realization depends on ``noise_seed`` (defaults to one derived
    from ``seed``), so repeated noise draws over a fixed scene are possible.

    Camera-frame points are uniform in ``spec.box``. The rotation is uniform
    on SO(3) and the translation is the camera-frame centroid, so the world
    frame sits at the scene centre. 2D noise is drawn in pixels and divided
    by the focal length; covariances are scaled by ``1 / f^2`` accordingly.
    For lines, the 2D line passes through the noisy projections of two
    box points, while the 3D endpoints handed to the solver are slid along
    the 3D line by a Gaussian shift of ``endpoint_shift_frac`` times the
    segment length and then perturbed by 3D noise.
    """
    srng = np.random.default_rng(_seed_seq(seed, 0))
    nrng = np.random.default_rng(_seed_seq(seed, 1) if noise_seed is None else noise_seed)
    n, m, f = spec.n_points, spec.n_lines, spec.focal

    Xc = _box_points(srng, spec.box, n)
    A = _box_points(srng, spec.box, m)
    B = _box_points(srng, spec.box, m)
    R = random_rotation(srng)
    t = Xc.mean(axis=0) if n else np.concatenate([A, B]).mean(axis=0)
    pose = Pose(R, t)
    to_world = lambda Y: (Y - t) @ R  # noqa: E731

    s3 = schedule.levels(n, "3d") if schedule.noise_3d else np.zeros(n)
    s2 = schedule.levels(n, "2d") / f if schedule.noise_2d else np.zeros(n)
    Sx = anisotropic_covariances(srng, s3, 3, schedule.anisotropic)
    Su = anisotropic_covariances(srng, s2, 2, schedule.anisotropic)
    ls3 = schedule.levels(m, "3d") if schedule.noise_3d else np.zeros(m)
    ls2 = schedule.levels(m, "2d") / f if schedule.noise_2d else np.zeros(m)
    Sp = anisotropic_covariances(srng, ls3, 3, schedule.anisotropic)
    Sq = anisotropic_covariances(srng, ls3, 3, schedule.anisotropic)
    Sa = anisotropic_covariances(srng, ls2, 2, schedule.anisotropic)
    Sb = anisotropic_covariances(srng, ls2, 2, schedule.anisotropic)
    shift = srng.standard_normal((m, 2)) * spec.endpoint_shift_frac

    X = to_world(Xc) + sample_gaussian(nrng, Sx)
    U = Xc[:, :2] / Xc[:, 2:3] + sample_gaussian(nrng, Su)

    d = B - A
    Pc = A + shift[:, :1] * d
    Qc = B + shift[:, 1:] * d
    P = to_world(Pc) + sample_gaussian(nrng, Sp)
    Q = to_world(Qc) + sample_gaussian(nrng, Sq)
    a = A[:, :2] / A[:, 2:3] + sample_gaussian(nrng, Sa)
    b = B[:, :2] / B[:, 2:3] + sample_gaussian(nrng, Sb)
    L = np.cross(np.c_[a, np.ones(m)], np.c_[b, np.ones(m)])
    L = L / np.linalg.norm(L[:, :2], axis=1, keepdims=True)
    nrm = L[:, :2]
    sl2 = 0.5 * (np.einsum("ni,nij,nj->n", nrm, Sa, nrm) + np.einsum("ni,nij,nj->n", nrm, Sb, nrm))

    corr = Correspondences(X, Sx, U, Su, P, Q, Sp, Sq, L, sl2)
    return Trial(pose, corr, spec.mid_depth, spec, schedule)


def with_outliers(trial: Trial, n_outliers: int, seed) -> tuple[Trial, np.ndarray]:
    """Append gross point outliers: box points paired with unrelated pixels inside the image.

    Outliers copy the covariances of randomly chosen inliers so that their
    weights look plausible. Returns the new trial and the true-inlier mask.
    """
    rng = np.random.default_rng(_seed_seq(seed, 2))
    spec, c = trial.spec, trial.corr
    Xc = _box_points(rng, spec.box, n_outliers)
    Xo = (Xc - trial.pose.t) @ trial.pose.R
    w, h = spec.image_size
    Uo = (rng.random((n_outliers, 2)) * [w, h] - [w / 2, h / 2]) / spec.focal
    pick = rng.integers(0, max(c.n_points, 1), n_outliers)
    corr = Correspondences(np.r_[c.X, Xo], np.r_[c.Sx, c.Sx[pick]], np.r_[c.U, Uo], np.r_[c.Su, c.Su[pick]],
                           c.P, c.Q, c.Sp, c.Sq, c.L, c.sl2)
    mask = np.r_[np.ones(c.n_points, bool), np.zeros(n_outliers, bool)]
    return Trial(trial.pose, corr, trial.d_bar, spec, trial.schedule), mask


def _seed_seq(seed, stream: int):
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + [stream]


# ----------------------------------------------------------------------------
# metrics


def rotation_error(R_true: np.ndarray, R: np.ndarray) -> float:
    """Angle of ``R_true^T R`` in degrees, with the arccos argument clamped."""
    c = np.clip(0.5 * (np.trace(R_true.T @ R) - 1.0), -1.0, 1.0)
    e = abs(np.degrees(np.arccos(c)))
    if e < 1e-3:
        # arccos loses half the digits near zero; use the sine of the angle
        M = R_true.T @ R
        v = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
        e = np.degrees(np.arctan2(0.5 * np.linalg.norm(v), 0.5 * (np.trace(M) - 1.0)))
    return float(e)


def translation_error(t_true: np.ndarray, t: np.ndarray) -> float:
    return float(np.linalg.norm(t_true - t) / np.linalg.norm(t_true) * 100.0)


# ----------------------------------------------------------------------------
# methods

POINT_METHODS = ("epnp", "epnpu", "epnpu*", "dls", "dlsu", "dlsu*")
LINE_METHODS = ("epnpl", "epnplu", "epnplu*", "dlsl", "dlslu", "dlslu*")
PIPELINE_PREFIX = "ransac+"


def p3p_hypothesis(corr: Correspondences, rng: np.random.Generator) -> Pose:
    """Rough pose from P3P on random triples, picking the candidate that best explains the rest."""
    n = corr.n_points
    for _ in range(20):
        idx = rng.choice(n, 3, replace=False)
        try:
            cands = p3p(corr.X[idx], corr.U[idx])
        except PnPError:
            continue
        if cands:
            return min(cands, key=lambda p: _reproj_error(p, corr))
    raise PnPError("no P3P hypothesis")


def _reproj_error(pose, corr):
    xh = pose.transform(corr.X)
    z = xh[:, 2]
    if np.any(z <= 0):
        return np.inf
    return float(np.median(np.linalg.norm(xh[:, :2] / z[:, None] - corr.U, axis=1)))


def run_method(method: str, trial: Trial, rng: np.random.Generator) -> Pose:
    """Estimate the pose of ``trial`` with a named method.

    Names: the solvers accepted by :func:`uncpnp.robust.solve`, ``p3p`` (the
    rough hypothesis alone), or ``ransac+<solver>[+<regime>]`` for the full
    pipeline.
    """
    corr = trial.corr
    if method.startswith(PIPELINE_PREFIX):
        parts = method[len(PIPELINE_PREFIX):].split("+")
        regime = parts[1] if len(parts) > 1 else "none"
        cfg = RansacConfig(rng_seed=int(rng.integers(2**63)))
        return run_pipeline(corr, parts[0], regime, cfg, d_bar=trial.d_bar).pose
    if method == "p3p":
        return p3p_hypothesis(corr, rng)
    hyp = p3p_hypothesis(corr, rng) if method.endswith("*") else None
    return solve(method, corr, d_bar=trial.d_bar, pose_hypothesis=hyp)


def _run_cell(args):
    methods, n, mode, trial_idx, seed, cell, timing = args
    spec = SceneSpec(n_points=n, n_lines=n if mode == "lines" else 0)
    trial = generate_trial(spec, NoiseSchedule.for_mode(mode), [seed, cell, trial_idx])
    rows = []
    for k, method in enumerate(methods):
        rng = np.random.default_rng([seed, cell, trial_idx, 2, k])
        t0 = time.perf_counter()
        flags = ""
        try:
            pose = run_method(method, trial, rng)
            er = rotation_error(trial.pose.R, pose.R)
            et = translation_error(trial.pose.t, pose.t)
            if not (np.isfinite(er) and np.isfinite(et)):
                flags, er, et = "nonfinite", np.nan, np.nan
        except (PnPError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            flags, er, et = f"failed:{type(exc).__name__}", np.nan, np.nan
        dt = 1e3 * (time.perf_counter() - t0)
        rows.append({"method": method, "n_points": spec.n_points, "n_lines": spec.n_lines,
                     "noise_mode": mode, "trial": trial_idx, "e_rot_deg": er,
                     "e_trans_pct": et, "time_ms": dt if timing else "", "flags": flags})
    return rows


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("UNCPNP_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


@dataclass
class BenchmarkTable:
    rows: list = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        """Mean and median errors per (method, cell); failed trials excluded and counted."""
        cells: dict = {}
        for r in self.rows:
            cells.setdefault((r["method"], r["n_points"], r["n_lines"], r["noise_mode"]), []).append(r)
        out = []
        for (method, n, m, mode), rs in cells.items():
            ok = [r for r in rs if not r["flags"]]
            er = np.array([r["e_rot_deg"] for r in ok], float)
            et = np.array([r["e_trans_pct"] for r in ok], float)
            tm = [r["time_ms"] for r in ok if r["time_ms"] != ""]
            nan = float("nan")
            out.append({"method": method, "n_points": n, "n_lines": m, "noise_mode": mode,
                        "trials": len(rs), "failed": len(rs) - len(ok),
                        "mean_e_rot_deg": er.mean() if len(ok) else nan,
                        "median_e_rot_deg": np.median(er) if len(ok) else nan,
                        "mean_e_trans_pct": et.mean() if len(ok) else nan,
                        "median_e_trans_pct": np.median(et) if len(ok) else nan,
                        "mean_time_ms": float(np.mean(tm)) if tm else ""})
        return out

    def cell(self, method: str, n_points: int) -> dict:
        for a in self.aggregate():
            if a["method"] == method and a["n_points"] == n_points:
                return a
        raise KeyError((method, n_points))

    def to_csv(self) -> str:
        return _csv(self.rows, CSV_FIELDS)

    def aggregate_csv(self) -> str:
        agg = self.aggregate()
        return _csv(agg, list(agg[0].keys()) if agg else [])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _csv(rows, fields):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in fields})
    return buf.getvalue()


def run_benchmark(methods, n_values=range(10, 111, 10), trials: int = 50, seed: int = 0,
                  mode: str = "3d", workers: int | None = None, timing: bool = False) -> BenchmarkTable:
    """Monte Carlo sweep over scene sizes.

    Every (cell, trial) draws its scene from ``(seed, cell, trial)`` and every
    method its own stream, so results do not depend on the worker count.
    Wall time is recorded only when ``timing`` is set, which keeps the
    table byte-identical across runs.
    """
    methods = list(methods)
    if not methods:
        raise ValueError("at least one method is required")
    if mode not in NOISE_MODES:
        raise ValueError(f"unknown noise mode {mode!r}")
    jobs = [(methods, int(n), mode, k, seed, c, timing)
            for c, n in enumerate(n_values) for k in range(trials)]
    nw = min(worker_count(workers), len(jobs)) if jobs else 1
    if nw > 1:
        with ProcessPoolExecutor(max_workers=nw) as ex:
            results = list(ex.map(_run_cell, jobs, chunksize=max(1, len(jobs) // (4 * nw))))
    else:
        results = [_run_cell(j) for j in jobs]
    return BenchmarkTable([r for rows in results for r in rows])
