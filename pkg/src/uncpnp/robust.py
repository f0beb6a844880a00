"""Minimal P3P solver, RANSAC with Mahalanobis gating, and the full pipeline."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dlsu import solve_dls, solve_dlsu
from .epnpu import solve_epnp, solve_epnpu
from .errors import DegenerateTriple, NoModelFound, PnPError
from .geometry import Pose, procrustes
from .refine import RefineConfig, refine
from .residuals import (Correspondences, gold_line_covariance, gold_line_residual,
                        gold_point_covariance, gold_point_residual, mahalanobis2)

CHI2_2_95 = 5.991
REFILTER_TAU2 = 36.0


def _bearing(u):
    b = np.array([u[0], u[1], 1.0])
    return b / np.linalg.norm(b)


def p3p(X: np.ndarray, U: np.ndarray) -> list[Pose]:
    """All poses consistent with three 2D-3D point correspondences.

    Grunert's formulation: the distance ratios along the three bearing rays
    satisfy a quartic; each real root gives the camera-frame points, and the
    pose follows by rigid alignment. Roots are polished with Newton steps on
    the three law-of-cosines equations.

    Raises:
        DegenerateTriple: collinear world points or coincident bearings.
    """
    X = np.asarray(X, float).reshape(3, 3)
    U = np.asarray(U, float).reshape(3, 2)
    x1, x2, x3 = X
    scale = max(np.linalg.norm(x2 - x1), np.linalg.norm(x3 - x1), 1e-300)
    if np.linalg.norm(np.cross(x2 - x1, x3 - x1)) < 1e-10 * scale**2:
        raise DegenerateTriple("world points are collinear")
    j = np.array([_bearing(u) for u in U])
    if min(np.linalg.norm(j[0] - j[1]), np.linalg.norm(j[0] - j[2]), np.linalg.norm(j[1] - j[2])) < 1e-12:
        raise DegenerateTriple("coincident bearings")
    a2 = np.sum((x2 - x3) ** 2)
    b2 = np.sum((x1 - x3) ** 2)
    c2 = np.sum((x1 - x2) ** 2)
    ca, cb, cg = j[1] @ j[2], j[0] @ j[2], j[0] @ j[1]
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca**2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
    A2 = 2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg**2
    roots = np.roots([A4, A3, A2, A1, A0])
    d = np.array([np.sqrt(a2), np.sqrt(b2), np.sqrt(c2)])  # opposite to points 1, 2, 3
    poses = []
    for v in roots:
        if abs(v.imag) > 1e-3 * max(1.0, abs(v)):
            continue
        v = v.real
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-14:
            continue
        u = ((-1 + amc) * v**2 - 2 * amc * cb * v + 1 + amc) / den
        q = 1 + v * v - 2 * v * cb
        if q <= 0:
            continue
        s1 = np.sqrt(b2 / q)
        lam = _polish_depths(np.array([s1, u * s1, v * s1]), j, d)
        if lam is None or np.any(lam <= 0):
            continue
        cam = lam[:, None] * j
        pose = procrustes(X, cam)
        xh = pose.transform(X)
        res = xh[:, :2] - U * xh[:, 2:3]
        if np.max(np.abs(res)) < 1e-8 * max(1.0, np.abs(xh).max()):
            if all(np.linalg.norm(pose.R - p.R) + np.linalg.norm(pose.t - p.t) > 1e-9 for p in poses):
                poses.append(pose)
    return poses


def _polish_depths(lam, j, d):
    """Newton on |l_i j_i - l_k j_k|^2 = d_ik^2 for the three point pairs."""
    pairs = [(1, 2, 0), (0, 2, 1), (0, 1, 2)]
    for _ in range(10):
        F = np.zeros(3)
        J = np.zeros((3, 3))
        for r, (i, k, di) in enumerate(pairs):
            diff = lam[i] * j[i] - lam[k] * j[k]
            F[r] = diff @ diff - d[di] ** 2
            J[r, i] = 2 * diff @ j[i]
            J[r, k] = -2 * diff @ j[k]
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        lam = lam + step
        if np.linalg.norm(step) < 1e-15 * np.linalg.norm(lam):
            break
    return lam if np.all(np.isfinite(lam)) else None


@dataclass
class RansacConfig:
    max_iters: int = 1000
    confidence: float = 0.99
    tau2: float = CHI2_2_95
    rng_seed: int = 0
    final_refit: bool = True
    refit_rounds: int = 3

    def __post_init__(self):
        if not self.tau2 > 0:
            raise ValueError("tau2 must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


def point_scores(pose: Pose, corr: Correspondences) -> np.ndarray:
    """Squared Mahalanobis reprojection error of every point (inf if behind)."""
    z = pose.transform(corr.X)[:, 2]
    out = np.full(corr.n_points, np.inf)
    ok = z > 1e-9
    if ok.any():
        sub = corr.subset(ok, np.zeros(corr.n_lines, bool))
        out[ok] = mahalanobis2(gold_point_residual(pose, sub), gold_point_covariance(pose, sub))
    return out


def line_scores(pose: Pose, corr: Correspondences) -> np.ndarray:
    zp = pose.transform(corr.P)[:, 2]
    zq = pose.transform(corr.Q)[:, 2]
    out = np.full(corr.n_lines, np.inf)
    ok = (zp > 1e-9) & (zq > 1e-9)
    if ok.any():
        sub = corr.subset(np.zeros(corr.n_points, bool), ok)
        out[ok] = mahalanobis2(gold_line_residual(pose, sub), gold_line_covariance(pose, sub))
    return out


def gate(pose: Pose, corr: Correspondences, tau2: float) -> tuple[np.ndarray, np.ndarray]:
    """Inlier masks for points and lines: weighted squared residual below ``tau2``."""
    return point_scores(pose, corr) < tau2, line_scores(pose, corr) < tau2


@dataclass
class RansacResult:
    pose: Pose
    inliers: np.ndarray
    score: float
    iterations: int


def ransac(corr: Correspondences, config: RansacConfig | None = None) -> RansacResult:
    """P3P-RANSAC over point correspondences.

    After sampling, the best hypothesis is re-estimated on its consensus set
    by weighted refinement and re-gated (``config.final_refit``).

    Hypotheses are ranked by inlier count, then by the summed weighted
    residual of the inliers, then by sample index. The number of iterations
    adapts to the best inlier ratio ``w`` as ``log(1 - p) / log(1 - w^3)``.

    Raises:
        NoModelFound: fewer than three points or no hypothesis at all.
    """
    cfg = config or RansacConfig()
    n = corr.n_points
    if n < 3:
        raise NoModelFound("RANSAC needs at least three points")
    rng = np.random.default_rng(cfg.rng_seed)
    best = None
    needed = cfg.max_iters
    it = 0
    while it < min(needed, cfg.max_iters):
        it += 1
        idx = rng.choice(n, 3, replace=False)
        try:
            cands = p3p(corr.X[idx], corr.U[idx])
        except DegenerateTriple:
            continue
        for pose in cands:
            sc = point_scores(pose, corr)
            inl = sc < cfg.tau2
            key = (-int(inl.sum()), float(sc[inl].sum()))
            if best is None or key < best[0]:
                best = (key, pose, inl)
        if best is not None:
            w = -best[0][0] / n
            if w >= 1.0:
                needed = it
            elif w > 0:
                needed = int(np.ceil(np.log(1 - cfg.confidence) / np.log(1 - w**3)))
    if best is None:
        raise NoModelFound("no P3P hypothesis found")
    key, pose, inl = best
    if cfg.final_refit:
        pose, inl, key = _consensus_refit(corr, pose, inl, key, cfg)
    return RansacResult(pose, inl, key[1], it)


def _consensus_refit(corr, pose, inl, key, cfg):
    """Re-estimate on the consensus set and re-gate; keep a round only if the key does not worsen."""
    for _ in range(cfg.refit_rounds):
        if inl.sum() < 3:
            break
        try:
            cand = refine(pose, corr.subset(inl, np.zeros(corr.n_lines, bool)),
                          RefineConfig(regime="iterative_uncertain")).pose
        except (PnPError, np.linalg.LinAlgError):
            break
        sc = point_scores(cand, corr)
        new_inl = sc < cfg.tau2
        new_key = (-int(new_inl.sum()), float(sc[new_inl].sum()))
        if new_key > key:
            break
        same = np.array_equal(new_inl, inl)
        pose, inl, key = cand, new_inl, new_key
        if same:
            break
    return pose, inl, key


# ----------------------------------------------------------------------------
# pipeline

SOLVERS = ("epnp", "epnpu", "dls", "dlsu", "p3p")
LINE_AWARE = ("epnplu", "dlslu", "epnpl", "dlsl")


_CORE = {"epnp": "epnp", "epnpl": "epnp", "epnpu": "epnpu", "epnplu": "epnpu",
         "dls": "dls", "dlsl": "dls", "dlsu": "dlsu", "dlslu": "dlsu", "p3p": "p3p"}


def _solver_fn(name: str) -> tuple[str, bool]:
    """Core solver name and whether it consumes lines."""
    base = name.rstrip("*")
    if base not in _CORE:
        raise ValueError(f"unknown solver {name!r}")
    return _CORE[base], base in LINE_AWARE


def solve(method: str, corr: Correspondences, d_bar: float | None = None,
          pose_hypothesis: Pose | None = None) -> Pose:
    """Run a named solver.

    ``method`` is one of epnp, epnpu, dls, dlsu and their line variants epnpl,
    epnplu, dlsl, dlslu; a trailing ``*`` requests the hypothesis-driven
    variant. Point-only names ignore any lines in ``corr``.
    """
    core, use_lines = _solver_fn(method)
    starred = method.endswith("*")
    c = corr if use_lines else corr.without_lines()
    hyp = pose_hypothesis if starred else None
    if starred and hyp is None:
        raise ValueError(f"{method} needs a pose hypothesis")
    if core == "epnp":
        return solve_epnp(c).pose
    if core == "dls":
        return solve_dls(c).pose
    if core == "epnpu":
        return solve_epnpu(c, d_bar=d_bar, pose_hypothesis=hyp).pose
    if core == "dlsu":
        return solve_dlsu(c, d_bar=d_bar, pose_hypothesis=hyp).pose
    raise ValueError(f"unknown solver {method!r}")


REFINE_ALIASES = {"none": None, "standard": "standard", "uncertain": "iterative_uncertain",
                  "iterative_uncertain": "iterative_uncertain", "full": "full_uncertain",
                  "full_uncertain": "full_uncertain"}


@dataclass
class PipelineResult:
    pose: Pose
    inliers: np.ndarray
    line_inliers: np.ndarray
    timings: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    ransac_pose: Pose | None = None
    solver_pose: Pose | None = None


def run_pipeline(corr: Correspondences, method: str = "epnpu", refine_regime: str = "uncertain",
                 config: RansacConfig | None = None, d_bar: float | None = None,
                 refilter_tau2: float = REFILTER_TAU2, refine_with_lines: bool = True,
                 solver_override: Callable | None = None,
                 pose_hypothesis: Pose | None = None) -> PipelineResult:
    """RANSAC -> solver on inliers -> inlier re-gating -> refinement.

    Starred solvers receive the RANSAC pose. If the solver raises or its pose
    keeps fewer than three inliers after re-gating at ``refilter_tau2``, the
    RANSAC pose and inliers are used instead and
    ``flags['solver_failed_fallback_to_ransac']`` is set. Lines never enter
    minimal samples and a point-only solver ignores them; gated lines enter
    refinement whenever ``refine_with_lines`` is true.

    Args:
        pose_hypothesis: hypothesis for starred solvers; the RANSAC pose is
            used when omitted.
        solver_override: test hook replacing the solver call, same signature
            as :func:`solve`.
    """
    cfg = config or RansacConfig()
    regime = REFINE_ALIASES[refine_regime]
    timings: dict = {}
    flags = {"solver_failed_fallback_to_ransac": False}

    t0 = time.perf_counter()
    rs = ransac(corr, cfg)
    timings["ransac_ms"] = 1e3 * (time.perf_counter() - t0)
    _, ln_in = gate(rs.pose, corr, cfg.tau2)
    pt_in = rs.inliers
    if d_bar is None:
        d_bar = float(np.mean(rs.pose.transform(corr.X[pt_in])[:, 2]))

    t0 = time.perf_counter()
    solver_pose = None
    if method == "p3p":
        solver_pose = rs.pose
    else:
        try:
            sub = corr.subset(pt_in, ln_in)
            fn = solver_override or solve
            solver_pose = fn(method, sub, d_bar=d_bar,
                             pose_hypothesis=rs.pose if pose_hypothesis is None else pose_hypothesis)
        except (PnPError, np.linalg.LinAlgError, ValueError, FloatingPointError):
            solver_pose = None
    timings["solver_ms"] = 1e3 * (time.perf_counter() - t0)

    pose, pt_mask, ln_mask = rs.pose, pt_in, ln_in
    if solver_pose is not None:
        p_m, l_m = gate(solver_pose, corr, refilter_tau2)
        if p_m.sum() >= 3:
            pose, pt_mask, ln_mask = solver_pose, p_m, l_m
        else:
            flags["solver_failed_fallback_to_ransac"] = True
    else:
        flags["solver_failed_fallback_to_ransac"] = True

    t0 = time.perf_counter()
    if regime is not None:
        lm = ln_mask if refine_with_lines else np.zeros(corr.n_lines, bool)
        sub = corr.subset(pt_mask, lm)
        if sub.n_points + sub.n_lines >= 3:
            pose = refine(pose, sub, RefineConfig(regime=regime)).pose
    timings["refine_ms"] = 1e3 * (time.perf_counter() - t0)
    return PipelineResult(pose, pt_mask, ln_mask, timings, flags, rs.pose, solver_pose)

