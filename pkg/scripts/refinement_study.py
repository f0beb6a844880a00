"""Compare the three refinement regimes on heteroscedastic synthetic problems.

Starts every regime from the same EPnPU pose and reports mean errors and
wall time per regime, overall and per problem size.

Example:
    python scripts/refinement_study.py --problems 100
"""
import argparse
import time
from collections import defaultdict

import numpy as np

from uncpnp.bench import NoiseSchedule, SceneSpec, generate_trial, rotation_error, translation_error
from uncpnp.epnpu import solve_epnpu
from uncpnp.refine import REGIMES, RefineConfig, refine


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--problems", type=int, default=100)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--mode", choices=("2d", "3d"), default="3d")
    args = ap.parse_args()

    errs = defaultdict(list)
    by_n = defaultdict(lambda: defaultdict(list))
    times = defaultdict(float)
    for k in range(args.problems):
        n = 10 + 10 * (k % 11)
        tr = generate_trial(SceneSpec(n_points=n), NoiseSchedule.for_mode(args.mode), [args.seed, k])
        start = solve_epnpu(tr.corr, d_bar=tr.d_bar).pose
        errs["none"].append((rotation_error(tr.pose.R, start.R), translation_error(tr.pose.t, start.t)))
        for r in REGIMES:
            t0 = time.perf_counter()
            p = refine(start, tr.corr, RefineConfig(regime=r)).pose
            times[r] += time.perf_counter() - t0
            e = (rotation_error(tr.pose.R, p.R), translation_error(tr.pose.t, p.t))
            errs[r].append(e)
            by_n[n][r].append(e)

    print(f"{'regime':22s}{'e_rot deg':>12s}{'e_trans %':>12s}{'time ms':>10s}")
    for r in ("none",) + REGIMES:
        m = np.mean(errs[r], axis=0)
        t = 1e3 * times[r] / args.problems if r in times else 0.0
        print(f"{r:22s}{m[0]:12.4f}{m[1]:12.4f}{t:10.2f}")
    print("\nper size: iterative_uncertain / full_uncertain mean error ratio (rot, trans)")
    for n in sorted(by_n):
        it = np.mean(by_n[n]["iterative_uncertain"], axis=0)
        fu = np.mean(by_n[n]["full_uncertain"], axis=0)
        print(f"n={n:4d}  {it[0] / fu[0]:.3f}  {it[1] / fu[1]:.3f}")


if __name__ == "__main__":
    main()
