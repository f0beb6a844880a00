"""Command-line entry point: ``uncpnp {solve,bench,propagate}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .bench import LINE_METHODS, POINT_METHODS, run_benchmark
from .errors import DegenerateBaseline, NoConvergence, NoModelFound
from .io import ResultFile, SchemaError, load_problem, parse_tracks, pose_to_json
from .robust import RansacConfig, run_pipeline
from .uncertainty import triangulate_line_with_covariance, triangulate_point_with_covariance

EXIT_OK, EXIT_INPUT, EXIT_FALLBACK = 0, 1, 2
SOLVE_METHODS = ("epnpu", "epnplu", "dlsu", "dlslu", "epnp", "dls")
UNCERTAIN = ("epnpu", "epnplu", "dlsu", "dlslu")

log = logging.getLogger("uncpnp")


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_INPUT


def cmd_solve(args) -> int:
    try:
        prob = load_problem(args.input)
    except OSError as exc:
        return _fail(f"cannot read {args.input}: {exc}")
    except SchemaError as exc:
        return _fail(str(exc))
    if args.starred and args.method not in UNCERTAIN:
        return _fail(f"--starred applies only to {', '.join(UNCERTAIN)}")
    method = args.method + ("*" if args.starred else "")
    cfg = RansacConfig(tau2=args.tau2, rng_seed=args.seed)
    try:
        res = run_pipeline(prob.corr, method, args.refine, cfg, d_bar=prob.d_bar,
                           pose_hypothesis=prob.pose_hypothesis)
    except NoModelFound as exc:
        return _fail(f"no pose found: {exc}")
    pose = pose_to_json(res.pose)
    out = ResultFile(R=pose["R"], t=pose["t"], inliers=[bool(v) for v in res.inliers],
                     line_inliers=[bool(v) for v in res.line_inliers],
                     timings={k: float(v) for k, v in res.timings.items()},
                     flags={k: bool(v) for k, v in res.flags.items()}, method=method,
                     config={"refine": args.refine, "tau2": args.tau2, "seed": args.seed,
                             "starred": bool(args.starred),
                             "pose_hypothesis_from": "file" if prob.pose_hypothesis else "ransac"})
    text = out.to_json()
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_FALLBACK if res.flags["solver_failed_fallback_to_ransac"] else EXIT_OK


def cmd_bench(args) -> int:
    if args.n_min < 4 or args.n_max < args.n_min or args.n_step < 1:
        return _fail("invalid sweep bounds: need 4 <= n-min <= n-max and n-step >= 1")
    if args.trials < 1:
        return _fail("--trials must be positive")
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    else:
        methods = list(LINE_METHODS + ("epnpu", "dlsu")) if args.mode == "lines" else list(POINT_METHODS)
    known = set(POINT_METHODS + LINE_METHODS + ("p3p",))
    bad = [m for m in methods if m not in known and not m.startswith("ransac+")]
    if bad:
        return _fail(f"unknown methods: {', '.join(bad)}")
    n_values = list(range(args.n_min, args.n_max + 1, args.n_step))
    table = run_benchmark(methods, n_values, args.trials, args.seed, args.mode,
                          workers=args.workers, timing=args.timing)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, f"bench_{args.mode}.csv"), "w") as fh:
        fh.write(table.to_csv())
    with open(os.path.join(args.out_dir, f"bench_{args.mode}_aggregate.csv"), "w") as fh:
        fh.write(table.aggregate_csv())
    return EXIT_OK


def cmd_propagate(args) -> int:
    try:
        with open(args.tracks) as fh:
            doc = json.load(fh)
        _, tracks = parse_tracks(doc)
    except OSError as exc:
        return _fail(f"cannot read {args.tracks}: {exc}")
    except json.JSONDecodeError as exc:
        return _fail(f"$: invalid JSON: {exc}")
    except SchemaError as exc:
        return _fail(str(exc))
    landmarks = []
    for i, tr in enumerate(tracks):
        entry = {"index": i, "type": tr["type"], "degenerate": False}
        try:
            if tr["type"] == "point":
                r = triangulate_point_with_covariance(tr["poses"], tr["detections"], tr["covariances"])
                entry.update(x=r.X.tolist(), cov=r.cov.tolist())
            else:
                r = triangulate_line_with_covariance(tr["poses"], tr["endpoints"], tr["endpoint_covs"],
                                                     tr["lines"], tr["line_vars"])
                entry.update(p=r.p.tolist(), q=r.q.tolist(), cov_p=r.Sigma_p.tolist(), cov_q=r.Sigma_q.tolist())
        except (DegenerateBaseline, NoConvergence, np.linalg.LinAlgError) as exc:
            entry.update(degenerate=True, reason=str(exc))
        landmarks.append(entry)
    text = json.dumps({"landmarks": landmarks}, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uncpnp", description="Uncertainty-aware PnP(L) pose estimation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="estimate a pose from a problem file")
    s.add_argument("--input", required=True)
    s.add_argument("--method", choices=SOLVE_METHODS, default="epnpu")
    s.add_argument("--starred", action="store_true", help="feed the solver a pose hypothesis")
    s.add_argument("--refine", choices=("none", "standard", "uncertain", "full"), default="uncertain")
    s.add_argument("--tau2", type=float, default=5.991)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="run a synthetic Monte Carlo sweep")
    b.add_argument("--mode", choices=("2d", "3d", "lines"), default="3d")
    b.add_argument("--n-min", type=int, default=10)
    b.add_argument("--n-max", type=int, default=110)
    b.add_argument("--n-step", type=int, default=10)
    b.add_argument("--trials", type=int, default=50)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--methods", default="", help="comma-separated method ids")
    b.add_argument("--out-dir", default="bench_out")
    b.add_argument("--workers", type=int, default=None)
    b.add_argument("--timing", action="store_true", help="record wall time (breaks byte-identical output)")
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("propagate", help="triangulate tracks and propagate covariances")
    p.add_argument("--tracks", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_propagate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "solve" and not (np.isfinite(args.tau2) and args.tau2 > 0):
        return _fail("--tau2 must be a positive number")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
