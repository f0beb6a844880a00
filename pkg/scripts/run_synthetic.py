"""Synthetic sweeps for the three noise modes; writes per-trial and aggregate CSVs.

Example:
    python scripts/run_synthetic.py --trials 50 --out-dir results/synthetic
"""
import argparse
from pathlib import Path

from uncpnp.bench import run_benchmark

MODES = {
    "2d": ["epnp", "epnpu", "epnpu*", "dls", "dlsu", "dlsu*"],
    "3d": ["epnp", "epnpu", "epnpu*", "dls", "dlsu", "dlsu*"],
    "lines": ["epnpu", "epnpl", "epnplu", "epnplu*", "dlsu", "dlsl", "dlslu", "dlslu*"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--modes", default="2d,3d,lines")
    ap.add_argument("--n-values", default="10,30,50,70,90,110")
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--out-dir", default="results/synthetic")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ns = [int(v) for v in args.n_values.split(",")]
    for mode in args.modes.split(","):
        table = run_benchmark(MODES[mode], ns, args.trials, args.seed, mode, workers=args.workers)
        (out / f"bench_{mode}.csv").write_text(table.to_csv())
        (out / f"bench_{mode}_aggregate.csv").write_text(table.aggregate_csv())
        print(f"\n== {mode} (mean e_rot deg / mean e_trans %) ==")
        print("method".ljust(10) + "".join(f"n={n}".rjust(16) for n in ns))
        for m in MODES[mode]:
            cells = [table.cell(m, n) for n in ns]
            print(m.ljust(10) + "".join(f"{c['mean_e_rot_deg']:7.3f}/{c['mean_e_trans_pct']:<7.3f}".rjust(16)
                                        for c in cells))


if __name__ == "__main__":
    main()
