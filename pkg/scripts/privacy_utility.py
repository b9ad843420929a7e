"""Local / neighbor accuracy against epsilon for each method variant.

    python scripts/privacy_utility.py --out runs/privacy --seeds 0 1 2
"""
import argparse
import csv
from pathlib import Path

from dpfpl.config import EPSILON_GRID, VARIANTS, RunConfig
from dpfpl.harness import SweepSpec, sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/privacy")
    ap.add_argument("--variants", nargs="+", default=[v for v in VARIANTS if v != "dp-fpl-no-residual"])
    ap.add_argument("--epsilons", type=float, nargs="+", default=list(EPSILON_GRID))
    ap.add_argument("--rank", type=int, default=8)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    spec = SweepSpec(RunConfig(rounds=args.rounds), args.variants, args.epsilons, [args.rank], args.seeds,
                     threads=args.threads)
    path, _ = sweep(spec, args.out)
    rows = list(csv.DictReader(Path(path).open()))
    for key in ("local", "neighbor"):
        print(f"\n{key} accuracy % (rank {args.rank})")
        print(f"{'variant':<22}" + "".join(f"{e:>9}" for e in args.epsilons))
        for v in args.variants:
            vals = [r[f"{key}_mean"] for r in rows if r["variant"] == v]
            print(f"{v:<22}" + "".join(f"{100 * float(x):9.1f}" if x else f"{'-':>9}" for x in vals))
    print(f"\nsummary: {path}")


if __name__ == "__main__":
    main()
