"""Rank x {with, without residual} x {local, neighbor} ablation table.

    python scripts/residual_ablation.py --out runs/ablation --epsilons 0.01 0.4 --seeds 0 1 2 3 4
"""
import argparse
import csv
from pathlib import Path

from dpfpl.config import RANK_GRID, RunConfig
from dpfpl.harness import SweepSpec, sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--epsilons", type=float, nargs="+", default=[0.01, 0.4])
    ap.add_argument("--ranks", type=int, nargs="+", default=list(RANK_GRID))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    spec = SweepSpec(RunConfig(rounds=args.rounds), ["dp-fpl", "dp-fpl-no-residual"], args.epsilons,
                     args.ranks, args.seeds, threads=args.threads)
    path, _ = sweep(spec, args.out)
    rows = list(csv.DictReader(Path(path).open()))
    cell = {(r["variant"], float(r["epsilon"]), int(r["rank"])): r for r in rows}

    def fmt(r, key):
        m, s = r[f"{key}_mean"], r[f"{key}_std"]
        if not m:
            return "failed"
        return f"{100 * float(m):5.1f}" + (f" ± {100 * float(s):4.1f}" if s else "")

    for eps in args.epsilons:
        print(f"\nepsilon = {eps}   (accuracy %, mean ± std over {len(args.seeds)} seeds)")
        print(f"{'rank':>4} | {'local w/':>13} {'local w/o':>13} | {'neigh w/':>13} {'neigh w/o':>13}")
        for k in args.ranks:
            on, off = cell[("dp-fpl", eps, k)], cell[("dp-fpl-no-residual", eps, k)]
            print(f"{k:>4} | {fmt(on, 'local'):>13} {fmt(off, 'local'):>13} | "
                  f"{fmt(on, 'neighbor'):>13} {fmt(off, 'neighbor'):>13}")
    print(f"\nsummary: {path}")


if __name__ == "__main__":
    main()
