"""Membership-inference success on an overfit target, noise-free versus private.

    python scripts/mia_direction.py --epsilons 0.1 0.4 --seeds 0 1 2 3 4 --out runs/mia
"""
import argparse
import json
import warnings
from pathlib import Path

from dpfpl.config import load_config
from dpfpl.federation import run_training
from dpfpl.mia import DEFAULT_SHADOWS, attack, binomial_ci, query_records, shadow_dataset, train_shadows

HERE = Path(__file__).resolve().parent


def pooled(cfg, seeds, shadows, score):
    correct = total = 0
    for s in seeds:
        target = cfg.replace(seed=s)
        _, c, n = attack(shadow_dataset(train_shadows(target, shadows)), query_records(run_training(target)), score)
        correct, total = correct + c, total + n
    lo, hi = binomial_ci(correct, total)
    return {"success_rate": correct / total, "ci_low": lo, "ci_high": hi, "n_queries": total,
            "epsilon": cfg.epsilon if cfg.noise else None, "variant": cfg.variant}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(HERE.parent / "configs" / "mia_target_overfit.json"))
    ap.add_argument("--epsilons", type=float, nargs="+", default=[0.1])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--shadows", type=int, default=DEFAULT_SHADOWS)
    ap.add_argument("--score", default="true-label", choices=["true-label", "max"])
    ap.add_argument("--out", default="runs/mia")
    args = ap.parse_args()

    warnings.simplefilter("ignore", RuntimeWarning)
    base = load_config(args.config)
    reports = [pooled(base.replace(noise=False), args.seeds, args.shadows, args.score)]
    reports += [pooled(base.replace(noise=True, epsilon=e), args.seeds, args.shadows, args.score)
                for e in args.epsilons]
    for r in reports:
        label = "noise-free" if r["epsilon"] is None else f"eps={r['epsilon']}"
        print(f"{label:<12} success {r['success_rate']:.3f}  95% CI [{r['ci_low']:.3f}, {r['ci_high']:.3f}]"
              f"  n={r['n_queries']}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path, n = out / "mia_direction.json", 1
    while path.exists():
        path = out / f"mia_direction-{n}.json"
        n += 1
    path.write_text(json.dumps(reports, indent=1) + "\n")
    print(f"\nreport: {path}")


if __name__ == "__main__":
    main()
