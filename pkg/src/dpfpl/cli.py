"""Command line entry point: ``dpfpl {run,sweep,mia,validate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .harness import execute, load_mia, load_sweep, run_mia, sweep

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INVARIANT = 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpfpl", description="Differentially private federated prompt learning simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("run", "train one configuration and write its artifacts"),
        ("sweep", "run a variant x epsilon x rank x seed grid"),
        ("mia", "membership inference against a finished run"),
        ("validate", "check a run configuration without running it"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON config file")
        if name != "validate":
            p.add_argument("--out", default="runs", help="output directory (default: runs)")
            p.add_argument("--threads", type=int, default=None, help="worker threads")
        if name in ("run", "validate"):
            p.add_argument("--seed", type=int, default=None, help="override the master seed")
        if name == "sweep":
            p.add_argument("--seed", type=int, default=None, help="run only this seed")
    return ap


def _fail(exc: ConfigError) -> int:
    print(str(exc), file=sys.stderr)
    return EXIT_VALIDATION


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if args.command == "validate":
            cfg = load_config(args.config, seed=args.seed)
            print(f"ok {cfg.digest()}-s{cfg.seed}")
            return EXIT_OK
        if args.command == "run":
            cfg = load_config(args.config, seed=args.seed, threads=threads)
            result, path = execute(cfg, args.out)
            print(path)
            if not result.completed:
                print(f"invariant breach: {result.error}", file=sys.stderr)
                return EXIT_INVARIANT
            return EXIT_OK
        if args.command == "sweep":
            spec = load_sweep(args.config)
            if args.seed is not None:
                spec.seeds = [args.seed]
            if threads is not None:
                spec.threads = threads
            path, rows = sweep(spec, args.out)
            print(path)
            failed = sum(r[4] for r in rows)
            if failed:
                print(f"{failed} run(s) failed", file=sys.stderr)
                return EXIT_INVARIANT
            return EXIT_OK
        if args.command == "mia":
            spec = load_mia(args.config)
            rep, path = run_mia(spec, args.out, threads or 1)
            print(json.dumps(rep))
            return EXIT_OK
    except ConfigError as exc:
        return _fail(exc)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
