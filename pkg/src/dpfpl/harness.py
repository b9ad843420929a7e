"""Run artifacts, metrics CSV, grid sweeps and the membership-inference driver."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_env, load_config
from .federation import RoundMetrics, RunResult, run_training
from .mia import DEFAULT_SHADOWS, SCORES, evaluate_target, validate_report

logger = logging.getLogger(__name__)

ARTIFACT_SCHEMA = "dpfpl.artifact/1"
SWEEP_SCHEMA = "dpfpl.sweep/1"
MIA_SCHEMA = "dpfpl.mia/1"
CSV_HEADER = ("round", "client", "loss", "local_acc", "neighbor_acc", "eps_spent", "sigma_local", "sigma_global")
SUMMARY_HEADER = (
    "variant", "epsilon", "rank", "n_seeds", "n_failed",
    "local_mean", "local_std", "neighbor_mean", "neighbor_std",
)


def _cell(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return repr(x) if math.isfinite(x) else ""


def metrics_csv(result: RunResult) -> str:
    """One aggregate row per round; missing values are empty cells."""
    sigma_l = result.simulation.scales.sigma_local if result.simulation else None
    sigma_g = result.simulation.scales.sigma_global if result.simulation else None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for m in result.metrics:
        w.writerow([m.round, "all", _cell(m.loss), _cell(m.mean_local), _cell(m.mean_neighbor),
                    _cell(m.eps_spent), _cell(sigma_l), _cell(sigma_g)])
    return buf.getvalue()


def artifact(result: RunResult) -> dict:
    loc, nb = result.final_accuracy() if any(m.local_acc is not None for m in result.metrics) else (None, None)
    return {
        "schema": ARTIFACT_SCHEMA,
        "config": result.config.to_dict(),
        "digest": result.config.digest(),
        "completed": result.completed,
        "error": result.error,
        "rounds_completed": len(result.metrics),
        "final_local_acc": loc,
        "final_neighbor_acc": nb,
        "budget": result.budget,
        "metrics": [m.to_dict() for m in result.metrics],
        "p_global": result.p_global.tolist(),
        "p_locals": [p.tolist() for p in result.p_locals],
    }


def load_artifact(path) -> RunResult:
    with open(path) as fh:
        d = json.load(fh)
    if d.get("schema") != ARTIFACT_SCHEMA:
        raise ValueError(f"{path}: not a run artifact")
    metrics = [RoundMetrics(**m) for m in d["metrics"]]
    return RunResult(
        RunConfig.from_dict(d["config"]), metrics, np.asarray(d["p_global"], dtype=float),
        [np.asarray(p, dtype=float) for p in d["p_locals"]], d["budget"],
        completed=d["completed"], error=d["error"],
    )


def run_dir(out: Path, cfg: RunConfig) -> Path:
    """Fresh ``<digest>-s<seed>`` directory; existing ones get a numeric suffix instead."""
    base = f"{cfg.digest()}-s{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    path, n = out / base, 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            path = out / f"{base}-{n}"
            n += 1


def _write_new(path: Path, text: str) -> None:
    with open(path, "x") as fh:  # never overwrite
        fh.write(text)


def write_run(result: RunResult, out) -> Path:
    path = run_dir(Path(out), result.config)
    _write_new(path / "metrics.csv", metrics_csv(result))
    _write_new(path / "run.json", json.dumps(artifact(result), indent=1) + "\n")
    return path


def execute(cfg: RunConfig, out) -> tuple[RunResult, Path]:
    result = run_training(cfg)
    path = write_run(result, out)
    logger.info("run %s -> %s (completed=%s)", cfg.digest(), path, result.completed)
    return result, path


# --- sweeps --------------------------------------------------------------


@dataclass
class SweepSpec:
    base: RunConfig
    variants: list[str]
    epsilons: list[float]
    ranks: list[int]
    seeds: list[int]
    threads: int = 1
    window: int = 10

    def cells(self) -> list[tuple[str, float, int]]:
        return [(v, e, k) for v in self.variants for e in self.epsilons for k in self.ranks]

    def configs(self, cell) -> list[RunConfig]:
        v, e, k = cell
        return [self.base.replace(variant=v, epsilon=e, rank=k, seed=s) for s in self.seeds]

    @classmethod
    def from_dict(cls, d: dict, environ=None) -> "SweepSpec":
        if d.get("schema") != SWEEP_SCHEMA:
            raise ConfigError([f"schema: expected {SWEEP_SCHEMA!r}"])
        base = dict(d.get("base", {}))
        base.setdefault("schema", RunConfig.schema)
        base_cfg = RunConfig.from_dict(apply_env(base, environ)).validate()
        spec = cls(
            base_cfg,
            list(d.get("variants", [base_cfg.variant])),
            [float(e) for e in d.get("epsilons", [base_cfg.epsilon])],
            [int(k) for k in d.get("ranks", [base_cfg.rank])],
            [int(s) for s in d.get("seeds", [base_cfg.seed])],
            window=int(d.get("window", 10)),
        )
        problems = []
        for name in ("variants", "epsilons", "ranks", "seeds"):
            if not getattr(spec, name):
                problems.append(f"{name}: must be a non-empty list")
        for cell in spec.cells():
            for p in spec.configs(cell)[0].problems() if spec.seeds else []:
                problems.append(f"cell {cell}: {p}")
        if problems:
            raise ConfigError(problems)
        return spec


def _summary_row(cell, results: list[RunResult | None], window: int) -> list:
    ok = [r for r in results if r is not None and r.completed]
    loc = [r.final_accuracy(window)[0] for r in ok]
    nb = [r.final_accuracy(window)[1] for r in ok]
    nb = [x for x in nb if x is not None]

    def stats(xs):
        if not xs:
            return None, None
        return float(np.mean(xs)), (float(np.std(xs, ddof=1)) if len(xs) > 1 else None)

    lm, ls = stats(loc)
    nm, ns = stats(nb)
    v, e, k = cell
    return [v, repr(float(e)), k, len(results), len(results) - len(ok),
            _cell(lm), _cell(ls), _cell(nm), _cell(ns)]


def sweep(spec: SweepSpec, out) -> tuple[Path, list[list]]:
    """Run every (variant, epsilon, rank, seed); a failing cell is recorded and the sweep goes on."""
    out = Path(out)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cell, cfg) for cell in spec.cells() for cfg in spec.configs(cell)]

    def one(job):
        cell, cfg = job
        try:
            result, _ = execute(cfg, runs_dir)
            return result
        except Exception as exc:  # record and continue
            logger.error("cell %s seed %d failed: %s", cell, cfg.seed, exc)
            return None

    if spec.threads > 1:
        with ThreadPoolExecutor(spec.threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    per = len(spec.seeds)
    rows = [_summary_row(cell, results[i * per : (i + 1) * per], spec.window) for i, cell in enumerate(spec.cells())]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    w.writerows(rows)
    path = out / "summary.csv"
    n = 1
    while path.exists():
        path = out / f"summary-{n}.csv"
        n += 1
    _write_new(path, buf.getvalue())
    return path, rows


def load_sweep(path, environ=None) -> SweepSpec:
    with open(path) as fh:
        return SweepSpec.from_dict(json.load(fh), environ)


# --- membership inference -------------------------------------------------


@dataclass
class MiaSpec:
    target: Path
    shadows: int = DEFAULT_SHADOWS
    score: str = "true-label"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> "MiaSpec":
        problems = []
        if d.get("schema") != MIA_SCHEMA:
            problems.append(f"schema: expected {MIA_SCHEMA!r}")
        target = d.get("target")
        if not target:
            problems.append("target: missing")
        else:
            target = Path(target)
            if not target.is_absolute():
                target = base / target
            if target.is_dir():
                target = target / "run.json"
            if not target.is_file():
                problems.append(f"target: no run artifact at {target}")
        shadows = d.get("shadows", DEFAULT_SHADOWS)
        if not (isinstance(shadows, int) and shadows >= 2):
            problems.append(f"shadows: must be an integer >= 2 (got {shadows!r})")
        score = d.get("score", "true-label")
        if score not in SCORES:
            problems.append(f"score: must be one of {SCORES}")
        if problems:
            raise ConfigError(problems)
        return cls(target, shadows, score)


def load_mia(path) -> MiaSpec:
    path = Path(path)
    with open(path) as fh:
        return MiaSpec.from_dict(json.load(fh), path.parent)


def run_mia(spec: MiaSpec, out, threads: int = 1) -> tuple[dict, Path]:
    target = load_artifact(spec.target)
    if not target.completed:
        raise ConfigError([f"target: run at {spec.target} did not complete"])
    rep = evaluate_target(target, spec.shadows, threads, spec.score)
    rep["target"] = str(spec.target)
    rep["shadows"] = spec.shadows
    validate_report(rep)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = f"mia-{target.config.digest()}-s{target.config.seed}"
    path, n = out / f"{base}.json", 1
    while path.exists():
        path = out / f"{base}-{n}.json"
        n += 1
    _write_new(path, json.dumps(rep, indent=1) + "\n")
    return rep, path


__all__ = [
    "CSV_HEADER", "SUMMARY_HEADER", "artifact", "execute", "load_artifact", "load_config",
    "load_mia", "load_sweep", "metrics_csv", "run_mia", "sweep", "write_run", "MiaSpec", "SweepSpec",
]
