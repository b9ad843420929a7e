"""Black-box membership inference against trained client prompts.

The attacker sees only confidence vectors (softmax over a client's own label
set) for labelled query points.  Shadow runs trained with the target's recipe
on independent data provide labelled in/out confidences, from which a
per-class confidence threshold is fitted.  The thresholded score is either the
confidence on the record's own label (default, a loss-threshold attack) or the
maximum confidence.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from .config import RunConfig
from .federation import RunResult, Simulation, build_simulation, run_training
from .model import image_features, predict_proba
from .numeric import RngStream

logger = logging.getLogger(__name__)

DEFAULT_SHADOWS = 8
SCORES = ("true-label", "max")
REPORT_KEYS = ("success_rate", "ci_low", "ci_high", "n_queries", "epsilon", "variant")

# Offset for the non-member query stream so it never collides with training streams.
QUERY_STREAM = 3000


class UnbalancedError(ValueError):
    pass


@dataclass(frozen=True)
class AttackDataset:
    """Confidence records with membership labels (1 = in, 0 = out)."""

    confidences: tuple  # per-record 1-D arrays; lengths may differ across clients
    labels: np.ndarray  # class label of each record
    member: np.ndarray
    label_pos: np.ndarray  # position of the label inside its confidence vector

    def __post_init__(self):
        n = len(self.confidences)
        if not len(self.labels) == len(self.member) == len(self.label_pos) == n:
            raise ValueError("confidences, labels, member and label_pos must have equal length")

    def __len__(self) -> int:
        return len(self.member)

    def scores(self, kind: str = "true-label") -> np.ndarray:
        if kind == "max":
            return np.array([float(np.max(c)) for c in self.confidences])
        if kind == "true-label":
            return np.array([float(c[j]) for c, j in zip(self.confidences, self.label_pos)])
        raise ValueError(f"unknown score {kind!r}; expected one of {SCORES}")

    def counts(self) -> dict[int, tuple[int, int]]:
        """class -> (n_in, n_out)"""
        out = {}
        for c in np.unique(self.labels):
            sel = self.labels == c
            out[int(c)] = (int(self.member[sel].sum()), int((~self.member[sel].astype(bool)).sum()))
        return out

    def is_balanced(self) -> bool:
        return all(n_in == n_out for n_in, n_out in self.counts().values())

    @classmethod
    def concat(cls, parts: list["AttackDataset"]) -> "AttackDataset":
        confs = tuple(c for p in parts for c in p.confidences)
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return cls(confs, cat("labels"), cat("member"), cat("label_pos"))


def _restore(sim: Simulation, run: RunResult) -> Simulation:
    sim.server.p_global = np.array(run.p_global, dtype=float)
    for client, p in zip(sim.clients, run.p_locals):
        client.p_local = np.array(p, dtype=float)
    return sim


def query_records(run: RunResult) -> AttackDataset:
    """In/out confidence records for every client of a finished run.

    Members are the client's training samples; non-members are an equal number
    of fresh draws per class from the same generators.
    """
    sim = _restore(build_simulation(run.config), run)
    ds = sim.dataset
    confs, labels, member, pos = [], [], [], []
    for client in sim.clients:
        idx = client.shard
        if len(idx) == 0:
            continue
        classes = client.local_classes
        y_in = ds.y_train[idx]
        where = {c: j for j, c in enumerate(classes)}
        y_pos = np.array([where[int(y)] for y in y_in])
        x_out = ds.draw(y_in, RngStream(run.config.seed, QUERY_STREAM + client.id))
        prompt = sim.client_prompt(client)
        for x, is_in in ((ds.x_train[idx], 1), (x_out, 0)):
            p = predict_proba(prompt, sim.encoders, image_features(x, sim.encoders), classes)
            confs.extend(p)
            labels.append(y_in)
            member.append(np.full(len(y_in), is_in))
            pos.append(y_pos)
    return AttackDataset(tuple(confs), np.concatenate(labels), np.concatenate(member), np.concatenate(pos))


def shadow_configs(config: RunConfig, count: int) -> list[RunConfig]:
    """Same recipe and population as the target, independent data seeds."""
    if count < 2:
        raise ValueError(f"need at least 2 shadows, got {count}")
    base = (config.seed + 1) * 7919
    return [config.replace(seed=base + s, population_seed=config.pop_seed) for s in range(count)]


def train_shadows(config: RunConfig, count: int = DEFAULT_SHADOWS, threads: int = 1) -> list[RunResult]:
    cfgs = shadow_configs(config, count)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            runs = list(pool.map(run_training, cfgs))
    else:
        runs = [run_training(c) for c in cfgs]
    for r in runs:
        if not r.completed:
            logger.warning("shadow seed %d aborted: %s", r.config.seed, r.error)
    return runs


def shadow_dataset(shadows: list[RunResult]) -> AttackDataset:
    return AttackDataset.concat([query_records(r) for r in shadows])


def _best_threshold(scores: np.ndarray, member: np.ndarray) -> float:
    """Threshold t maximizing accuracy of the rule ``score >= t -> member``."""
    cand = np.concatenate([np.unique(scores), [np.inf]])
    best_t, best_acc = cand[0], -1.0
    for t in cand:
        acc = np.mean((scores >= t) == member)
        if acc > best_acc:
            best_t, best_acc = t, acc
    return float(best_t)


@dataclass
class ThresholdAttack:
    thresholds: dict[int, float]
    fallback: float
    score: str = "true-label"

    def predict(self, data: AttackDataset) -> np.ndarray:
        s = data.scores(self.score)
        t = np.array([self.thresholds.get(int(c), self.fallback) for c in data.labels])
        return (s >= t).astype(int)


def fit_attack(train: AttackDataset, score: str = "true-label") -> ThresholdAttack:
    if len(train) == 0:
        raise ValueError("empty attack training set")
    if not train.is_balanced():
        raise UnbalancedError(f"attack training set is unbalanced: {train.counts()}")
    scores, member = train.scores(score), train.member.astype(bool)
    th = {}
    for c in np.unique(train.labels):
        sel = train.labels == c
        th[int(c)] = _best_threshold(scores[sel], member[sel])
    return ThresholdAttack(th, _best_threshold(scores, member), score)


def attack(train: AttackDataset, target: AttackDataset, score: str = "true-label") -> tuple[float, int, int]:
    """Fit on shadow records, score target records; returns (rate, correct, total)."""
    model = fit_attack(train, score)
    if len(target) == 0:
        raise ValueError("no target queries")
    correct = int(np.sum(model.predict(target) == target.member))
    return correct / len(target), correct, len(target)


def binomial_ci(correct: int, total: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(correct, total).proportion_ci(confidence_level=level)
    return float(ci.low), float(ci.high)


def report(correct: int, total: int, config: RunConfig, score: str = "true-label") -> dict:
    lo, hi = binomial_ci(correct, total)
    return {
        "success_rate": correct / total,
        "ci_low": lo,
        "ci_high": hi,
        "n_queries": total,
        "epsilon": config.epsilon if config.noise else None,
        "variant": config.variant,
        "attack": f"per-class threshold on {score} confidence",
    }


def validate_report(rep: dict) -> None:
    missing = [k for k in REPORT_KEYS if k not in rep]
    if missing:
        raise ValueError(f"report missing keys {missing}")
    for k in ("success_rate", "ci_low", "ci_high"):
        if not 0.0 <= rep[k] <= 1.0:
            raise ValueError(f"{k}={rep[k]} outside [0, 1]")
    if not rep["ci_low"] <= rep["success_rate"] <= rep["ci_high"]:
        raise ValueError("success_rate outside its interval")
    if not (isinstance(rep["n_queries"], int) and rep["n_queries"] > 0):
        raise ValueError("n_queries must be a positive integer")


def evaluate_target(
    target: RunResult, shadows: int = DEFAULT_SHADOWS, threads: int = 1, score: str = "true-label"
) -> dict:
    """Train shadows for the target's recipe, attack the target, return the report."""
    train = shadow_dataset(train_shadows(target.config, shadows, threads))
    _, correct, total = attack(train, query_records(target), score)
    return report(correct, total, target.config, score)
