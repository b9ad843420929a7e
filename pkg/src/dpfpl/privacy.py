"""Clipping, Gaussian mechanisms and closed-form budget accounting.

Noise scales follow the single-shot Gaussian mechanism constant with a
``sqrt(T)`` composition factor::

    sigma = S * sqrt(T) * sqrt(2 ln(1.25 / delta)) / epsilon

with local sensitivity ``S_L = C_th / |B|`` and global sensitivity
``S_G = C_th / (N |B|)``.  Sensitivities assume add/remove neighbours and
per-example clipping followed by averaging with the fixed denominator ``|B|``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numeric import RngStream, frobenius_norm, gaussian_matrix


def calibrate_sigma(sensitivity: float, epsilon: float, delta: float, rounds: int) -> float:
    if not sensitivity > 0:
        raise ValueError(f"sensitivity must be > 0, got {sensitivity}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    return sensitivity * math.sqrt(rounds) * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def epsilon_for_sigma(sigma: float, sensitivity: float, delta: float, rounds: int) -> float:
    """Inverse of :func:`calibrate_sigma` in epsilon."""
    return sensitivity * math.sqrt(rounds) * math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    clip_threshold: float
    rounds: int
    batch_size: int
    num_clients: int

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if not self.clip_threshold > 0:
            raise ValueError(f"clip_threshold must be > 0, got {self.clip_threshold}")
        for name in ("rounds", "batch_size", "num_clients"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def local_sensitivity(self) -> float:
        return self.clip_threshold / self.batch_size

    @property
    def global_sensitivity(self) -> float:
        return self.clip_threshold / (self.num_clients * self.batch_size)


@dataclass(frozen=True)
class NoiseScales:
    sigma_local: float
    sigma_global: float

    @classmethod
    def from_spec(cls, spec: PrivacySpec) -> "NoiseScales":
        return cls(
            calibrate_sigma(spec.local_sensitivity, spec.epsilon, spec.delta, spec.rounds),
            calibrate_sigma(spec.global_sensitivity, spec.epsilon, spec.delta, spec.rounds),
        )

    @classmethod
    def off(cls) -> "NoiseScales":
        return cls(0.0, 0.0)


def clip(g, threshold: float) -> np.ndarray:
    """Scale ``g`` into the Frobenius ball of radius ``threshold``."""
    if not threshold > 0:
        raise ValueError(f"clip threshold must be > 0, got {threshold}")
    g = np.asarray(g, dtype=np.float64)
    norm = frobenius_norm(g)
    if norm <= threshold:
        return g
    return g * (threshold / norm)


def clip_per_example(grads, threshold: float) -> np.ndarray:
    """Clip each ``grads[n]`` independently (leading axis indexes examples)."""
    if not threshold > 0:
        raise ValueError(f"clip threshold must be > 0, got {threshold}")
    grads = np.asarray(grads, dtype=np.float64)
    flat = grads.reshape(grads.shape[0], -1)
    norms = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    factor = threshold / np.maximum(norms, threshold)
    return grads * factor.reshape((-1,) + (1,) * (grads.ndim - 1))


def clipped_mean(grads, threshold: float, denominator: int | None = None) -> np.ndarray:
    """Per-example clip then sum / ``denominator`` (defaults to the batch size).

    A fixed denominator is what bounds the add/remove sensitivity by
    ``threshold / denominator``.
    """
    grads = np.asarray(grads, dtype=np.float64)
    n = grads.shape[0] if denominator is None else denominator
    if n < 1:
        raise ValueError("empty batch")
    return clip_per_example(grads, threshold).sum(axis=0) / n


def privatize(g, sigma: float, rng: RngStream) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if sigma == 0:
        return g
    return g + gaussian_matrix(g.shape[0], g.shape[1], sigma, rng)


def parallel_compose(epsilons) -> float:
    """Mechanisms on disjoint shards cost the max, not the sum."""
    epsilons = list(epsilons)
    return max(epsilons) if epsilons else 0.0


@dataclass(frozen=True)
class BudgetReport:
    epsilon_spent_local: float
    epsilon_spent_global: float
    delta: float
    rounds_elapsed: int
    sigma_local: float
    sigma_global: float

    def to_dict(self) -> dict:
        return asdict(self)


class BudgetExhausted(ValueError):
    pass


def _track(epsilon: float, rounds_elapsed: int, rounds: int) -> float:
    if rounds_elapsed == rounds:
        return float(epsilon)
    return epsilon * math.sqrt(rounds_elapsed / rounds)


def account(spec: PrivacySpec, rounds_elapsed: int) -> BudgetReport:
    """Epsilon consumed after ``rounds_elapsed`` of ``spec.rounds`` rounds.

    Each client's local mechanism touches only its own shard, so the joint
    local-DP figure is the parallel composition (max) of the per-client
    tracks, which are identical.
    """
    if rounds_elapsed < 0:
        raise ValueError(f"rounds_elapsed must be >= 0, got {rounds_elapsed}")
    if rounds_elapsed > spec.rounds:
        raise BudgetExhausted(
            f"privacy budget exhausted: {rounds_elapsed} rounds elapsed > T={spec.rounds}"
        )
    per_client = [_track(spec.epsilon, rounds_elapsed, spec.rounds)] * spec.num_clients
    scales = NoiseScales.from_spec(spec)
    return BudgetReport(
        epsilon_spent_local=parallel_compose(per_client),
        epsilon_spent_global=_track(spec.epsilon, rounds_elapsed, spec.rounds),
        delta=spec.delta,
        rounds_elapsed=rounds_elapsed,
        sigma_local=scales.sigma_local,
        sigma_global=scales.sigma_global,
    )
