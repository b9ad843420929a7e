"""Dense float64 matrix helpers and reproducible random streams.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  Every
random draw in the simulator goes through an :class:`RngStream`, which wraps a
counter-based Philox generator keyed by ``(seed, stream_id)`` so that each
client, the server and the data generator get independent, reproducible
sequences no matter in which order they are scheduled.
"""
from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

# Well-known stream ids.  Clients use CLIENT_BASE + client index.
DATA_STREAM = 0
ENCODER_STREAM = 1
SERVER_STREAM = 2
INIT_STREAM = 3
EVAL_STREAM = 4
SPLIT_STREAM = 5
MEANS_STREAM = 6
CLIENT_BASE = 1000


class RngStream:
    """Single-owner pseudorandom stream identified by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError(f"seed and stream_id must be non-negative, got {seed}, {stream_id}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, stream_id: int) -> "RngStream":
        """A fresh stream sharing this stream's seed."""
        return RngStream(self.seed, stream_id)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)


def _as_matrix(a, name: str = "a") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def check_finite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite entries in {what}")
    return a


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def gaussian_matrix(rows: int, cols: int, sigma: float, rng: RngStream) -> np.ndarray:
    """I.i.d. ``N(0, sigma^2)`` entries; ``sigma == 0`` gives exact zeros.

    A zero-sigma call draws nothing, so it does not advance ``rng``.
    """
    if sigma < 0 or not np.isfinite(sigma):
        raise ValueError(f"sigma must be finite and >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros((rows, cols))
    return rng.normal((rows, cols), scale=sigma)


def qr_orthonormalize(a, *, rtol: float = 1e-12, return_rank: bool = False):
    """Orthonormal basis for the column span of ``a`` (``rows >= cols``).

    Columns beyond the numerical rank (``|R_jj| <= rtol * max|R_ii|``) are
    zeroed; the rank is logged and optionally returned.
    """
    a = _as_matrix(a)
    n, k = a.shape
    if n < k:
        raise ValueError(f"qr_orthonormalize needs rows >= cols, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    diag = np.abs(np.diag(r))
    scale = diag.max() if diag.size else 0.0
    keep = diag > rtol * scale if scale > 0 else np.zeros(k, dtype=bool)
    rank = int(keep.sum())
    if rank < k:
        logger.debug("qr_orthonormalize: numerical rank %d < %d columns", rank, k)
        q = q * keep
    return (q, rank) if return_rank else q
