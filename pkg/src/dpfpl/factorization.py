"""Per-round low-rank factorization of the local prompt and gradient
reconstruction from the factor gradients.

``factorize`` runs a single power-method pass: a Gaussian probe ``Z`` (d x k)
gives ``u = orth(p Z)``, then ``v = u^T p`` and ``r = p - u v``.  The forward
pass uses ``u v + r``, which equals ``p`` up to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import RngStream, qr_orthonormalize


@dataclass(frozen=True)
class FactoredPrompt:
    u: np.ndarray  # b x k, orthonormal columns
    v: np.ndarray  # k x d
    r: np.ndarray  # b x d residual

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def low_rank(self) -> np.ndarray:
        return self.u @ self.v

    def carriers(self) -> "FactoredPrompt":
        """Same prompt re-expressed with row-orthonormal ``v``.

        ``u v + r`` is unchanged, but factor gradients (and any noise added to
        them) are no longer scaled by the magnitude of the prompt, and the
        reconstructed gradient becomes the projection
        ``P_u G + G P_v - P_u G P_v``.
        """
        k = self.rank
        q, _ = np.linalg.qr(self.v.T, mode="reduced")
        v_hat = q[:, :k].T
        p = self.u @ self.v + self.r
        return FactoredPrompt(self.u, v_hat, p - self.u @ v_hat)

    def recompose(self, residual: bool = True) -> np.ndarray:
        """``u v + r`` (or just ``u v`` with ``residual=False``)."""
        uv = self.u @ self.v
        return uv + self.r if residual else uv


def factorize(p: np.ndarray, k: int, rng: RngStream) -> FactoredPrompt:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"prompt must be 2-D, got shape {p.shape}")
    b, d = p.shape
    if not 1 <= k <= min(b, d):
        raise ValueError(f"rank k={k} outside [1, {min(b, d)}] for prompt {p.shape}")
    # The probe is drawn even for a zero prompt so the stream advances identically.
    probe = rng.normal((d, k))
    if not np.any(p):
        zeros = np.zeros
        return FactoredPrompt(zeros((b, k)), zeros((k, d)), zeros((b, d)))
    u = qr_orthonormalize(p @ probe)
    v = u.T @ p
    r = p - u @ v
    return FactoredPrompt(u, v, r)


def reconstruct_gradient(grad_u, grad_v, u, v) -> np.ndarray:
    """Full-rank gradient from factor gradients:
    ``grad_u v + u grad_v - u u^T grad_u v``.
    """
    grad_u = np.asarray(grad_u, dtype=np.float64)
    grad_v = np.asarray(grad_v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    b, k = u.shape
    if v.shape[0] != k or grad_u.shape != (b, k) or grad_v.shape != v.shape:
        raise ValueError(
            "reconstruct_gradient shape mismatch: "
            f"grad_u {grad_u.shape}, grad_v {grad_v.shape}, u {u.shape}, v {v.shape}"
        )
    gu_v = grad_u @ v
    return gu_v + u @ grad_v - u @ (u.T @ gu_v)
