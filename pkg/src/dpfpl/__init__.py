"""Desk-scale simulator for differentially private federated prompt learning."""

from .numeric import RngStream, frobenius_norm, gaussian_matrix, matmul, qr_orthonormalize
from .factorization import FactoredPrompt, factorize, reconstruct_gradient
from .privacy import NoiseScales, PrivacySpec, account, calibrate_sigma, clip, privatize

__version__ = "0.1.0"

__all__ = [
    "RngStream",
    "matmul",
    "frobenius_norm",
    "gaussian_matrix",
    "qr_orthonormalize",
    "FactoredPrompt",
    "factorize",
    "reconstruct_gradient",
    "PrivacySpec",
    "NoiseScales",
    "calibrate_sigma",
    "clip",
    "privatize",
    "account",
]
