"""Activation-aware weight scaling.

Weights act as ``x @ w`` with ``w`` of shape (in_channels, out_channels).
Rows of ``w`` are scaled by the l2 norm of the matching activation channel
before decomposition; inference divides the activations back out.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch
from .linalg import as_matrix

CLAMP_RELATIVE = 1e-8


def compute_scaling(x) -> np.ndarray:
    """Per-channel l2 norms of calibration activations ``x`` (p x m).

    Dead channels are clamped to ``1e-8 * max(s)`` (or ``1e-8`` when every
    channel is zero) so ``1 / s`` stays finite.
    """
    x = as_matrix(x)
    s = np.sqrt(np.einsum("ij,ij->j", x, x))
    top = s.max()
    floor = CLAMP_RELATIVE * top if top > 0 else CLAMP_RELATIVE
    return np.maximum(s, floor)


def _check_scaling(s, m: int) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != m:
        raise DimensionMismatch(f"scaling vector of shape {s.shape} does not match {m} input channels")
    if not np.all(s > 0) or not np.all(np.isfinite(s)):
        raise ValueError("scaling vector must be finite and strictly positive")
    return s


def apply_scaling(w, s) -> np.ndarray:
    """Return ``diag(s) @ w``."""
    w = as_matrix(w)
    s = _check_scaling(s, w.shape[0])
    return w * s[:, None]


def unapply_scaling(w_scaled, s) -> np.ndarray:
    """Return ``diag(1/s) @ w_scaled``, the inference-ready weight."""
    w_scaled = as_matrix(w_scaled)
    s = _check_scaling(s, w_scaled.shape[0])
    return w_scaled / s[:, None]


def scaled_product(x, s, w_scaled) -> np.ndarray:
    """Compute ``(x @ diag(1/s)) @ w_scaled``."""
    x = as_matrix(x)
    w_scaled = as_matrix(w_scaled)
    if x.shape[1] != w_scaled.shape[0]:
        raise DimensionMismatch(f"cannot multiply {x.shape} by {w_scaled.shape}")
    s = _check_scaling(s, w_scaled.shape[0])
    return (x / s) @ w_scaled
