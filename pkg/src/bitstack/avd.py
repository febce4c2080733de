"""Absolute value decomposition and its iterated residual form.

One step factors a residual ``R`` as ``sign(R) * (A @ B.T)`` where ``A @ B.T``
is the rank-k SVD truncation of ``|R|``. Factors are rounded to the storage
precision *before* the next residual is formed, so the residual chain corrects
exactly what is stored. Rounding only at write time would instead let the
rounding error of every block accumulate uncorrected in the reconstruction,
and in-memory and on-disk models would differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from ._sizes import FACTOR_BITS, block_size_bits
from .errors import LevelOutOfRange, PrecisionOverflow
from .linalg import as_matrix, rank_k_factors
from .signpack import PackedSignMatrix, pack, sign_split, unpack

STORAGE_DTYPES = {"half": np.float16, "single": np.float32}

DEFAULT_N_ITERS = 16
DEFAULT_K = 16


@dataclass(frozen=True, order=True)
class WeightId:
    """Identifies one weight matrix. Ordering (layer, role) is the tie-break order."""

    layer: int
    role: str

    def __str__(self) -> str:
        return f"{self.layer}.{self.role}"


class BlockPayload(NamedTuple):
    signs: PackedSignMatrix
    left: np.ndarray  # m x k, storage dtype
    right: np.ndarray  # n x k, storage dtype


@dataclass(eq=False)
class ResidualBlock:
    weight: WeightId
    iteration: int  # 1-based
    signs: PackedSignMatrix
    left: np.ndarray
    right: np.ndarray
    precision: str = "half"
    importance: float | None = field(default=None)

    @property
    def shape(self) -> tuple[int, int]:
        return self.signs.rows, self.signs.cols

    @property
    def k(self) -> int:
        return self.left.shape[1]

    @property
    def size_bits(self) -> int:
        m, n = self.shape
        return block_size_bits(m, n, self.k, FACTOR_BITS[self.precision])

    @property
    def ref(self) -> tuple[WeightId, int]:
        return self.weight, self.iteration

    @cached_property
    def restored(self) -> np.ndarray:
        """The dense float64 contribution ``sign * (left @ right.T)``."""
        return restore(self.signs, self.left, self.right)


@dataclass(eq=False)
class WeightStack:
    weight: WeightId
    shape: tuple[int, int]
    blocks: list[ResidualBlock]

    @property
    def n_iters(self) -> int:
        return len(self.blocks)


def restore(signs: PackedSignMatrix, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    mag = left.astype(np.float64) @ right.astype(np.float64).T
    return unpack(signs) * mag


def _round_to_storage(a: np.ndarray, precision: str) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = a.astype(STORAGE_DTYPES[precision])
    if not np.all(np.isfinite(out)):
        raise PrecisionOverflow(
            f"factor magnitude {np.abs(a).max():.4g} overflows {precision} precision"
        )
    return out


def avd_step(residual, k: int, precision: str = "half") -> tuple[BlockPayload, np.ndarray]:
    """One absolute value decomposition of ``residual``.

    Returns the stored payload and the next residual, computed from the
    rounded factors.
    """
    residual = as_matrix(residual)
    signs, mag = sign_split(residual)
    a, b = rank_k_factors(mag, k)
    left = _round_to_storage(a, precision)
    right = _round_to_storage(b, precision)
    packed = pack(signs)
    new_residual = residual - signs * (left.astype(np.float64) @ right.astype(np.float64).T)
    return BlockPayload(packed, left, right), new_residual


def decompose_weight(
    w_scaled,
    n_iters: int = DEFAULT_N_ITERS,
    k: int = DEFAULT_K,
    precision: str = "half",
    weight: WeightId | None = None,
) -> WeightStack:
    """Iterated AVD: ``n_iters`` residual blocks whose partial sums approach ``w_scaled``."""
    if n_iters < 1:
        raise ValueError("n_iters must be at least 1")
    if precision not in STORAGE_DTYPES:
        raise ValueError(f"unknown precision {precision!r}")
    weight = weight if weight is not None else WeightId(0, "lin0")
    residual = as_matrix(w_scaled)
    blocks = []
    for i in range(1, n_iters + 1):
        payload, residual = avd_step(residual, k, precision)
        blocks.append(ResidualBlock(weight, i, payload.signs, payload.left, payload.right, precision))
    return WeightStack(weight, residual.shape, blocks)


def reconstruct(stack: WeightStack, level: int) -> np.ndarray:
    """Sum of the first ``level`` restored blocks (zero matrix at level 0)."""
    if not 0 <= level <= stack.n_iters:
        raise LevelOutOfRange(f"level {level} outside [0, {stack.n_iters}] for {stack.weight}")
    out = np.zeros(stack.shape)
    for block in stack.blocks[:level]:
        out += block.restored
    return out
