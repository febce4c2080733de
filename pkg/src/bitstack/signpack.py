"""Sign/magnitude split and 1-bit sign packing.

Bit layout (frozen, part of the container format): element ``i`` in
row-major order lives in byte ``i // 8`` at bit ``i % 8`` (LSB first);
1 encodes +1, 0 encodes -1, trailing pad bits are zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MalformedBuffer
from .linalg import as_matrix


@dataclass(frozen=True)
class PackedSignMatrix:
    rows: int
    cols: int
    bits: bytes

    @property
    def nbytes(self) -> int:
        return len(self.bits)


def packed_length(rows: int, cols: int) -> int:
    return (rows * cols + 7) // 8


def sign_split(w) -> tuple[np.ndarray, np.ndarray]:
    """Split ``w`` into (signs, magnitudes); zero maps to +1."""
    w = as_matrix(w)
    signs = np.where(w >= 0, 1, -1).astype(np.int8)
    return signs, np.abs(w)


def pack(signs) -> PackedSignMatrix:
    s = np.asarray(signs)
    if s.ndim != 2:
        raise ValueError("sign matrix must be 2-D")
    if not np.all((s == 1) | (s == -1)):
        raise ValueError("sign matrix entries must be +1 or -1")
    bits = np.packbits((s > 0).ravel(), bitorder="little")
    return PackedSignMatrix(s.shape[0], s.shape[1], bits.tobytes())


def unpack(p: PackedSignMatrix) -> np.ndarray:
    """Inverse of :func:`pack`; returns an int8 matrix of +1/-1."""
    count = p.rows * p.cols
    if len(p.bits) != packed_length(p.rows, p.cols):
        raise MalformedBuffer(
            f"{len(p.bits)} bytes for a {p.rows}x{p.cols} sign matrix, "
            f"expected {packed_length(p.rows, p.cols)}"
        )
    raw = np.frombuffer(p.bits, dtype=np.uint8)
    flat = np.unpackbits(raw, bitorder="little")
    if flat[count:].any():
        raise MalformedBuffer("nonzero pad bits in packed sign matrix")
    signs = flat[:count].astype(np.int8) * 2 - 1
    return signs.reshape(p.rows, p.cols)
