"""Residual-block size arithmetic shared by ``avd``, ``loader`` and ``store``."""

from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal

MIB = 1 << 20

FACTOR_BITS = {"half": 16, "single": 32}


def block_size_bits(m: int, n: int, k: int, factor_bits: int = 16) -> int:
    """Sign bits plus two rank-k factors: ``m*n + factor_bits*k*(m+n)``."""
    if m <= 0 or n <= 0 or k <= 0:
        raise ValueError(f"dimensions must be positive, got m={m}, n={n}, k={k}")
    return m * n + factor_bits * k * (m + n)


def block_size_bytes(bits: int) -> int:
    return (bits + 7) // 8


def mib(nbytes: int, places: int = 2) -> Decimal:
    """Bytes to MiB, rounded half-up (29.125 -> 29.13, as tables print it)."""
    q = Decimal(1).scaleb(-places)
    return (Decimal(nbytes) / Decimal(MIB)).quantize(q, rounding=ROUND_HALF_UP)
