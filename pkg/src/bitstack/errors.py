"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can print a
single parseable line and map it to an exit status.
"""

from __future__ import annotations


class BitStackError(Exception):
    code = "BITSTACK_ERROR"
    exit_status = 1


# linalg
class NonConvergence(BitStackError):
    code = "NON_CONVERGENCE"

    def __init__(self, sweeps: int, off_diagonal: float):
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(max relative off-diagonal {off_diagonal:.3e})"
        )
        self.sweeps = sweeps
        self.off_diagonal = off_diagonal


class InvalidRank(BitStackError, ValueError):
    code = "INVALID_RANK"


class DimensionMismatch(BitStackError, ValueError):
    code = "DIMENSION_MISMATCH"


class NonFiniteInput(BitStackError, ValueError):
    code = "NON_FINITE"


# signpack / avd
class MalformedBuffer(BitStackError, ValueError):
    code = "MALFORMED_BUFFER"


class PrecisionOverflow(BitStackError, OverflowError):
    code = "PRECISION_OVERFLOW"


class LevelOutOfRange(BitStackError, IndexError):
    code = "LEVEL_OUT_OF_RANGE"


# stack / loader
class EvaluatorFailure(BitStackError):
    code = "EVALUATOR_FAILURE"

    def __init__(self, weight, cause: BaseException):
        super().__init__(f"evaluator failed while scoring {weight}: {cause!r}")
        self.weight = weight


class PlanMismatch(BitStackError, ValueError):
    code = "PLAN_MISMATCH"


# store
class StoreError(BitStackError):
    code = "STORE_ERROR"
    exit_status = 3


class BadMagic(StoreError):
    code = "BAD_MAGIC"


class VersionMismatch(StoreError):
    code = "VERSION_MISMATCH"


class CorruptRecord(StoreError):
    code = "CORRUPT_RECORD"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TruncatedStream(StoreError):
    code = "TRUNCATED_STREAM"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (stream ends at byte offset {offset})")
        self.offset = offset


class RangeOutOfBounds(StoreError, IndexError):
    code = "RANGE_OUT_OF_BOUNDS"


class IoFailure(StoreError, OSError):
    code = "IO_FAILURE"


# harness / cli
class BadConfig(BitStackError, ValueError):
    code = "BAD_CONFIG"
    exit_status = 2


class ShapeMismatch(BitStackError, ValueError):
    code = "SHAPE_MISMATCH"
