"""Any-size weight compression with sorted ~1-bit residual blocks.

Weights are scaled by calibration activation norms, decomposed into
``sign * low-rank`` residual blocks, ordered into one universal stack, and
reloaded for any byte budget as a prefix of that stack.
"""

from ._backend import BACKEND
from .avd import ResidualBlock, WeightId, WeightStack, avd_step, decompose_weight, reconstruct
from .linalg import SvdResult, frobenius_norm, rank_k_factors, svd
from .loader import BudgetPlan, LoadedModel, apply_plan, block_size_bits, resolve_budget, total_memory
from .scaling import apply_scaling, compute_scaling, scaled_product
from .signpack import PackedSignMatrix, pack, sign_split, unpack
from .stack import UniversalStack, sort_average, sort_greedy, sort_random, verify_order

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BudgetPlan",
    "LoadedModel",
    "PackedSignMatrix",
    "ResidualBlock",
    "SvdResult",
    "UniversalStack",
    "WeightId",
    "WeightStack",
    "apply_plan",
    "apply_scaling",
    "avd_step",
    "block_size_bits",
    "compute_scaling",
    "decompose_weight",
    "frobenius_norm",
    "pack",
    "rank_k_factors",
    "reconstruct",
    "resolve_budget",
    "scaled_product",
    "sign_split",
    "sort_average",
    "sort_greedy",
    "sort_random",
    "svd",
    "total_memory",
    "unpack",
    "verify_order",
]
