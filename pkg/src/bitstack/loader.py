"""Memory accounting and budget-driven loading.

A budget plan is the longest prefix of a universal stack whose blocks fit in
the budget, each block costing ``ceil(size_bits / 8)`` bytes. A
:class:`LoadedModel` holds the per-weight reconstructions for one plan and is
moved between plans by adding or subtracting individual restored blocks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ._sizes import MIB, block_size_bits, block_size_bytes, mib
from .avd import WeightId, WeightStack, reconstruct
from .errors import PlanMismatch
from .scaling import unapply_scaling
from .stack import BlockRef, UniversalStack

__all__ = [
    "MIB",
    "BudgetPlan",
    "DeltaReport",
    "LoadedModel",
    "apply_plan",
    "block_size_bits",
    "block_sizes",
    "mib",
    "resolve_budget",
    "stack_fingerprint",
    "total_memory",
]


def stack_fingerprint(u: UniversalStack) -> str:
    h = hashlib.sha256()
    for w, i in u.order:
        h.update(f"{w.layer}\x00{w.role}\x00{i}\n".encode())
    return h.hexdigest()[:16]


def block_sizes(stacks) -> dict[BlockRef, int]:
    """Size in bits of every block, keyed by (weight, iteration)."""
    if isinstance(stacks, Mapping):
        stacks = stacks.values()
    return {b.ref: b.size_bits for s in stacks for b in s.blocks}


@dataclass(frozen=True)
class BudgetPlan:
    budget_bytes: int
    prefix_len: int
    per_weight_level: dict[WeightId, int]
    total_bytes: int
    block_bytes: tuple[int, ...]  # bytes of each loaded block, in stack order
    stack_id: str

    @property
    def degenerate(self) -> bool:
        return any(level == 0 for level in self.per_weight_level.values())


def resolve_budget(u: UniversalStack, sizes: Mapping[BlockRef, int], budget_bytes: int) -> BudgetPlan:
    if budget_bytes < 0:
        raise ValueError("budget must be nonnegative")
    levels = {w: 0 for w in u.weights}
    used = 0
    loaded = []
    for ref in u.order:
        cost = block_size_bytes(sizes[ref])
        if used + cost > budget_bytes:
            break
        used += cost
        loaded.append(cost)
        levels[ref[0]] += 1
    return BudgetPlan(budget_bytes, len(loaded), levels, used, tuple(loaded), stack_fingerprint(u))


def total_memory(plan: BudgetPlan) -> int:
    return sum(plan.block_bytes)


@dataclass(frozen=True)
class DeltaReport:
    loaded: tuple[BlockRef, ...]
    offloaded: tuple[BlockRef, ...]  # in pop order (top of stack first)
    bytes_moved: int

    @property
    def empty(self) -> bool:
        return not self.loaded and not self.offloaded


@dataclass(frozen=True)
class LoadedModel:
    """Level-resolved weights for one plan.

    ``matrices`` hold scaled reconstructions; :meth:`effective_weights`
    divides the scaling back out for inference. Instances are never mutated:
    :func:`apply_plan` returns a new model sharing untouched matrices.
    """

    stacks: dict[WeightId, WeightStack]
    universal: UniversalStack
    scalings: dict[WeightId, np.ndarray]
    plan: BudgetPlan
    matrices: dict[WeightId, np.ndarray] = field(repr=False)

    @classmethod
    def from_plan(cls, stacks, universal: UniversalStack, scalings, plan: BudgetPlan) -> "LoadedModel":
        if isinstance(stacks, Mapping):
            stacks = stacks.values()
        table = {s.weight: s for s in stacks}
        if plan.stack_id != stack_fingerprint(universal):
            raise PlanMismatch("plan was resolved against a different universal stack")
        mats = {w: reconstruct(table[w], plan.per_weight_level[w]) for w in universal.weights}
        return cls(table, universal, dict(scalings), plan, mats)

    def effective_weights(self) -> dict[WeightId, np.ndarray]:
        return {w: unapply_scaling(m, self.scalings[w]) for w, m in self.matrices.items()}


def apply_plan(current: LoadedModel, target: BudgetPlan) -> tuple[LoadedModel, DeltaReport]:
    """Move ``current`` to ``target`` by loading or offloading the prefix difference."""
    if target.stack_id != current.plan.stack_id:
        raise PlanMismatch(f"target plan is for stack {target.stack_id}, model holds {current.plan.stack_id}")
    order = current.universal.order
    a, b = current.plan.prefix_len, target.prefix_len
    mats = dict(current.matrices)
    touched: set[WeightId] = set()
    loaded: list[BlockRef] = []
    offloaded: list[BlockRef] = []
    moved = 0

    def working(w):
        if w not in touched:
            mats[w] = mats[w].copy()
            touched.add(w)
        return mats[w]

    if b > a:
        for ref in order[a:b]:
            block = current.stacks[ref[0]].blocks[ref[1] - 1]
            working(ref[0])[...] += block.restored
            loaded.append(ref)
            moved += block_size_bytes(block.size_bits)
    elif b < a:
        for ref in reversed(order[b:a]):
            block = current.stacks[ref[0]].blocks[ref[1] - 1]
            working(ref[0])[...] -= block.restored
            offloaded.append(ref)
            moved += block_size_bytes(block.size_bits)
    new = LoadedModel(current.stacks, current.universal, current.scalings, target, mats)
    return new, DeltaReport(tuple(loaded), tuple(offloaded), moved)
