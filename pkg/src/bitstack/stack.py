"""Ordering residual blocks of every weight into one universal stack.

Strategies:

* ``average`` -- round i scores each weight's block i on top of a model with
  every stack at level i-1, then appends round i in ascending score order.
  Any prefix keeps per-weight levels within 1 of each other.
* ``greedy`` -- scores each (weight, level) with all other stacks frozen at
  ``n // 2``, then merges by score under per-weight precedence.
* ``random`` -- a seeded uniform interleaving of the per-weight chains.

An evaluator is any callable ``evaluate(weights, levels) -> float`` where
``weights`` maps :class:`WeightId` to the reconstructed (scaled) matrix and
``levels`` maps it to the number of loaded blocks. Lower is better.
"""

from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np

from ._parallel import pmap
from .avd import WeightId, WeightStack
from .errors import EvaluatorFailure

Evaluator = Callable[[Mapping[WeightId, np.ndarray], Mapping[WeightId, int]], float]
BlockRef = tuple[WeightId, int]

STRATEGIES = ("average", "greedy", "random")


@dataclass(frozen=True)
class UniversalStack:
    order: tuple[BlockRef, ...]
    strategy: str  # one of STRATEGIES, or "none" for unsorted
    scores: tuple[float | None, ...]
    weights: tuple[WeightId, ...]
    n_iters: int

    def __len__(self) -> int:
        return len(self.order)


class Violation(NamedTuple):
    kind: str  # coverage | monotonicity | layering | score_order
    position: int
    ref: BlockRef | None
    detail: str


def _by_weight(stacks) -> dict[WeightId, WeightStack]:
    if isinstance(stacks, Mapping):
        stacks = stacks.values()
    table = {s.weight: s for s in stacks}
    if not table:
        raise ValueError("no weight stacks given")
    n = {s.n_iters for s in table.values()}
    if len(n) != 1:
        raise ValueError(f"weight stacks have unequal lengths {sorted(n)}")
    return dict(sorted(table.items()))


def _score(evaluate: Evaluator, weight: WeightId, weights, levels) -> float:
    try:
        value = float(evaluate(weights, levels))
    except Exception as exc:  # noqa: BLE001
        raise EvaluatorFailure(weight, exc) from exc
    if not np.isfinite(value):
        raise EvaluatorFailure(weight, ValueError(f"non-finite score {value}"))
    return value


def unsorted_stack(stacks) -> UniversalStack:
    """Weight-major iteration order, as written before sorting."""
    table = _by_weight(stacks)
    n = next(iter(table.values())).n_iters
    order = tuple((w, i) for w in table for i in range(1, n + 1))
    return UniversalStack(order, "none", (None,) * len(order), tuple(table), n)


def sort_average(stacks, evaluate: Evaluator) -> UniversalStack:
    table = _by_weight(stacks)
    ids = list(table)
    n = table[ids[0]].n_iters
    current = {w: np.zeros(table[w].shape) for w in ids}
    order: list[BlockRef] = []
    scores: list[float] = []
    for i in range(1, n + 1):
        base_levels = {w: i - 1 for w in ids}

        def score_candidate(w, i=i, base_levels=base_levels):
            weights = dict(current)
            weights[w] = current[w] + table[w].blocks[i - 1].restored
            levels = dict(base_levels)
            levels[w] = i
            return _score(evaluate, w, weights, levels)

        round_scores = pmap(score_candidate, ids)
        ranked = sorted(zip(round_scores, ids))
        for s, w in ranked:
            order.append((w, i))
            scores.append(s)
            table[w].blocks[i - 1].importance = s
        for w in ids:
            current[w] = current[w] + table[w].blocks[i - 1].restored
    return UniversalStack(tuple(order), "average", tuple(scores), tuple(ids), n)


def _merge_with_precedence(ids, n: int, score: Mapping[BlockRef, float]) -> list[BlockRef]:
    """Smallest-score-first topological order of the per-weight chains."""
    heap = [(score[(w, 1)], w, 1) for w in ids]
    heapq.heapify(heap)
    out = []
    while heap:
        _, w, t = heapq.heappop(heap)
        out.append((w, t))
        if t < n:
            heapq.heappush(heap, (score[(w, t + 1)], w, t + 1))
    return out


def sort_greedy(stacks, evaluate: Evaluator) -> UniversalStack:
    table = _by_weight(stacks)
    ids = list(table)
    n = table[ids[0]].n_iters
    frozen = n // 2
    partial = {}
    for w in ids:
        acc = np.zeros(table[w].shape)
        sums = [acc]
        for block in table[w].blocks:
            acc = acc + block.restored
            sums.append(acc)
        partial[w] = sums

    refs = [(w, t) for w in ids for t in range(1, n + 1)]

    def score_ref(ref):
        w, t = ref
        weights = {v: partial[v][frozen] for v in ids}
        weights[w] = partial[w][t]
        levels = {v: frozen for v in ids}
        levels[w] = t
        return _score(evaluate, w, weights, levels)

    score = dict(zip(refs, pmap(score_ref, refs)))
    for (w, t), s in score.items():
        table[w].blocks[t - 1].importance = s
    order = _merge_with_precedence(ids, n, score)
    return UniversalStack(tuple(order), "greedy", tuple(score[r] for r in order), tuple(ids), n)


def sort_random(stacks, seed: int) -> UniversalStack:
    table = _by_weight(stacks)
    ids = list(table)
    n = table[ids[0]].n_iters
    labels = np.repeat(np.arange(len(ids)), n)
    labels = labels[np.random.default_rng(seed).permutation(labels.size)]
    next_level = [1] * len(ids)
    order = []
    for j in labels:
        order.append((ids[j], next_level[j]))
        next_level[j] += 1
    return UniversalStack(tuple(order), "random", (None,) * len(order), tuple(ids), n)


def sort_stacks(stacks, strategy: str, evaluate: Evaluator | None = None, seed: int = 0) -> UniversalStack:
    if strategy == "average":
        return sort_average(stacks, evaluate)
    if strategy == "greedy":
        return sort_greedy(stacks, evaluate)
    if strategy == "random":
        return sort_random(stacks, seed)
    raise ValueError(f"unknown sort strategy {strategy!r}; expected one of {STRATEGIES}")


def verify_order(u: UniversalStack) -> list[Violation]:
    """Check coverage, per-weight monotonicity and, for ``average``, layering
    and within-round score order. An empty list means the stack is valid."""
    report: list[Violation] = []
    known = set(u.weights)
    expected = {(w, i) for w in u.weights for i in range(1, u.n_iters + 1)}
    counts = Counter(u.order)
    for pos, ref in enumerate(u.order):
        if ref not in expected:
            report.append(Violation("coverage", pos, ref, "unknown block reference"))
        elif counts[ref] > 1:
            report.append(Violation("coverage", pos, ref, f"appears {counts[ref]} times"))
    for ref in sorted(expected - set(counts)):
        report.append(Violation("coverage", -1, ref, "missing from order"))

    # block i is in place iff exactly levels 1..i-1 of its weight precede it
    count = {w: 0 for w in known}
    highest = {w: 0 for w in known}
    for pos, (w, i) in enumerate(u.order):
        if w not in count:
            continue
        if i != count[w] + 1 or highest[w] >= i:
            report.append(
                Violation("monotonicity", pos, (w, i), f"preceded by {count[w]} blocks of this weight, highest level {highest[w]}")
            )
        count[w] += 1
        highest[w] = max(highest[w], i)

    if u.strategy == "average":
        top = 0
        for pos, (w, i) in enumerate(u.order):
            if i < top:
                report.append(Violation("layering", pos, (w, i), f"iteration {i} after an iteration-{top} block"))
            top = max(top, i)
        if len(u.scores) == len(u.order):
            for pos in range(1, len(u.order)):
                (_, i0), (_, i1) = u.order[pos - 1], u.order[pos]
                s0, s1 = u.scores[pos - 1], u.scores[pos]
                if i0 == i1 and s0 is not None and s1 is not None and s1 < s0:
                    report.append(Violation("score_order", pos, u.order[pos], f"score {s1} below preceding {s0}"))
    return report


def prefix_levels(u: UniversalStack, prefix_len: int) -> dict[WeightId, int]:
    levels = {w: 0 for w in u.weights}
    for w, _ in u.order[:prefix_len]:
        levels[w] += 1
    return levels


def max_prefix_spread(u: UniversalStack) -> int:
    """Largest (max level - min level) over all prefixes of ``u``."""
    levels = {w: 0 for w in u.weights}
    worst = 0
    for w, _ in u.order:
        levels[w] += 1
        vals = levels.values()
        worst = max(worst, max(vals) - min(vals))
    return worst


def iter_blocks(stacks, u: UniversalStack) -> Iterable:
    table = _by_weight(stacks)
    for w, i in u.order:
        yield table[w].blocks[i - 1]
