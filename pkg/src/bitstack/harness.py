"""Desk-scale experiment harness.

The reference network has ``layers`` residual layers, each a chain of
``maps_per_layer`` square linear maps with tanh between them::

    a_1 = h;  a_{j+1} = tanh(a_j @ W_j);  f(h) = a_M @ W_M;  h <- h + f(h)

Its output is the accumulated update ``sum_l f_l(h_l)`` (the final residual
stream minus the input), so an all-zero model outputs exactly zero. The
surrogate score is the mean squared difference between the original and a
compressed network's outputs on calibration inputs.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .avd import WeightId, WeightStack, decompose_weight
from ._parallel import pmap
from .errors import BadConfig, CorruptRecord, ShapeMismatch, TruncatedStream, BadMagic, VersionMismatch
from .loader import LoadedModel, apply_plan, block_sizes, resolve_budget
from .scaling import apply_scaling, compute_scaling
from .stack import UniversalStack


@dataclass(frozen=True)
class NetworkConfig:
    layers: int = 4
    maps_per_layer: int = 2
    hidden: int = 64

    def validate(self) -> "NetworkConfig":
        for name in ("layers", "maps_per_layer", "hidden"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise BadConfig(f"{name} must be a positive integer, got {value!r}")
        return self

    def weight_ids(self) -> list[WeightId]:
        return [WeightId(l, f"lin{j}") for l in range(self.layers) for j in range(self.maps_per_layer)]


@dataclass(eq=False)
class ReferenceNetwork:
    config: NetworkConfig
    weights: dict[WeightId, np.ndarray]

    def forward(self, x, weights: Mapping[WeightId, np.ndarray] | None = None) -> np.ndarray:
        return self._run(x, weights, None)

    def activations(self, x) -> dict[WeightId, np.ndarray]:
        """Input matrix seen by every linear map when running on ``x``."""
        seen: dict[WeightId, np.ndarray] = {}
        self._run(x, None, seen)
        return seen

    def with_weights(self, weights: Mapping[WeightId, np.ndarray]) -> "ReferenceNetwork":
        return ReferenceNetwork(self.config, dict(weights))

    def _run(self, x, weights, record):
        w = self.weights if weights is None else weights
        cfg = self.config
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != cfg.hidden:
            raise ShapeMismatch(f"input of shape {h.shape} does not match hidden size {cfg.hidden}")
        out = np.zeros_like(h)
        for l in range(cfg.layers):
            a = h
            for j in range(cfg.maps_per_layer):
                wid = WeightId(l, f"lin{j}")
                if record is not None:
                    record[wid] = a
                z = a @ w[wid]
                a = np.tanh(z) if j < cfg.maps_per_layer - 1 else z
            out = out + a
            h = h + a
        return out


def build_reference_network(config: NetworkConfig | None = None, seed: int = 0) -> ReferenceNetwork:
    config = (config or NetworkConfig()).validate()
    rng = np.random.default_rng(seed)
    d = config.hidden
    weights = {wid: rng.standard_normal((d, d)) / math.sqrt(d) for wid in config.weight_ids()}
    return ReferenceNetwork(config, weights)


def make_calibration(rows: int = 256, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Gaussian inputs with log-normal per-channel scales (a few outlier channels)."""
    if rows < 1 or dim < 1:
        raise BadConfig("calibration batch needs at least one row and one channel")
    rng = np.random.default_rng(seed)
    channel_scale = np.exp(0.75 * rng.standard_normal(dim))
    return rng.standard_normal((rows, dim)) * channel_scale


def collect_activations(net: ReferenceNetwork, calib) -> dict[WeightId, np.ndarray]:
    return net.activations(calib)


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float(np.mean(diff * diff))


def surrogate_score(net_original: ReferenceNetwork, net_compressed: ReferenceNetwork, calib) -> float:
    if net_original.config != net_compressed.config:
        raise ShapeMismatch("networks have different architectures")
    for wid, w in net_original.weights.items():
        if net_compressed.weights[wid].shape != w.shape:
            raise ShapeMismatch(f"weight {wid} has shape {net_compressed.weights[wid].shape}, expected {w.shape}")
    return _mse(net_original.forward(calib), net_compressed.forward(calib))


class SurrogateEvaluator:
    """Scores scaled reconstructions against the original network's outputs."""

    def __init__(self, net: ReferenceNetwork, scalings: Mapping[WeightId, np.ndarray], calib):
        self.net = net
        self.scalings = dict(scalings)
        self.calib = np.asarray(calib, dtype=np.float64)
        self.reference = net.forward(self.calib)

    def __call__(self, weights: Mapping[WeightId, np.ndarray], levels: Mapping[WeightId, int] | None = None) -> float:
        effective = {w: m / self.scalings[w][:, None] for w, m in weights.items()}
        return _mse(self.reference, self.net.forward(self.calib, effective))

    def score_loaded(self, model: LoadedModel) -> float:
        return self(model.matrices)

    @property
    def zero_score(self) -> float:
        return float(np.mean(self.reference * self.reference))


def compress_network(
    net: ReferenceNetwork, calib, n_iters: int = 16, k: int = 16, precision: str = "half"
) -> tuple[dict[WeightId, WeightStack], dict[WeightId, np.ndarray]]:
    """Scale every weight by its calibration activation norms, then decompose."""
    acts = collect_activations(net, calib)
    scalings = {wid: compute_scaling(acts[wid]) for wid in net.weights}
    ids = sorted(net.weights)

    def run(wid):
        return decompose_weight(apply_scaling(net.weights[wid], scalings[wid]), n_iters, k, precision, wid)

    stacks = dict(zip(ids, pmap(run, ids)))
    return stacks, scalings


# -- budget sweeps ---------------------------------------------------------

SWEEP_COLUMNS = ("budget_bytes", "loaded_bytes", "prefix_len", "degenerate", "eval_score")


class SweepRow(NamedTuple):
    budget_bytes: int
    loaded_bytes: int
    prefix_len: int
    degenerate: bool
    eval_score: float


def sweep_grid(total_bytes: int, points: int = 50) -> list[int]:
    """``points`` evenly spaced budgets ending at ``total_bytes``."""
    if points < 1:
        raise BadConfig("a sweep needs at least one point")
    return [-(-total_bytes * j // points) for j in range(1, points + 1)]


def budget_sweep(
    stacks: Mapping[WeightId, WeightStack],
    universal: UniversalStack,
    scalings: Mapping[WeightId, np.ndarray],
    evaluator: SurrogateEvaluator,
    budgets: Iterable[int],
) -> list[SweepRow]:
    sizes = block_sizes(stacks)
    model = None
    rows = []
    for budget in budgets:
        plan = resolve_budget(universal, sizes, int(budget))
        if model is None:
            model = LoadedModel.from_plan(stacks, universal, scalings, plan)
        else:
            model, _ = apply_plan(model, plan)
        rows.append(SweepRow(plan.budget_bytes, plan.total_bytes, plan.prefix_len, plan.degenerate, evaluator.score_loaded(model)))
    return rows


def format_sweep_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([r.budget_bytes, r.loaded_bytes, r.prefix_len, str(r.degenerate).lower(), repr(r.eval_score)])
    return buf.getvalue()


def parse_sweep_csv(text: str) -> list[SweepRow]:
    reader = csv.DictReader(io.StringIO(text))
    return [
        SweepRow(int(r["budget_bytes"]), int(r["loaded_bytes"]), int(r["prefix_len"]), r["degenerate"] == "true", float(r["eval_score"]))
        for r in reader
    ]


# -- matrix files ----------------------------------------------------------
#
# "BMAT" v1, all little-endian:
#   0  4  magic b"BMAT"
#   4  2  version u16 (=1)
#   6  1  dtype u8 (1 = float64)
#   7  1  reserved (=0)
#   8  4  rows u32
#  12  4  cols u32
#  16  .. rows*cols float64, row-major

MATRIX_MAGIC = b"BMAT"
_MATRIX_HEADER = struct.Struct("<4sHBBII")


def matrix_to_bytes(m) -> bytes:
    a = np.asarray(m, dtype="<f8")
    if a.ndim != 2:
        raise ShapeMismatch("only 2-D matrices can be written")
    return _MATRIX_HEADER.pack(MATRIX_MAGIC, 1, 1, 0, a.shape[0], a.shape[1]) + a.tobytes(order="C")


def matrix_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _MATRIX_HEADER.size:
        raise TruncatedStream("matrix header incomplete", len(data))
    magic, version, dtype, _, rows, cols = _MATRIX_HEADER.unpack_from(data)
    if magic != MATRIX_MAGIC:
        raise BadMagic(f"expected {MATRIX_MAGIC!r}, found {magic!r}")
    if version != 1:
        raise VersionMismatch(f"matrix file version {version} not supported")
    if dtype != 1:
        raise CorruptRecord(f"unknown dtype code {dtype}", 6)
    need = _MATRIX_HEADER.size + rows * cols * 8
    if len(data) < need:
        raise TruncatedStream(f"matrix body needs {need} bytes", len(data))
    a = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=_MATRIX_HEADER.size)
    a = a.astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(a)):
        raise CorruptRecord("matrix contains non-finite values", _MATRIX_HEADER.size)
    return a


def write_matrix(path, m) -> None:
    Path(path).write_bytes(matrix_to_bytes(m))


def read_matrix(path) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes())


def load_network(path, config: NetworkConfig) -> ReferenceNetwork:
    """Load weights saved with :func:`save_network` (``.npz``, keys ``"<layer>.<role>"``)."""
    config.validate()
    with np.load(path) as data:
        weights = {}
        for wid in config.weight_ids():
            key = str(wid)
            if key not in data:
                raise BadConfig(f"weight file {path} lacks {key}")
            w = np.asarray(data[key], dtype=np.float64)
            if w.shape != (config.hidden, config.hidden):
                raise ShapeMismatch(f"{key} has shape {w.shape}, expected {(config.hidden, config.hidden)}")
            weights[wid] = w
    return ReferenceNetwork(config, weights)


def save_network(path, net: ReferenceNetwork) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **{str(w): m for w, m in sorted(net.weights.items())})
