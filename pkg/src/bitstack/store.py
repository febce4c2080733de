"""Binary container for a decomposed model (format v1, little-endian).

Layout, in file order (see docs/FORMAT.md for a worked hex dump):

header (28 bytes)
    magic ``b"BSTK"``; version u16; endian marker u16 ``0xFEFF``;
    precision u8 (0 half, 1 single); strategy u8 (0 none, 1 average,
    2 greedy, 3 random); reserved u16; n_weights, n_iters, k, config_len u32
config
    ``config_len`` bytes of compact, key-sorted UTF-8 JSON
weight table, per weight
    layer u32; role_len u16; role UTF-8; m u32; n u32; scaling m x f64
order table, n_weights * n_iters entries
    weight index u32; iteration u32; score f64 (NaN when unscored)
block records, one per order-table entry and in that order
    record_len u32 (bytes that follow, crc included); weight index u32;
    iteration u32; m, n, k u32; size_bits u64; packed signs; left m x k;
    right n x k; crc32 u32 of everything after record_len
trailer
    ``b"BIDX"``; count u32; count x u64 absolute record offsets;
    u64 absolute offset of ``b"BIDX"`` (always the final 8 bytes)

Blocks sit in universal-stack order, so any budget prefix is one contiguous
byte range.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, NamedTuple

import numpy as np

from ._sizes import FACTOR_BITS, block_size_bits
from .avd import ResidualBlock, WeightId, WeightStack
from .errors import (
    BadMagic,
    CorruptRecord,
    IoFailure,
    RangeOutOfBounds,
    TruncatedStream,
    VersionMismatch,
)
from .signpack import PackedSignMatrix, packed_length, unpack
from .stack import UniversalStack

MAGIC = b"BSTK"
FORMAT_VERSION = 1
ENDIAN_MARKER = 0xFEFF
INDEX_MAGIC = b"BIDX"

PRECISION_CODES = {"half": 0, "single": 1}
STRATEGY_CODES = {"none": 0, "average": 1, "greedy": 2, "random": 3}
_FACTOR_DTYPES = {"half": "<f2", "single": "<f4"}

_HEADER = struct.Struct("<4sHHBBHIIII")
_WEIGHT_HEAD = struct.Struct("<IH")
_DIMS = struct.Struct("<II")
_ORDER_ENTRY = struct.Struct("<IId")
_RECORD_HEAD = struct.Struct("<IIIIIQ")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

HEADER_SIZE = _HEADER.size  # 28


class WeightInfo(NamedTuple):
    weight: WeightId
    m: int
    n: int
    scaling: np.ndarray


@dataclass(eq=False)
class Container:
    config: dict
    precision: str
    n_iters: int
    k: int
    weights: list[WeightInfo]
    stacks: dict[WeightId, WeightStack]
    universal: UniversalStack

    @property
    def scalings(self) -> dict[WeightId, np.ndarray]:
        return {w.weight: w.scaling for w in self.weights}

    def blocks_in_order(self) -> list[ResidualBlock]:
        return [self.stacks[w].blocks[i - 1] for w, i in self.universal.order]


def build_container(config: dict, stacks, scalings, universal: UniversalStack, precision: str = "half") -> Container:
    table = dict(sorted(stacks.items())) if isinstance(stacks, dict) else {s.weight: s for s in sorted(stacks, key=lambda s: s.weight)}
    n_iters = universal.n_iters
    ks = {b.k for s in table.values() for b in s.blocks}
    if len(ks) > 1:
        raise ValueError(f"blocks use several ranks {sorted(ks)}; k must be global")
    k = ks.pop() if ks else 0
    infos = [WeightInfo(w, s.shape[0], s.shape[1], np.asarray(scalings[w], dtype=np.float64)) for w, s in table.items()]
    return Container(dict(config), precision, n_iters, k, infos, table, universal)


# -- writing ---------------------------------------------------------------


def _record_body(index: int, block: ResidualBlock, precision: str) -> bytes:
    m, n = block.shape
    dtype = _FACTOR_DTYPES[precision]
    body = b"".join(
        [
            _RECORD_HEAD.pack(index, block.iteration, m, n, block.k, block.size_bits),
            block.signs.bits,
            np.ascontiguousarray(block.left, dtype=dtype).tobytes(),
            np.ascontiguousarray(block.right, dtype=dtype).tobytes(),
        ]
    )
    return body + _U32.pack(zlib.crc32(body))


def serialize(c: Container) -> bytes:
    if c.precision not in PRECISION_CODES:
        raise ValueError(f"unknown precision {c.precision!r}")
    if c.universal.strategy not in STRATEGY_CODES:
        raise ValueError(f"unknown strategy {c.universal.strategy!r}")
    index_of = {info.weight: j for j, info in enumerate(c.weights)}
    if set(c.universal.weights) != set(index_of) or len(c.universal.order) != len(index_of) * c.n_iters:
        raise ValueError("universal order does not cover the container's weights")

    out = io.BytesIO()
    config = json.dumps(c.config, sort_keys=True, separators=(",", ":")).encode()
    out.write(
        _HEADER.pack(
            MAGIC, FORMAT_VERSION, ENDIAN_MARKER, PRECISION_CODES[c.precision], STRATEGY_CODES[c.universal.strategy],
            0, len(c.weights), c.n_iters, c.k, len(config),
        )
    )
    out.write(config)
    for info in c.weights:
        role = info.weight.role.encode()
        out.write(_WEIGHT_HEAD.pack(info.weight.layer, len(role)))
        out.write(role)
        out.write(_DIMS.pack(info.m, info.n))
        out.write(np.asarray(info.scaling, dtype="<f8").tobytes())
    scores = c.universal.scores if len(c.universal.scores) == len(c.universal.order) else (None,) * len(c.universal.order)
    for (w, i), s in zip(c.universal.order, scores):
        out.write(_ORDER_ENTRY.pack(index_of[w], i, math.nan if s is None else float(s)))
    offsets = []
    for w, i in c.universal.order:
        block = c.stacks[w].blocks[i - 1]
        if block.precision != c.precision:
            raise ValueError(f"block {w}/{i} stored in {block.precision}, container is {c.precision}")
        body = _record_body(index_of[w], block, c.precision)
        offsets.append(out.tell())
        out.write(_U32.pack(len(body)))
        out.write(body)
    trailer_at = out.tell()
    out.write(INDEX_MAGIC)
    out.write(_U32.pack(len(offsets)))
    for off in offsets:
        out.write(_U64.pack(off))
    out.write(_U64.pack(trailer_at))
    return out.getvalue()


def write_container(path, c: Container) -> None:
    """Write atomically: a temporary file in the same directory, then rename."""
    data = serialize(c)
    path = Path(path)
    tmp = None
    try:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# -- reading ---------------------------------------------------------------


class _Cursor:
    def __init__(self, fh: BinaryIO, size: int):
        self.fh = fh
        self.size = size

    @property
    def pos(self) -> int:
        return self.fh.tell()

    def remaining(self) -> int:
        return self.size - self.pos

    def read(self, n: int, what: str) -> bytes:
        if n > self.remaining():
            raise TruncatedStream(f"{what}: need {n} bytes, {self.remaining()} left", self.size)
        return self.fh.read(n)

    def unpack(self, st: struct.Struct, what: str) -> tuple:
        return st.unpack(self.read(st.size, what))


class _Prelude(NamedTuple):
    config: dict
    precision: str
    strategy: str
    n_iters: int
    k: int
    weights: list[WeightInfo]
    order: list[tuple[int, int]]
    scores: list[float | None]
    records_at: int


_PRECISION_NAMES = {v: k for k, v in PRECISION_CODES.items()}
_STRATEGY_NAMES = {v: k for k, v in STRATEGY_CODES.items()}


def _read_prelude(cur: _Cursor) -> _Prelude:
    if cur.remaining() < 4:
        raise TruncatedStream("header incomplete", cur.size)
    magic = cur.fh.read(4)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
    cur.fh.seek(0)
    _, version, marker, prec, strat, _, n_weights, n_iters, k, config_len = cur.unpack(_HEADER, "header")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"container format version {version}, this reader supports {FORMAT_VERSION}")
    if marker != ENDIAN_MARKER:
        raise CorruptRecord(f"bad endianness marker 0x{marker:04x}", 6)
    if prec not in _PRECISION_NAMES:
        raise CorruptRecord(f"unknown precision code {prec}", 8)
    if strat not in _STRATEGY_NAMES:
        raise CorruptRecord(f"unknown strategy code {strat}", 9)
    at = cur.pos
    try:
        config = json.loads(cur.read(config_len, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptRecord(f"config is not valid JSON ({exc})", at) from None
    if not isinstance(config, dict):
        raise CorruptRecord("config is not a JSON object", at)

    if n_weights * (_WEIGHT_HEAD.size + _DIMS.size) > cur.remaining():
        raise TruncatedStream(f"weight table for {n_weights} weights", cur.size)
    weights = []
    seen = set()
    for _ in range(n_weights):
        at = cur.pos
        layer, role_len = cur.unpack(_WEIGHT_HEAD, "weight entry")
        try:
            role = cur.read(role_len, "weight role").decode()
        except UnicodeDecodeError:
            raise CorruptRecord("weight role is not UTF-8", at) from None
        m, n = cur.unpack(_DIMS, "weight dims")
        if m == 0 or n == 0:
            raise CorruptRecord(f"weight {layer}.{role} has an empty shape", at)
        scaling = np.frombuffer(cur.read(8 * m, "scaling vector"), dtype="<f8").astype(np.float64)
        if not (np.all(np.isfinite(scaling)) and np.all(scaling > 0)):
            raise CorruptRecord(f"scaling for {layer}.{role} is not finite and positive", at)
        wid = WeightId(layer, role)
        if wid in seen:
            raise CorruptRecord(f"duplicate weight {wid}", at)
        seen.add(wid)
        weights.append(WeightInfo(wid, m, n, scaling))

    count = n_weights * n_iters
    if count * _ORDER_ENTRY.size > cur.remaining():
        raise TruncatedStream(f"order table of {count} entries", cur.size)
    order, scores, refs = [], [], set()
    for _ in range(count):
        at = cur.pos
        j, i, s = cur.unpack(_ORDER_ENTRY, "order entry")
        if j >= n_weights or not 1 <= i <= n_iters or (j, i) in refs:
            raise CorruptRecord(f"invalid order entry (weight {j}, iteration {i})", at)
        refs.add((j, i))
        order.append((j, i))
        scores.append(None if math.isnan(s) else s)
    return _Prelude(config, _PRECISION_NAMES[prec], _STRATEGY_NAMES[strat], n_iters, k, weights, order, scores, cur.pos)


def _read_record(cur: _Cursor, pre: _Prelude, position: int) -> ResidualBlock:
    start = cur.pos
    (length,) = cur.unpack(_U32, "record length")
    body = cur.read(length, f"record {position}")
    if length < _RECORD_HEAD.size + 4:
        raise CorruptRecord(f"record {position} too short ({length} bytes)", start)
    payload, (crc,) = body[:-4], _U32.unpack(body[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptRecord(f"record {position} checksum mismatch", start)
    j, i, m, n, k, size_bits = _RECORD_HEAD.unpack_from(payload)
    if (j, i) != pre.order[position]:
        raise CorruptRecord(f"record {position} is block ({j}, {i}), order table says {pre.order[position]}", start)
    info = pre.weights[j]
    if (m, n) != (info.m, info.n) or k != pre.k or k == 0 or k > min(m, n):
        raise CorruptRecord(f"record {position} has inconsistent dims m={m} n={n} k={k}", start)
    bits = FACTOR_BITS[pre.precision]
    if size_bits != block_size_bits(m, n, k, bits):
        raise CorruptRecord(f"record {position} declares {size_bits} bits, formula gives {block_size_bits(m, n, k, bits)}", start)
    nsign = packed_length(m, n)
    fbytes = bits // 8
    if len(payload) != _RECORD_HEAD.size + nsign + fbytes * k * (m + n):
        raise CorruptRecord(f"record {position} length {length} does not match its dims", start)
    off = _RECORD_HEAD.size
    signs = PackedSignMatrix(m, n, bytes(payload[off : off + nsign]))
    off += nsign
    dtype = np.dtype(_FACTOR_DTYPES[pre.precision])
    left = np.frombuffer(payload, dtype=dtype, count=m * k, offset=off).reshape(m, k).astype(dtype.newbyteorder("="))
    off += m * k * fbytes
    right = np.frombuffer(payload, dtype=dtype, count=n * k, offset=off).reshape(n, k).astype(dtype.newbyteorder("="))
    if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
        raise CorruptRecord(f"record {position} has non-finite factors", start)
    try:
        unpack(signs)
    except Exception as exc:
        raise CorruptRecord(f"record {position}: {exc}", start) from None
    return ResidualBlock(info.weight, i, signs, left, right, pre.precision, pre.scores[position])


def _read_index(cur: _Cursor, expected: int) -> tuple[list[int], int]:
    if cur.size < 8:
        raise TruncatedStream("no trailer", cur.size)
    cur.fh.seek(cur.size - 8)
    (trailer_at,) = cur.unpack(_U64, "trailer offset")
    need = len(INDEX_MAGIC) + 4 + 8 * expected + 8
    if trailer_at + need != cur.size:
        raise CorruptRecord(f"trailer offset {trailer_at} inconsistent with file size {cur.size}", cur.size - 8)
    cur.fh.seek(trailer_at)
    if cur.read(4, "index magic") != INDEX_MAGIC:
        raise CorruptRecord("missing index magic", trailer_at)
    (count,) = cur.unpack(_U32, "index count")
    if count != expected:
        raise CorruptRecord(f"index lists {count} records, expected {expected}", trailer_at + 4)
    return [cur.unpack(_U64, "index entry")[0] for _ in range(count)], trailer_at


def _open(source) -> tuple[BinaryIO, int, bool]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return io.BytesIO(bytes(source)), len(source), True
    if isinstance(source, (str, os.PathLike)):
        try:
            fh = open(source, "rb")
        except OSError as exc:
            raise IoFailure(f"cannot open {source}: {exc}") from exc
        return fh, os.fstat(fh.fileno()).st_size, True
    pos = source.seek(0, io.SEEK_END)
    source.seek(0)
    return source, pos, False


def deserialize(source) -> Container:
    """Parse a whole container from bytes, a path, or a seekable binary file."""
    fh, size, owned = _open(source)
    try:
        cur = _Cursor(fh, size)
        pre = _read_prelude(cur)
        blocks = [_read_record(cur, pre, p) for p in range(len(pre.order))]
        records_end = cur.pos
        offsets, trailer_at = _read_index(cur, len(pre.order))
        if trailer_at != records_end:
            raise CorruptRecord("unexpected bytes between records and index", records_end)
        pos = pre.records_at
        for p, off in enumerate(offsets):
            if off != pos:
                raise CorruptRecord(f"index entry {p} points at {off}, record starts at {pos}", trailer_at + 8 + 8 * p)
            pos += 4 + _RECORD_HEAD.size + 4 + len(blocks[p].signs.bits) + blocks[p].left.nbytes + blocks[p].right.nbytes
    finally:
        if owned:
            fh.close()

    ids = [w.weight for w in pre.weights]
    per_weight: dict[WeightId, list] = {w: [None] * pre.n_iters for w in ids}
    for b in blocks:
        per_weight[b.weight][b.iteration - 1] = b
    stacks = {w.weight: WeightStack(w.weight, (w.m, w.n), per_weight[w.weight]) for w in pre.weights}
    universal = UniversalStack(
        tuple((ids[j], i) for j, i in pre.order), pre.strategy, tuple(pre.scores), tuple(ids), pre.n_iters
    )
    return Container(pre.config, pre.precision, pre.n_iters, pre.k, pre.weights, stacks, universal)


class Layout(NamedTuple):
    """Everything except the block payloads: enough to plan a budget."""

    config: dict
    precision: str
    n_iters: int
    k: int
    weights: list[WeightInfo]
    universal: UniversalStack

    @property
    def scalings(self) -> dict[WeightId, np.ndarray]:
        return {w.weight: w.scaling for w in self.weights}

    def block_sizes(self) -> dict[tuple[WeightId, int], int]:
        bits = FACTOR_BITS[self.precision]
        dims = {w.weight: (w.m, w.n) for w in self.weights}
        return {ref: block_size_bits(*dims[ref[0]], self.k, bits) for ref in self.universal.order}


def read_layout(source) -> Layout:
    fh, size, owned = _open(source)
    try:
        pre = _read_prelude(_Cursor(fh, size))
    finally:
        if owned:
            fh.close()
    ids = [w.weight for w in pre.weights]
    universal = UniversalStack(
        tuple((ids[j], i) for j, i in pre.order), pre.strategy, tuple(pre.scores), tuple(ids), pre.n_iters
    )
    return Layout(pre.config, pre.precision, pre.n_iters, pre.k, pre.weights, universal)


def read_container(path) -> Container:
    return deserialize(Path(path))


def read_block_range(source, start: int, stop: int) -> list[ResidualBlock]:
    """Blocks at universal positions ``[start, stop)``, read via the offset index."""
    fh, size, owned = _open(source)
    try:
        cur = _Cursor(fh, size)
        pre = _read_prelude(cur)
        count = len(pre.order)
        if not 0 <= start <= stop <= count:
            raise RangeOutOfBounds(f"range [{start}, {stop}) outside [0, {count}]")
        if start == stop:
            return []
        offsets, _ = _read_index(cur, count)
        fh.seek(offsets[start])
        return [_read_record(cur, pre, p) for p in range(start, stop)]
    finally:
        if owned:
            fh.close()
