"""Checkpoint container and packed N:M structured-sparse tensors.

GLUE file layout (little-endian)::

    "GLUE" | u32 version (=1) | u32 tensor count
    per tensor:
        u16 name length | UTF-8 name | u8 kind (0 dense, 1 N:M)
        u8 dtype (0 f32, 1 f64) | u8 N | u8 M | u64 rows | u64 cols | payload
    u32 block length | UTF-8 key=value block (topology + metadata)

Dense payloads are row-major values. N:M payloads are the kept values
(row-major, group-major within a row) followed by the packed index metadata:
``ceil(log2(M))`` bits per kept index, LSB-first, each row padded to a whole
number of bytes.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DimensionError, FormatError, StorageError, PatternError, TopologyError, ValidationError

MAGIC = b"GLUE"
VERSION = 1
MAX_ELEMENTS = 1 << 40

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
LAYER_KINDS = ("linear", "nonlinearity", "embedding")


def index_bits(group: int) -> int:
    return max(1, math.ceil(math.log2(group)))


def meta_row_bytes(cols: int, n_keep: int, group: int) -> int:
    return ((cols // group) * n_keep * index_bits(group) + 7) // 8


def _pack_indices(idx: np.ndarray, group: int) -> np.ndarray:
    """Pack ``(rows, k)`` small integers into ``(rows, nbytes)`` uint8."""
    rows, k = idx.shape
    b = index_bits(group)
    bits = ((idx[..., None].astype(np.uint16) >> np.arange(b, dtype=np.uint16)) & 1).astype(np.uint8)
    bits = bits.reshape(rows, k * b)
    width = ((k * b + 7) // 8) * 8
    padded = np.zeros((rows, width), dtype=np.uint8)
    padded[:, : k * b] = bits
    return np.packbits(padded, axis=1, bitorder="little")


def _unpack_indices(meta: np.ndarray, k: int, group: int) -> np.ndarray:
    b = index_bits(group)
    bits = np.unpackbits(meta, axis=1, bitorder="little")[:, : k * b]
    bits = bits.reshape(meta.shape[0], k, b).astype(np.int64)
    return (bits << np.arange(b)).sum(axis=2)


@dataclass(eq=False)
class NMSparseMatrix:
    """Row-wise N:M structured-sparse matrix.

    ``values`` has shape ``(rows, cols // group * n_keep)``; ``meta`` is the
    packed per-row index bitstream, shape ``(rows, meta_row_bytes)``.
    """

    rows: int
    cols: int
    n_keep: int
    group: int
    values: np.ndarray
    meta: np.ndarray
    _indices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.group < 2 or not 1 <= self.n_keep <= self.group:
            raise ValidationError(f"invalid pattern {self.n_keep}:{self.group}")
        if self.cols % self.group:
            raise DimensionError(f"cols={self.cols} not divisible by group={self.group}")
        k = self.cols // self.group * self.n_keep
        if self.values.shape != (self.rows, k):
            raise DimensionError(f"values shape {self.values.shape} != {(self.rows, k)}")
        nbytes = meta_row_bytes(self.cols, self.n_keep, self.group)
        if self.meta.shape != (self.rows, nbytes) or self.meta.dtype != np.uint8:
            raise DimensionError(f"meta shape {self.meta.shape} != {(self.rows, nbytes)}")
        idx = _unpack_indices(self.meta, k, self.group).reshape(self.rows, -1, self.n_keep)
        if idx.size and idx.max() >= self.group:
            raise FormatError("corrupt meta: index >= group")
        if self.n_keep > 1 and np.any(np.diff(idx, axis=2) <= 0):
            raise FormatError("corrupt meta: indices not strictly increasing within a group")
        self._indices = idx

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def n_groups(self) -> int:
        return self.cols // self.group

    def indices(self) -> np.ndarray:
        """Kept positions within each group, shape ``(rows, n_groups, n_keep)``."""
        return self._indices.copy()

    def column_indices(self) -> np.ndarray:
        """Absolute column of every stored value, shape like ``values``."""
        offs = (np.arange(self.n_groups) * self.group)[None, :, None]
        return (self._indices + offs).reshape(self.rows, -1)

    def to_dense(self) -> np.ndarray:
        return decode_nm(self)

    def payload_bytes(self) -> bytes:
        dt = self.values.dtype.newbyteorder("<")
        return self.values.astype(dt, copy=False).tobytes() + self.meta.tobytes()


Tensor = Union[np.ndarray, NMSparseMatrix]


def _kept_from_nonzeros(w: np.ndarray, n_keep: int, group: int) -> np.ndarray:
    g = w.reshape(w.shape[0], -1, group) != 0
    if np.any(g.sum(axis=2) > n_keep):
        raise PatternError(f"some group has more than {n_keep} nonzeros of {group}")
    # nonzero slots first, then the lowest zero slots, in index order
    order = np.argsort(~g, axis=2, kind="stable")[:, :, :n_keep]
    return np.sort(order, axis=2)


def encode_nm(w, n_keep: int, group: int, kept=None) -> NMSparseMatrix:
    """Pack a matrix that already satisfies an N:M pattern.

    Args:
        w: dense matrix with at most ``n_keep`` nonzeros per group of
            ``group`` consecutive entries along each row.
        kept: optional ``(rows, cols // group, n_keep)`` kept positions per
            group. When given it defines the pattern, so zero-valued kept
            weights are allowed; every nonzero must lie inside it. When
            omitted the pattern is the nonzeros, padded with the lowest free
            slots.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise DimensionError("encode_nm expects a 2-D matrix")
    if w.dtype not in _DTYPE_CODES:
        w = w.astype(np.float64)
    rows, cols = w.shape
    if cols % group:
        raise DimensionError(f"cols={cols} not divisible by group={group}")
    if not 1 <= n_keep <= group:
        raise ValidationError(f"invalid pattern {n_keep}:{group}")
    if kept is None:
        kept = _kept_from_nonzeros(w, n_keep, group)
    else:
        kept = np.asarray(kept, dtype=np.int64)
        if kept.shape != (rows, cols // group, n_keep):
            raise DimensionError(f"kept shape {kept.shape} != {(rows, cols // group, n_keep)}")
        if kept.size and (kept.min() < 0 or kept.max() >= group):
            raise PatternError("kept index outside group")
        if n_keep > 1 and np.any(np.diff(kept, axis=2) <= 0):
            raise PatternError("kept indices must be strictly increasing within each group")
        mask = np.zeros((rows, cols // group, group), dtype=bool)
        np.put_along_axis(mask, kept, True, axis=2)
        if np.any(w.reshape(rows, -1, group)[~mask] != 0):
            raise PatternError("nonzero weight outside the kept mask")
    values = np.take_along_axis(w.reshape(rows, -1, group), kept, axis=2).reshape(rows, -1)
    meta = _pack_indices(kept.reshape(rows, -1), group)
    return NMSparseMatrix(rows, cols, n_keep, group, np.ascontiguousarray(values), meta)


def decode_nm(s: NMSparseMatrix) -> np.ndarray:
    out = np.zeros((s.rows, s.n_groups, s.group), dtype=s.values.dtype)
    np.put_along_axis(out, s._indices, s.values.reshape(s.rows, s.n_groups, s.n_keep), axis=2)
    return out.reshape(s.rows, s.cols)


def storage_bytes(t: Tensor) -> int:
    """Exact payload size of a tensor (values plus packed metadata)."""
    if isinstance(t, NMSparseMatrix):
        return int(t.values.size * t.values.itemsize + t.meta.size)
    return int(np.asarray(t).nbytes)


def sparse_storage_bytes(rows: int, cols: int, n_keep: int, group: int, itemsize: int = 4) -> int:
    """``storage_bytes`` of a hypothetical N:M matrix, computed from its shape."""
    return rows * (cols // group) * n_keep * itemsize + rows * meta_row_bytes(cols, n_keep, group)


@dataclass(frozen=True)
class LayerRecord:
    """One step of a sequential model.

    ``op`` names the nonlinearity (relu, tanh, identity); ``tag`` is a free
    component label such as ``vision`` or ``backbone``.
    """

    name: str
    kind: str
    d_in: int
    d_out: int
    op: str = ""
    tag: str = ""


@dataclass(eq=False)
class Checkpoint:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    topology: list[LayerRecord] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def layer(self, name: str) -> LayerRecord:
        for rec in self.topology:
            if rec.name == name:
                return rec
        raise TopologyError(f"unknown layer {name!r}")

    def linear_layers(self) -> list[LayerRecord]:
        return [rec for rec in self.topology if rec.kind == "linear"]

    def validate(self) -> None:
        """Check topology chaining and that linear layers resolve to tensors."""
        width = None
        seen = set()
        for rec in self.topology:
            if rec.kind not in LAYER_KINDS:
                raise TopologyError(f"{rec.name}: unknown kind {rec.kind!r}")
            if rec.name in seen:
                raise TopologyError(f"duplicate layer {rec.name!r}")
            seen.add(rec.name)
            if width is not None and rec.d_in != width:
                raise TopologyError(f"{rec.name}: d_in={rec.d_in} does not chain from {width}")
            if rec.kind == "linear":
                t = self.tensors.get(rec.name)
                if t is None:
                    raise TopologyError(f"linear layer {rec.name!r} has no tensor")
                if tuple(t.shape) != (rec.d_out, rec.d_in):
                    raise TopologyError(f"{rec.name}: tensor shape {tuple(t.shape)} != {(rec.d_out, rec.d_in)}")
            elif rec.kind == "nonlinearity" and rec.d_in != rec.d_out:
                raise TopologyError(f"{rec.name}: nonlinearity must preserve width")
            elif rec.kind == "embedding":
                t = self.tensors.get(rec.name)
                if t is None or rec.d_out != rec.d_in + t.shape[1]:
                    raise TopologyError(f"{rec.name}: embedding table does not match dims")
            width = rec.d_out

    def to_bytes(self) -> bytes:
        return checkpoint_to_bytes(self)

    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _check_text(s: str, what: str) -> str:
    if "\n" in s or "\r" in s:
        raise ValidationError(f"{what} may not contain newlines: {s!r}")
    return s


def _encode_block(c: Checkpoint) -> bytes:
    lines = []
    for i, rec in enumerate(c.topology):
        for part in (rec.name, rec.kind, rec.op, rec.tag):
            if "," in part:
                raise ValidationError(f"layer fields may not contain commas: {part!r}")
            _check_text(part, "layer field")
        lines.append(f"layer.{i:04d}={rec.name},{rec.kind},{rec.d_in},{rec.d_out},{rec.op},{rec.tag}")
    for key, value in c.metadata.items():
        if "=" in key:
            raise ValidationError(f"metadata key may not contain '=': {key!r}")
        lines.append(f"meta.{_check_text(key, 'metadata key')}={_check_text(str(value), 'metadata value')}")
    return "".join(line + "\n" for line in lines).encode("utf-8")


def _decode_block(text: str) -> tuple[list[LayerRecord], dict[str, str]]:
    topology, metadata = [], {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed block line {line!r}")
        if key.startswith("layer."):
            parts = value.split(",")
            if len(parts) != 6:
                raise FormatError(f"malformed layer record {value!r}")
            name, kind, d_in, d_out, op, tag = parts
            try:
                topology.append(LayerRecord(name, kind, int(d_in), int(d_out), op, tag))
            except ValueError as exc:
                raise FormatError(f"malformed layer dims in {value!r}") from exc
        elif key.startswith("meta."):
            metadata[key[5:]] = value
        else:
            raise FormatError(f"unknown block key {key!r}")
    return topology, metadata


def checkpoint_to_bytes(c: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(c.tensors))]
    for name, t in c.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError("tensor name too long")
        if isinstance(t, NMSparseMatrix):
            kind, n, m, rows, cols = 1, t.n_keep, t.group, t.rows, t.cols
            dtype = t.values.dtype
            payload = t.payload_bytes()
        else:
            a = np.asarray(t)
            if a.ndim != 2:
                raise DimensionError(f"tensor {name!r} must be 2-D")
            kind, n, m = 0, 0, 0
            rows, cols = a.shape
            dtype = a.dtype
            payload = np.ascontiguousarray(a).astype(dtype.newbyteorder("<"), copy=False).tobytes()
        if dtype not in _DTYPE_CODES:
            raise ValidationError(f"tensor {name!r}: unsupported dtype {dtype}")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BBBBQQ", kind, _DTYPE_CODES[dtype], n, m, rows, cols))
        out.append(payload)
    block = _encode_block(c)
    out.append(struct.pack("<I", len(block)) + block)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated payload at offset {self.pos} (need {n} bytes)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    rd = _Reader(data)
    if bytes(rd.take(4)) != MAGIC:
        raise FormatError("bad magic (not a GLUE container)")
    version, count = rd.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        try:
            name = bytes(rd.take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8") from exc
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        kind, dcode, n, m, rows, cols = rd.unpack("<BBBBQQ")
        if dcode not in _CODE_DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {dcode}")
        if rows * cols > MAX_ELEMENTS:
            raise FormatError(f"tensor {name!r}: dimension overflow ({rows} x {cols})")
        dt = _CODE_DTYPES[dcode]
        if kind == 0:
            buf = rd.take(rows * cols * dt.itemsize)
            arr = np.frombuffer(buf, dtype=dt).reshape(rows, cols)
            tensors[name] = arr.astype(dt.newbyteorder("="))
        elif kind == 1:
            if m < 2 or not 1 <= n <= m or cols % m:
                raise FormatError(f"tensor {name!r}: invalid pattern {n}:{m} for {cols} cols")
            k = cols // m * n
            vals = np.frombuffer(rd.take(rows * k * dt.itemsize), dtype=dt).reshape(rows, k)
            nb = meta_row_bytes(cols, n, m)
            meta = np.frombuffer(rd.take(rows * nb), dtype=np.uint8).reshape(rows, nb).copy()
            tensors[name] = NMSparseMatrix(int(rows), int(cols), n, m, vals.astype(dt.newbyteorder("=")), meta)
        else:
            raise FormatError(f"tensor {name!r}: unknown kind {kind}")
    (blen,) = rd.unpack("<I")
    try:
        text = bytes(rd.take(blen)).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("metadata block is not UTF-8") from exc
    if rd.pos != len(rd.data):
        raise FormatError(f"{len(rd.data) - rd.pos} trailing bytes after metadata block")
    topology, metadata = _decode_block(text)
    return Checkpoint(tensors, topology, metadata)


def write_checkpoint(c: Checkpoint, path) -> None:
    data = checkpoint_to_bytes(c)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return checkpoint_from_bytes(data)
