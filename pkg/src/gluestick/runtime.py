"""Corrected inference and cost accounting.

A pruned layer computes ``W_pruned @ x + bias + A @ (B.T @ x)``. The sparse
product touches only the stored values (``n_keep`` per group) and the
correction is evaluated right to left, so its cost is ``(d_in + d_out) * r``
multiplies per input column.

Inputs are column vectors: ``x`` is ``(d_in,)`` or a batch ``(d_in, n)``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .errors import DimensionError, NumericError, TopologyError, ValidationError
from .gluecore import Correction, CorrectionSet
from .weightstore import Checkpoint, LayerRecord, NMSparseMatrix

NONLINEARITIES = {
    "relu": lambda h: np.maximum(h, 0.0),
    "tanh": np.tanh,
    "identity": lambda h: h,
}


class MacCounter:
    """Tally of scalar multiplies performed, overall and per layer."""

    def __init__(self):
        self.total = 0
        self.by_layer: dict[str, int] = {}

    def add(self, layer: str, n: int) -> None:
        self.total += int(n)
        self.by_layer[layer] = self.by_layer.get(layer, 0) + int(n)


def _as_columns(x, d_in: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    single = x.ndim == 1
    cols = x[:, None] if single else x
    if cols.ndim != 2 or cols.shape[0] != d_in:
        raise DimensionError(f"input has shape {x.shape}, expected ({d_in},) or ({d_in}, n)")
    if not np.all(np.isfinite(cols)):
        raise NumericError("non-finite input")
    return cols, single


def sparse_matmul(s: NMSparseMatrix, x: np.ndarray) -> np.ndarray:
    """``decode(s) @ x`` for ``x`` of shape ``(cols, n)``, touching kept values only."""
    gathered = x[s.column_indices()]  # (rows, kept, n)
    return np.einsum("rk,rkn->rn", s.values, gathered)


def _bias_add(y: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    return y if bias is None else y + bias[:, None]


class DenseLinear:
    def __init__(self, name: str, weight: np.ndarray, bias: Optional[np.ndarray] = None):
        self.name = name
        self.weight = weight
        self.bias = bias

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def forward(self, x, counter: Optional[MacCounter] = None) -> np.ndarray:
        cols, single = _as_columns(x, self.d_in)
        if counter is not None:
            counter.add(self.name, self.weight.size * cols.shape[1])
        y = _bias_add(self.weight @ cols, self.bias)
        return y[:, 0] if single else y

    def effective_weight(self) -> np.ndarray:
        return self.weight


class CorrectedLayer:
    """Pruned linear layer with an optional low-rank correction.

    The sparse weights are never modified; attaching a correction only adds
    the ``A @ (B.T @ x)`` term.
    """

    def __init__(self, name: str, pruned: NMSparseMatrix, bias: Optional[np.ndarray] = None,
                 correction: Optional[Correction] = None):
        if correction is not None and (correction.d_out, correction.d_in) != pruned.shape:
            raise DimensionError(
                f"{name}: correction dims {(correction.d_out, correction.d_in)} != layer {pruned.shape}")
        self.name = name
        self.pruned = pruned
        self.bias = bias
        self.correction = correction

    @property
    def d_out(self) -> int:
        return self.pruned.rows

    @property
    def d_in(self) -> int:
        return self.pruned.cols

    def with_correction(self, correction: Optional[Correction]) -> "CorrectedLayer":
        return CorrectedLayer(self.name, self.pruned, self.bias, correction)

    def forward(self, x, counter: Optional[MacCounter] = None) -> np.ndarray:
        cols, single = _as_columns(x, self.d_in)
        n = cols.shape[1]
        y = sparse_matmul(self.pruned, cols)
        if counter is not None:
            counter.add(self.name, self.pruned.values.size * n)
        y = _bias_add(y, self.bias)
        c = self.correction
        if c is not None:
            z = c.B.T @ cols
            y = y + c.A @ z
            if counter is not None:
                counter.add(self.name, (c.B.size + c.A.size) * n)
        return y[:, 0] if single else y

    def effective_weight(self) -> np.ndarray:
        w = self.pruned.to_dense().astype(np.float64)
        if self.correction is not None:
            w = w + self.correction.delta()
        return w


class LowRankLinear:
    """Weight replaced by a rank-r factorisation ``A @ B.T`` (no sparse part)."""

    def __init__(self, name: str, A: np.ndarray, B: np.ndarray, bias: Optional[np.ndarray] = None):
        self.name = name
        self.A = A
        self.B = B
        self.bias = bias

    @property
    def d_out(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.B.shape[0]

    @property
    def r(self) -> int:
        return self.A.shape[1]

    def forward(self, x, counter: Optional[MacCounter] = None) -> np.ndarray:
        cols, single = _as_columns(x, self.d_in)
        if counter is not None:
            counter.add(self.name, (self.A.size + self.B.size) * cols.shape[1])
        y = _bias_add(self.A @ (self.B.T @ cols), self.bias)
        return y[:, 0] if single else y

    def effective_weight(self) -> np.ndarray:
        return self.A @ self.B.T


def corrected_forward(layer: CorrectedLayer, x) -> np.ndarray:
    return layer.forward(x)


class Model:
    """Sequential model assembled from a checkpoint topology.

    ``layers`` maps linear layer names to layer objects; ``tables`` maps
    embedding layer names to ``(n_codes, dim)`` lookup tables whose rows are
    concatenated onto the running activation.
    """

    def __init__(self, topology: list[LayerRecord], layers: dict, tables: dict,
                 metadata: Optional[dict] = None):
        self.topology = list(topology)
        self.layers = dict(layers)
        self.tables = dict(tables)
        self.metadata = dict(metadata or {})
        self._check()

    def _check(self) -> None:
        width = None
        for rec in self.topology:
            if width is not None and rec.d_in != width:
                raise TopologyError(f"{rec.name}: d_in={rec.d_in} does not chain from {width}")
            if rec.kind == "linear":
                layer = self.layers.get(rec.name)
                if layer is None or (layer.d_out, layer.d_in) != (rec.d_out, rec.d_in):
                    raise TopologyError(f"{rec.name}: missing or mis-shaped layer")
            elif rec.kind == "nonlinearity":
                if rec.op not in NONLINEARITIES:
                    raise TopologyError(f"{rec.name}: unknown nonlinearity {rec.op!r}")
            elif rec.kind == "embedding":
                if rec.name not in self.tables:
                    raise TopologyError(f"{rec.name}: missing embedding table")
            else:
                raise TopologyError(f"{rec.name}: unknown kind {rec.kind!r}")
            width = rec.d_out

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Model":
        ckpt.validate()
        layers, tables = {}, {}
        for rec in ckpt.topology:
            if rec.kind == "linear":
                w = ckpt.tensors[rec.name]
                b = ckpt.tensors.get(f"{rec.name}.bias")
                bias = None if b is None else np.asarray(b).reshape(-1)
                if isinstance(w, NMSparseMatrix):
                    layers[rec.name] = CorrectedLayer(rec.name, w, bias)
                else:
                    layers[rec.name] = DenseLinear(rec.name, w, bias)
            elif rec.kind == "embedding":
                tables[rec.name] = np.asarray(ckpt.tensors[rec.name])
        return cls(ckpt.topology, layers, tables, ckpt.metadata)

    @property
    def d_in(self) -> int:
        return self.topology[0].d_in

    def linear_names(self) -> list[str]:
        return [rec.name for rec in self.topology if rec.kind == "linear"]

    def with_layers(self, layers: dict) -> "Model":
        """Copy of the model with some linear layers swapped out."""
        new = dict(self.layers)
        new.update(layers)
        return Model(self.topology, new, self.tables, self.metadata)

    def forward(self, x, codes=None, record: Optional[dict] = None,
                counter: Optional[MacCounter] = None) -> np.ndarray:
        """Run the chain.

        Args:
            codes: integer code (or one per column) for embedding layers.
            record: if given, filled with the input activation of every
                linear layer, keyed by layer name, as ``(d_in, n)`` arrays.
        """
        if not self.topology:
            raise TopologyError("empty model")
        h, single = _as_columns(x, self.d_in)
        for rec in self.topology:
            if rec.kind == "linear":
                if record is not None:
                    record[rec.name] = h
                h = self.layers[rec.name].forward(h, counter)
            elif rec.kind == "nonlinearity":
                h = NONLINEARITIES[rec.op](h)
            else:
                if codes is None:
                    raise ValidationError(f"{rec.name}: embedding layer needs codes")
                c = np.broadcast_to(np.asarray(codes, dtype=np.int64), (h.shape[1],))
                table = self.tables[rec.name]
                if c.min() < 0 or c.max() >= table.shape[0]:
                    raise ValidationError(f"{rec.name}: code out of range")
                h = np.concatenate([h, table[c].T.astype(h.dtype, copy=False)], axis=0)
        return h[:, 0] if single else h

    def __call__(self, x, codes=None):
        return self.forward(x, codes)


def model_forward(model, x, codes=None) -> np.ndarray:
    if isinstance(model, Checkpoint):
        model = Model.from_checkpoint(model)
    return model.forward(x, codes)


def apply_corrections(model: Model, cs: CorrectionSet) -> Model:
    """Wrap every pruned layer named in ``cs`` with its correction."""
    wrapped = {}
    for c in cs:
        layer = model.layers.get(c.layer)
        if layer is None:
            raise TopologyError(f"orphan correction for unknown layer {c.layer!r}")
        if not isinstance(layer, CorrectedLayer):
            raise TopologyError(f"correction targets {c.layer!r}, which is not pruned")
        wrapped[c.layer] = layer.with_correction(c)
    return model.with_layers(wrapped) if wrapped else model


def correction_params(d_in: int, d_out: int, r: int) -> int:
    return (d_in + d_out) * r


@dataclass
class LayerCost:
    layer: str
    d_in: int
    d_out: int
    r: int
    dense_macs: int
    sparse_macs: int
    correction_macs: int
    param_bytes_dense: int
    param_bytes_sparse: int
    param_bytes_correction: int

    @property
    def macs(self) -> int:
        return self.sparse_macs + self.correction_macs

    @property
    def param_bytes(self) -> int:
        return self.param_bytes_sparse + self.param_bytes_correction


@dataclass
class CostReport:
    layers: list[LayerCost]

    @property
    def total(self) -> LayerCost:
        sums = {f.name: sum(getattr(row, f.name) for row in self.layers)
                for f in fields(LayerCost) if f.name not in ("layer", "d_in", "d_out", "r")}
        return LayerCost("TOTAL", 0, 0, 0, **sums)

    def to_csv(self, path) -> None:
        cols = [f.name for f in fields(LayerCost)]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in self.layers + [self.total]:
                w.writerow(asdict(row))


def layer_cost(layer) -> LayerCost:
    """Per-call multiply counts for one input column and weight-only byte counts.

    Biases are excluded from both. For a rank-r factorised layer the factors
    are reported under the correction columns and the sparse columns are 0.
    """
    d_in, d_out = layer.d_in, layer.d_out
    dense_macs = d_in * d_out
    if isinstance(layer, CorrectedLayer):
        s = layer.pruned
        itemsize = s.values.itemsize
        c = layer.correction
        r = 0 if c is None else c.r
        return LayerCost(layer.name, d_in, d_out, r, dense_macs,
                         s.values.size, correction_params(d_in, d_out, r),
                         dense_macs * itemsize, s.values.size * itemsize + s.meta.size,
                         correction_params(d_in, d_out, r) * itemsize)
    if isinstance(layer, LowRankLinear):
        itemsize = layer.A.itemsize
        r = layer.r
        return LayerCost(layer.name, d_in, d_out, r, dense_macs, 0, correction_params(d_in, d_out, r),
                         dense_macs * itemsize, 0, correction_params(d_in, d_out, r) * itemsize)
    itemsize = layer.weight.itemsize
    return LayerCost(layer.name, d_in, d_out, 0, dense_macs, dense_macs, 0,
                     dense_macs * itemsize, dense_macs * itemsize, 0)


def cost_report(model: Model) -> CostReport:
    return CostReport([layer_cost(model.layers[name]) for name in model.linear_names()])
