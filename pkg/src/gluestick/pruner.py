"""N:M structured pruning by magnitude or Wanda score.

Wanda scores each weight as ``|W_ij| * ||X_j||_2``, where ``||X_j||_2`` is
the L2 norm, over all calibration samples, of input feature ``j`` to the
layer. Within every group of ``group`` consecutive columns of a row the
``n_keep`` highest scores survive; ties go to the lower column index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, TopologyError, ValidationError
from .runtime import Model
from .weightstore import Checkpoint, NMSparseMatrix, encode_nm, sparse_storage_bytes, storage_bytes

METHODS = ("magnitude", "wanda")


@dataclass
class CalibStats:
    norms: dict[str, np.ndarray]
    sample_count: int


@dataclass(frozen=True)
class PruneSpec:
    method: str = "wanda"
    n_keep: int = 2
    group: int = 4
    target_layers: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.group not in (4, 8):
            raise ValidationError(f"group must be 4 or 8, got {self.group}")
        if not 1 <= self.n_keep < self.group:
            raise ValidationError(f"need 1 <= n_keep < group, got {self.n_keep}:{self.group}")
        object.__setattr__(self, "target_layers", frozenset(self.target_layers))

    @property
    def sparsity(self) -> float:
        return 1.0 - self.n_keep / self.group


def collect_calibration_stats(model, inputs, codes=None, batch_size: int = 1024) -> CalibStats:
    """Accumulate per-feature input norms for every linear layer.

    ``inputs`` is a sequence of input vectors (or an ``(n, d_in)`` array,
    one sample per row). Samples are consumed in order, in fixed-size
    batches, so the result is deterministic.
    """
    if isinstance(model, Checkpoint):
        model = Model.from_checkpoint(model)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise ValidationError("calibration needs at least one sample")
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise DimensionError(f"calibration inputs {x.shape} do not match model input {model.d_in}")
    if codes is not None:
        codes = np.broadcast_to(np.asarray(codes, dtype=np.int64), (x.shape[0],))
    sums: dict[str, np.ndarray] = {}
    for start in range(0, x.shape[0], batch_size):
        rec: dict[str, np.ndarray] = {}
        batch_codes = None if codes is None else codes[start:start + batch_size]
        model.forward(x[start:start + batch_size].T, batch_codes, record=rec)
        for name, h in rec.items():
            sq = np.einsum("ij,ij->i", h, h)
            sums[name] = sq if name not in sums else sums[name] + sq
    return CalibStats({k: np.sqrt(v) for k, v in sums.items()}, int(x.shape[0]))


def score_magnitude(w) -> np.ndarray:
    return np.abs(np.asarray(w))


def score_wanda(w, stats: CalibStats, layer: str) -> np.ndarray:
    w = np.asarray(w)
    try:
        norms = stats.norms[layer]
    except KeyError as exc:
        raise ValidationError(f"no calibration statistics for layer {layer!r}") from exc
    if norms.shape != (w.shape[1],):
        raise DimensionError(f"{layer}: {norms.shape[0]} norms for {w.shape[1]} input features")
    return np.abs(w) * norms[None, :]


def select_nm_mask(scores, n_keep: int, group: int) -> np.ndarray:
    """Kept indices per group, shape ``(rows, cols // group, n_keep)``, ascending."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise DimensionError("scores must be 2-D")
    rows, cols = scores.shape
    if cols % group:
        raise DimensionError(f"cols={cols} not divisible by group={group}")
    g = scores.reshape(rows, cols // group, group)
    order = np.argsort(-g, axis=2, kind="stable")
    return np.sort(order[:, :, :n_keep], axis=2)


def exhaustive_nm_choice(group_scores: Sequence[float], n_keep: int) -> tuple[int, ...]:
    """Brute-force maximiser of the kept score sum over all subsets.

    Among equal sums the lexicographically smallest index tuple wins, which
    is the same as preferring lower column indices.
    """
    best, best_sum = None, -math.inf
    for combo in itertools.combinations(range(len(group_scores)), n_keep):
        s = sum(group_scores[i] for i in combo)
        if s > best_sum:
            best, best_sum = combo, s
    return best


def prune_matrix(w, scores, n_keep: int, group: int) -> NMSparseMatrix:
    w = np.asarray(w)
    kept = select_nm_mask(scores, n_keep, group)
    mask = np.zeros((w.shape[0], w.shape[1] // group, group), dtype=bool)
    np.put_along_axis(mask, kept, True, axis=2)
    masked = np.where(mask.reshape(w.shape), w, np.zeros((), dtype=w.dtype))
    return encode_nm(masked, n_keep, group, kept=kept)


def prune_checkpoint(model: Checkpoint, spec: PruneSpec, stats: Optional[CalibStats] = None) -> Checkpoint:
    """Replace each target layer's weight with its N:M-pruned encoding.

    Non-target tensors are carried over as the same objects.
    """
    if spec.method == "wanda" and spec.target_layers and stats is None:
        raise ValidationError("wanda pruning needs calibration statistics")
    linear = {rec.name for rec in model.linear_layers()}
    for name in sorted(spec.target_layers):
        if name not in linear:
            raise TopologyError(f"unknown or non-linear target layer {name!r}")
    tensors = dict(model.tensors)
    for name in spec.target_layers:
        w = tensors[name]
        if isinstance(w, NMSparseMatrix):
            raise ValidationError(f"layer {name!r} is already pruned")
        scores = score_magnitude(w) if spec.method == "magnitude" else score_wanda(w, stats, name)
        tensors[name] = prune_matrix(w, scores, spec.n_keep, spec.group)
    meta = dict(model.metadata)
    if spec.target_layers:
        meta["pruned"] = f"{spec.method} {spec.n_keep}:{spec.group}"
    return Checkpoint(tensors, list(model.topology), meta)


def memory_matched_subset(layers: Sequence[str], fraction: float) -> list[str]:
    """``ceil(fraction * len(layers))`` layers spread evenly from the first."""
    if not layers:
        raise ValidationError("empty layer list")
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"fraction {fraction} outside [0, 1]")
    n = len(layers)
    k = math.ceil(round(fraction * n, 9))
    return [layers[(i * n) // k] for i in range(k)]


def match_memory_budget(dense_bytes: dict[str, int], sparse_bytes: dict[str, int], target: int,
                        max_exhaustive: int = 16) -> tuple[list[str], int]:
    """Choose which layers to prune so total weight bytes come closest to ``target``.

    Exhaustive over subsets up to ``max_exhaustive`` layers; beyond that the
    candidates are the evenly spaced subsets of every size. Ties prefer
    pruning fewer layers, then earlier subsets. Returns the names (in input
    order) and the achieved total.
    """
    names = list(dense_bytes)
    base = sum(dense_bytes.values())
    saving = {n: dense_bytes[n] - sparse_bytes[n] for n in names}
    if len(names) <= max_exhaustive:
        candidates: Iterable = (c for k in range(len(names) + 1) for c in itertools.combinations(names, k))
    else:
        candidates = (memory_matched_subset(names, k / len(names)) for k in range(len(names) + 1))
    best, best_total = [], base
    for combo in candidates:
        total = base - sum(saving[n] for n in combo)
        if abs(total - target) < abs(best_total - target):
            best, best_total = list(combo), total
    return best, best_total


def layer_bytes(model: Checkpoint, names: Iterable[str], n_keep: int = 2, group: int = 4):
    """Dense and would-be-sparse weight bytes for each named layer."""
    dense, sparse = {}, {}
    for n in names:
        t = model.tensors[n]
        dense[n] = storage_bytes(t)
        rows, cols = t.shape
        sparse[n] = sparse_storage_bytes(rows, cols, n_keep, group, np.asarray(t).itemsize)
    return dense, sparse
