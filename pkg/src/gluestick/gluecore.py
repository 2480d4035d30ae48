"""Offline priming of low-rank corrections for pruned layers.

For each pruned linear layer the gap ``W_dense - W_pruned`` is decomposed
and its leading singular triplets are folded into two thin factors,
``A = U_r diag(S_r)`` (d_out x r) and ``B = V_r`` (d_in x r), so that
``A @ B.T`` is the best rank-r approximation of the gap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics
from .errors import DimensionError, FormatError, TopologyError, ValidationError
from .weightstore import Checkpoint, NMSparseMatrix, decode_nm, read_checkpoint, write_checkpoint

SELECTIONS = ("top_r", "random_r")


class RankClampWarning(UserWarning):
    """Requested rank exceeds a layer's smallest dimension; full rank used."""


@dataclass(eq=False)
class Correction:
    layer: str
    r: int
    A: np.ndarray
    B: np.ndarray
    selection: str = "top_r"
    seed: Optional[int] = None
    components: Optional[np.ndarray] = None  # chosen singular indices

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2:
            raise DimensionError("correction factors must be 2-D")
        if self.A.shape[1] != self.r or self.B.shape[1] != self.r:
            raise DimensionError(f"{self.layer}: factor ranks {self.A.shape[1]}, {self.B.shape[1]} != r={self.r}")

    @property
    def d_out(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.B.shape[0]

    @property
    def n_params(self) -> int:
        return (self.d_in + self.d_out) * self.r

    def delta(self) -> np.ndarray:
        """Dense ``A @ B.T``."""
        return self.A @ self.B.T


@dataclass(eq=False)
class CorrectionSet:
    corrections: dict[str, Correction] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.corrections)

    def __iter__(self):
        return iter(self.corrections.values())

    def __getitem__(self, name):
        return self.corrections[name]


def compute_gap(dense, pruned: NMSparseMatrix) -> np.ndarray:
    """``dense - decode(pruned)`` in float64."""
    dense = numerics.as_matrix(dense, "dense")
    if dense.shape != pruned.shape:
        raise DimensionError(f"dense {dense.shape} vs pruned {pruned.shape}")
    return dense.astype(np.float64) - decode_nm(pruned).astype(np.float64)


def select_components(k: int, r: int, selection: str = "top_r", seed: Optional[int] = None) -> np.ndarray:
    """Indices (ascending) of the singular triplets to keep."""
    if selection == "top_r":
        return np.arange(r)
    if selection == "random_r":
        if seed is None:
            raise ValidationError("random_r selection needs a seed")
        rng = np.random.default_rng(seed)
        return np.sort(rng.choice(k, size=r, replace=False))
    raise ValidationError(f"unknown selection {selection!r}; expected one of {SELECTIONS}")


def prime_correction(dense, pruned: NMSparseMatrix, r: int, selection: str = "top_r",
                     seed: Optional[int] = None, layer: str = "") -> Correction:
    gap = compute_gap(dense, pruned)
    k = min(gap.shape)
    if not 1 <= r <= k:
        raise ValidationError(f"{layer or 'layer'}: rank {r} outside [1, {k}]")
    svd = numerics.svd_full(gap)
    idx = select_components(k, r, selection, seed)
    A = svd.U[:, idx] * svd.S[idx]
    B = np.ascontiguousarray(svd.V[:, idx])
    return Correction(layer, r, np.ascontiguousarray(A), B, selection, seed, idx)


def layer_seed(seed: int, index: int) -> int:
    """Per-layer random_r seed derived from the global seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def prime_model(dense_ckpt: Checkpoint, pruned_ckpt: Checkpoint, r: int, selection: str = "top_r",
                seed: Optional[int] = None) -> CorrectionSet:
    """One correction per pruned linear layer.

    Layers whose smallest dimension is below ``r`` are primed at full rank
    and a :class:`RankClampWarning` is issued.
    """
    if r < 1:
        raise ValidationError(f"rank must be >= 1, got {r}")
    if selection == "random_r" and seed is None:
        raise ValidationError("random_r selection needs a seed")
    _check_same_topology(dense_ckpt, pruned_ckpt)
    out = CorrectionSet(provenance={
        "r": str(r),
        "selection": selection,
        "seed": "" if seed is None else str(seed),
        "dense_hash": dense_ckpt.hash(),
        "pruned_hash": pruned_ckpt.hash(),
    })
    for i, rec in enumerate(dense_ckpt.linear_layers()):
        pruned = pruned_ckpt.tensors[rec.name]
        if not isinstance(pruned, NMSparseMatrix):
            continue
        dense = dense_ckpt.tensors[rec.name]
        if isinstance(dense, NMSparseMatrix):
            raise TopologyError(f"{rec.name}: dense checkpoint holds a sparse tensor")
        k = min(pruned.shape)
        r_eff = r
        if r > k:
            warnings.warn(f"{rec.name}: rank {r} > min dim {k}; priming at full rank", RankClampWarning,
                          stacklevel=2)
            r_eff = k
        s = None if seed is None else layer_seed(seed, i)
        out.corrections[rec.name] = prime_correction(dense, pruned, r_eff, selection, s, layer=rec.name)
    return out


def _check_same_topology(a: Checkpoint, b: Checkpoint) -> None:
    if len(a.topology) != len(b.topology):
        raise TopologyError("checkpoints have different layer counts")
    for ra, rb in zip(a.topology, b.topology):
        if (ra.name, ra.kind, ra.d_in, ra.d_out) != (rb.name, rb.kind, rb.d_in, rb.d_out):
            raise TopologyError(f"layer mismatch: {ra} vs {rb}")
        if ra.kind == "linear":
            if ra.name not in a.tensors or ra.name not in b.tensors:
                raise TopologyError(f"linear layer {ra.name!r} missing a tensor")
            if tuple(a.tensors[ra.name].shape) != tuple(b.tensors[ra.name].shape):
                raise TopologyError(f"{ra.name}: tensor shapes differ")


def corrections_to_checkpoint(cs: CorrectionSet, dtype=np.float32) -> Checkpoint:
    tensors = {}
    for c in cs:
        tensors[f"{c.layer}.A"] = np.ascontiguousarray(c.A, dtype=dtype)
        tensors[f"{c.layer}.B"] = np.ascontiguousarray(c.B, dtype=dtype)
    return Checkpoint(tensors, [], dict(cs.provenance))


def corrections_from_checkpoint(ckpt: Checkpoint) -> CorrectionSet:
    prov = dict(ckpt.metadata)
    selection = prov.get("selection", "top_r")
    names = []
    for key in ckpt.tensors:
        base, _, part = key.rpartition(".")
        if part not in ("A", "B") or not base:
            raise FormatError(f"unexpected tensor {key!r} in correction file")
        if base not in names:
            names.append(base)
    cs = CorrectionSet(provenance=prov)
    for name in names:
        try:
            A = ckpt.tensors[f"{name}.A"]
            B = ckpt.tensors[f"{name}.B"]
        except KeyError as exc:
            raise FormatError(f"missing factor pair for layer {name!r}") from exc
        if isinstance(A, NMSparseMatrix) or isinstance(B, NMSparseMatrix):
            raise FormatError(f"{name}: correction factors must be dense")
        cs.corrections[name] = Correction(name, A.shape[1], A, B, selection)
    return cs


def save_corrections(cs: CorrectionSet, path, dtype=np.float32) -> None:
    write_checkpoint(corrections_to_checkpoint(cs, dtype), path)


def load_corrections(path, dense: Optional[Checkpoint] = None,
                     pruned: Optional[Checkpoint] = None) -> CorrectionSet:
    """Read a correction file; verify provenance hashes when sources are given."""
    cs = corrections_from_checkpoint(read_checkpoint(path))
    verify_provenance(cs, dense, pruned)
    return cs


def verify_provenance(cs: CorrectionSet, dense: Optional[Checkpoint] = None,
                      pruned: Optional[Checkpoint] = None) -> None:
    for key, ckpt in (("dense_hash", dense), ("pruned_hash", pruned)):
        if ckpt is None:
            continue
        expected = cs.provenance.get(key)
        if expected != ckpt.hash():
            raise ValidationError(f"{key} mismatch: file records {expected}, source is {ckpt.hash()}")
