"""Singular-value spectra and flatness metrics for weight matrices.

Three energy-normalised proxies quantify how flat a spectrum is:

* stable rank ``||W||_F^2 / sigma_1^2`` (higher is flatter),
* spectral entropy of ``p_i = sigma_i^2 / sum_j sigma_j^2`` (higher is flatter),
* ``energy_at(k)``, the cumulative energy of the top ``k`` components
  (lower is flatter).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics
from .errors import StorageError, ValidationError


@dataclass(eq=False)
class SpectrumReport:
    layer: str
    sigmas: np.ndarray
    stable_rank: float
    spectral_entropy: float

    @property
    def energy(self) -> np.ndarray:
        sq = self.sigmas ** 2
        return np.cumsum(sq) / np.sum(sq)

    def energy_at(self, k: int) -> float:
        if k < 1:
            raise ValidationError("k must be >= 1")
        if k >= self.sigmas.size:
            return 1.0
        return float(self.energy[k - 1])

    def default_k(self) -> int:
        return max(1, math.ceil(0.1 * self.sigmas.size))


def metrics_from_sigmas(sigmas) -> tuple[float, float]:
    """``(stable_rank, spectral_entropy)`` of a singular-value vector."""
    s = np.asarray(sigmas, dtype=np.float64)
    sq = s * s
    total = float(np.sum(sq))
    if total <= 0.0:
        raise ValidationError("spectrum of a zero matrix is undefined")
    stable_rank = total / float(sq.max())
    p = sq[sq > 0] / total
    entropy = float(-np.sum(p * np.log(p)))
    return stable_rank, max(entropy, 0.0)


def spectrum_from_sigmas(sigmas, layer: str = "") -> SpectrumReport:
    s = np.sort(np.asarray(sigmas, dtype=np.float64))[::-1].copy()
    sr, ent = metrics_from_sigmas(s)
    return SpectrumReport(layer, s, sr, ent)


def spectrum(w, layer: str = "") -> SpectrumReport:
    return spectrum_from_sigmas(numerics.svd_full(w).S, layer)


@dataclass(frozen=True)
class SpectrumComparison:
    """Which report is flatter under each metric: ``"a"``, ``"b"`` or ``"tie"``."""

    stable_rank: str
    spectral_entropy: str
    energy_at: str
    k: int

    @property
    def flatter(self) -> str:
        votes = {self.stable_rank, self.spectral_entropy, self.energy_at}
        return votes.pop() if len(votes) == 1 else "mixed"


def _winner(a: float, b: float, higher_is_flatter: bool, rtol: float) -> str:
    if abs(a - b) <= rtol * max(abs(a), abs(b), 1e-300):
        return "tie"
    return "a" if (a > b) == higher_is_flatter else "b"


def compare_spectra(a: SpectrumReport, b: SpectrumReport, k: Optional[int] = None,
                    rtol: float = 1e-12) -> SpectrumComparison:
    """Rank two spectra by flatness; ``k`` defaults to 10% of the smaller spectrum."""
    if k is None:
        k = max(1, math.ceil(0.1 * min(a.sigmas.size, b.sigmas.size)))
    return SpectrumComparison(
        _winner(a.stable_rank, b.stable_rank, True, rtol),
        _winner(a.spectral_entropy, b.spectral_entropy, True, rtol),
        _winner(a.energy_at(k), b.energy_at(k), False, rtol),
        k,
    )


CSV_COLUMNS = ("layer", "index", "sigma", "cum_energy")


def export_spectra(reports, path) -> None:
    """Write one row per singular value; ``index`` is 1-based."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for rep in reports:
                for i, (s, e) in enumerate(zip(rep.sigmas, rep.energy), start=1):
                    w.writerow([rep.layer, i, repr(float(s)), repr(float(e))])
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_spectra(path) -> list[SpectrumReport]:
    """Parse a file written by :func:`export_spectra` back into reports."""
    by_layer: dict[str, list[float]] = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                by_layer.setdefault(row["layer"], []).append(float(row["sigma"]))
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return [spectrum_from_sigmas(s, layer) for layer, s in by_layer.items()]
