"""PNG figures for experiment and spectrum reports.

Figures are drawn with the object-oriented API on an Agg canvas so nothing
here touches pyplot's global state.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .errors import StorageError

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
FIGSIZE = (5.0, 3.2)
DPI = 120


def _new_figure(figsize=FIGSIZE):
    fig = Figure(figsize=figsize, dpi=DPI)
    FigureCanvasAgg(fig)
    return fig


def _save(fig, path) -> Path:
    path = Path(path)
    try:
        # fixed metadata keeps repeated runs byte-identical
        fig.savefig(path, format="png", metadata={"Software": None})
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def _styled(fn):
    import matplotlib

    def wrapper(*args, **kwargs):
        with matplotlib.rc_context(STYLE):
            return fn(*args, **kwargs)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


_RANK = re.compile(r"^GLUESTICK-(\d+|full)( random_r)?$")
_SVD = re.compile(r"^SVD-only-(\d+)$")


@_styled
def plot_rank_tradeoff(rows, path) -> Path:
    """Success against weight bytes for the rank sweep, with the fixed baselines."""
    fig = _new_figure()
    ax = fig.add_subplot(111)
    series = {"GLUESTICK top_r": [], "GLUESTICK random_r": [], "SVD-only": []}
    for row in rows:
        m = _RANK.match(row.method)
        if m:
            series["GLUESTICK random_r" if m.group(2) else "GLUESTICK top_r"].append(row)
        elif _SVD.match(row.method):
            series["SVD-only"].append(row)
    for (label, pts), marker in zip(series.items(), "osd"):
        if not pts:
            continue
        pts = sorted(pts, key=lambda r: r.param_bytes)
        x = [p.param_bytes / 1024 for p in pts]
        y = [p.success for p in pts]
        err = np.array([[p.success - p.success_lo for p in pts], [p.success_hi - p.success for p in pts]])
        ax.errorbar(x, y, yerr=err, marker=marker, ms=4, capsize=2, lw=1, label=label)
        for p, xi, yi in zip(pts, x, y):
            ax.annotate(f"r={p.r}", (xi, yi), textcoords="offset points", xytext=(3, 3), fontsize=6)
    for row in rows:
        if row.method in ("Full Dense", "Full Sparse"):
            ax.axhline(row.success, ls="--" if row.method == "Full Dense" else ":", lw=0.8, color="0.4")
            ax.annotate(row.method, (ax.get_xlim()[0], row.success), fontsize=6, color="0.3",
                        xytext=(2, 2), textcoords="offset points")
    ax.set_xlabel("linear-layer weight storage (KiB)")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.05)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    return _save(fig, path)


@_styled
def plot_component_sensitivity(rows, path) -> Path:
    """Success lost per thousand pruned weights, vision-only against backbone-only."""
    picks = [r for r in rows if r.method in ("Sparse Vision", "Sparse Backbone", "Full Sparse")]
    fig = _new_figure((4.0, 3.0))
    ax = fig.add_subplot(111)
    if picks:
        names = [r.method for r in picks]
        per_k = [(-r.delta_success) / max(r.pruned_params / 1000, 1e-9) for r in picks]
        bars = ax.bar(names, per_k, color=["#4c72b0", "#dd8452", "#55a868"][:len(picks)])
        for b, r in zip(bars, picks):
            ax.annotate(f"{r.delta_success:+.1f} pp", (b.get_x() + b.get_width() / 2, b.get_height()),
                        ha="center", va="bottom", fontsize=7)
    ax.set_ylabel("success lost (pp) per 1k pruned weights")
    fig.tight_layout()
    return _save(fig, path)


@_styled
def plot_spectra(reports, path, normalise: bool = True) -> Path:
    """Singular values by index, one line per layer (log scale)."""
    fig = _new_figure()
    ax = fig.add_subplot(111)
    for rep in reports:
        s = rep.sigmas / rep.sigmas[0] if normalise and rep.sigmas[0] > 0 else rep.sigmas
        idx = np.arange(1, s.size + 1) / (s.size if normalise else 1)
        ax.plot(idx, np.maximum(s, 1e-16), lw=1, label=f"{rep.layer} (sr={rep.stable_rank:.1f})")
    ax.set_yscale("log")
    ax.set_xlabel("relative index" if normalise else "index")
    ax.set_ylabel("sigma / sigma_1" if normalise else "sigma")
    if reports:
        ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)
