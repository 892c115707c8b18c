"""Figures written next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_open  # noqa: E402


def _save(fig, path) -> None:
    path = Path(path)
    with atomic_open(path, "wb") as fh:
        fig.savefig(fh, format=path.suffix.lstrip(".") or "png", dpi=110, bbox_inches="tight")
    plt.close(fig)


def _grid_axes(n_panels: int, ncol: int = 3):
    ncol = min(ncol, n_panels)
    nrow = int(np.ceil(n_panels / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.2 * ncol, 2.4 * nrow), squeeze=False, sharex=True)
    for ax in axes.ravel()[n_panels:]:
        ax.set_visible(False)
    return fig, axes.ravel()


def plot_coefficients(path, t, curves, support=None, truth=None, lower=None, upper=None, names=None) -> None:
    """One panel per covariate, one line per cluster, optional truth and bands."""
    curves = np.asarray(curves)
    p, K, _ = curves.shape
    js = list(range(p)) if support is None else list(support)
    if not js:
        js = [0]
    fig, axes = _grid_axes(len(js))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ax, j in zip(axes, js):
        for k in range(K):
            c = colors[k % len(colors)]
            ax.plot(t, curves[j, k], color=c, lw=1.4, label=f"cluster {k + 1}")
            if lower is not None and upper is not None:
                ax.fill_between(t, lower[j, k], upper[j, k], color=c, alpha=0.2, lw=0)
            if truth is not None and k < truth.shape[1]:
                ax.plot(t, truth[j, k], color=c, lw=0.9, ls="--")
        ax.axhline(0.0, color="0.6", lw=0.6)
        ax.set_title(names[j] if names else f"x{j + 1}", fontsize=9)
    axes[0].legend(fontsize=7, frameon=False)
    _save(fig, path)


def plot_trace(path, trace, restarts=()) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(np.arange(1, len(trace) + 1), trace, marker=".", lw=1.0)
    for r in restarts:
        ax.axvline(r + 1, color="0.6", ls=":", lw=0.8)
    ax.set_xlabel("EM iteration")
    ax.set_ylabel("penalized log-likelihood")
    _save(fig, path)


def plot_criteria(path, rows, x: str = "K", y: str = "bic") -> None:
    """Criterion against a grid variable, one line per remaining (rho, r) cell."""
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    cells: dict = {}
    for row in rows:
        v = row.get(y)
        if v is None or not np.isfinite(v):
            continue
        cells.setdefault((row.get("rho"), row.get("r")), []).append((row[x], v))
    for (rho, r), pts in sorted(cells.items(), key=lambda kv: str(kv[0])):
        pts.sort()
        ax.plot([a for a, _ in pts], [b for _, b in pts], marker="o", lw=1.0, label=f"rho={rho}, r={r}")
    ax.set_xlabel(x)
    ax.set_ylabel(y.upper())
    if cells:
        ax.legend(fontsize=6, frameon=False)
    _save(fig, path)


def plot_bench(path, rows, metric_names=("ARI", "C", "IC", "MSE")) -> None:
    """Bar panels of averaged benchmark metrics per method."""
    methods = [r["method"] for r in rows]
    fig, axes = _grid_axes(len(metric_names), ncol=len(metric_names))
    for ax, m in zip(axes, metric_names):
        vals = [float(r.get(m, np.nan)) for r in rows]
        ax.bar(range(len(methods)), vals, color="0.4")
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=45, ha="right", fontsize=7)
        ax.set_title(m, fontsize=9)
    _save(fig, path)
