"""Figure rendering for CLI reports (off-screen Agg canvas, one figure per file)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_META = {"Software": None}


def _save(fig, path):
    FigureCanvasAgg(fig)
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_META)
    return path


def field_figure(grid, values, path, title="", cmap="viridis"):
    """Heat map of a nodal field; excluded nodes are left blank."""
    fig = Figure(figsize=(4.4, 3.8), layout="constrained")
    ax = fig.add_subplot()
    img = ax.imshow(grid.lattice(values).T, origin="lower", extent=(0, grid.lx, 0, grid.ly), cmap=cmap,
                    interpolation="nearest")
    fig.colorbar(img, ax=ax, shrink=0.85)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title, fontsize=10)
    return _save(fig, path)


def comparison_figure(grid, estimate, truth, path, title=""):
    """Estimate, truth and their difference side by side."""
    fig = Figure(figsize=(11, 3.4), layout="constrained")
    lo = float(min(np.nanmin(estimate), np.nanmin(truth)))
    hi = float(max(np.nanmax(estimate), np.nanmax(truth)))
    if hi == lo:
        hi = lo + 1.0
    panels = [(estimate, "estimate", dict(vmin=lo, vmax=hi)), (truth, "truth", dict(vmin=lo, vmax=hi)),
              (np.asarray(estimate) - truth, "estimate - truth", dict(cmap="RdBu_r"))]
    for k, (vals, name, kw) in enumerate(panels):
        ax = fig.add_subplot(1, 3, k + 1)
        img = ax.imshow(grid.lattice(vals).T, origin="lower", extent=(0, grid.lx, 0, grid.ly),
                        interpolation="nearest", **kw)
        fig.colorbar(img, ax=ax, shrink=0.85)
        ax.set_title(name, fontsize=10)
    fig.suptitle(title, fontsize=11)
    return _save(fig, path)


def trace_figure(times, arclength, trace, path, title=""):
    """Space-time image of a boundary trace (rows are time levels)."""
    fig = Figure(figsize=(5.0, 3.6), layout="constrained")
    ax = fig.add_subplot()
    s = np.arange(len(arclength))
    img = ax.pcolormesh(s, times, trace, shading="nearest", cmap="magma")
    fig.colorbar(img, ax=ax)
    ax.set_xlabel("patch node")
    ax.set_ylabel("t")
    ax.set_title(title, fontsize=10)
    return _save(fig, path)


def residual_figure(residuals, chosen, path, labels=None, title="candidate residuals"):
    """Bar chart of candidate mismatches with the winner highlighted."""
    residuals = np.asarray(residuals, dtype=float)
    fig = Figure(figsize=(max(4.0, 0.35 * residuals.size + 1.5), 3.4), layout="constrained")
    ax = fig.add_subplot()
    colors = ["tab:red" if k == chosen else "tab:gray" for k in range(residuals.size)]
    ax.bar(np.arange(residuals.size), residuals, color=colors)
    ax.set_yscale("log")
    ax.set_xticks(np.arange(residuals.size))
    ax.set_xticklabels(labels or [str(k) for k in range(residuals.size)], rotation=90, fontsize=7)
    ax.set_ylabel("trace mismatch")
    ax.set_title(title, fontsize=10)
    return _save(fig, path)


def history_figure(history, path, title="Picard updates", ylabel="sup-norm update"):
    fig = Figure(figsize=(4.4, 3.2), layout="constrained")
    ax = fig.add_subplot()
    ax.semilogy(np.arange(1, len(history) + 1), np.maximum(history, 1e-300), marker="o", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    return _save(fig, path)


def convergence_figure(eps, gaps, path, title="difference-quotient error"):
    """Log-log error against step size, one line per labelled series."""
    fig = Figure(figsize=(4.4, 3.4), layout="constrained")
    ax = fig.add_subplot()
    for name, vals in gaps.items():
        ax.loglog(eps, np.maximum(vals, 1e-300), marker="o", label=name)
    ax.set_xlabel("eps")
    ax.set_ylabel("sup-norm gap")
    ax.legend(fontsize=8)
    ax.set_title(title, fontsize=10)
    return _save(fig, path)
