"""Figures written next to the data files when the CLI runs with --figures.

Only the non-interactive Agg backend is used.  Every function takes the data
object and an output path and returns the path written.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fields import SpaceTimeField  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_field(fld: SpaceTimeField, path, label: str = "value", n_slices: int = 5) -> Path:
    """1D: a few time slices as lines.  2D: the first and last slices as images."""
    with plt.rc_context(STYLE):
        mesh = fld.mesh
        if mesh.dim == 1:
            fig, ax = plt.subplots()
            idx = np.unique(np.linspace(0, len(fld.times) - 1, n_slices).astype(int))
            colors = plt.cm.viridis(np.linspace(0, 1, len(idx)))
            order = np.argsort(mesh.centers[:, 0])
            for c, n in zip(colors, idx):
                ax.plot(mesh.centers[order, 0], fld.values[n, order], color=c, label=f"t = {fld.times[n]:.3g}")
            ax.set_xlabel("x")
            ax.set_ylabel(label)
            ax.legend()
        else:
            fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
            lo = mesh.grid.lower
            hi = lo + np.array(mesh.grid.shape) * mesh.h
            for ax, n in zip(axes, (0, len(fld.times) - 1)):
                img = mesh.to_full(fld.values[n])
                im = ax.imshow(img.T, origin="lower", extent=(lo[0], hi[0], lo[1], hi[1]), cmap="viridis")
                ax.set_title(f"{label}, t = {fld.times[n]:.3g}")
                fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)


def plot_series(x, ys: dict, path, xlabel: str, ylabel: str, logy: bool = False) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, y in ys.items():
            ax.plot(x, y, marker="o", ms=3, label=name)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(ys) > 1:
            ax.legend()
        return _save(fig, path)


def plot_residuals(history, path) -> Path:
    h = np.maximum(np.asarray(history, dtype=float), 1e-300)
    return plot_series(np.arange(1, len(h) + 1), {"residual": h}, path, "iteration", "sup_t L1 change", logy=True)


def plot_exit_table(table: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        dt = np.array([r["dt"] for r in table])
        f = np.array([r["exit_fraction"] for r in table])
        se = np.array([r["exit_se"] for r in table])
        ax.errorbar(dt, f, yerr=2 * se, marker="o", ms=4, capsize=3)
        ax.set_xscale("log")
        ax.set_xlabel("dt")
        ax.set_ylabel("exit fraction")
        return _save(fig, path)


def plot_margins(report, path) -> Path:
    """Margin at C = 0 against distance to the boundary, one point per sample."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(report.distance, report.margin0, s=4, alpha=0.5)
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xscale("log")
        ax.set_xlabel("distance to boundary")
        ax.set_ylabel("margin at C = 0")
        return _save(fig, path)
