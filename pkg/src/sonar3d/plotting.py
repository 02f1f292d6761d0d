"""Optional PNG figures for CLI reports. matplotlib is imported only when a figure is drawn."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class PlottingUnavailable(RuntimeError):
    """matplotlib is not installed."""


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise PlottingUnavailable("install the 'plots' extra to render figures") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _float(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return np.nan


def plot_iterations(runs: dict, path) -> Path:
    """E_I (and NVE when present) against iteration for one or more named runs.

    Args:
        runs: ``{label: [row, ...]}`` with rows as written to ``iterations.csv``.
        path: output PNG.
    """
    plt = _pyplot()
    has_nve = any(np.isfinite(_float(r.get("NVE"))) for rows in runs.values() for r in rows)
    fig, axes = plt.subplots(1, 2 if has_nve else 1, figsize=(8 if has_nve else 4.5, 3.2),
                             squeeze=False)
    for label, rows in runs.items():
        k = [int(r["iteration"]) for r in rows]
        axes[0, 0].plot(k, [_float(r["E_I"]) for r in rows], marker="o", label=label)
        if has_nve:
            axes[0, 1].plot(k, [_float(r["NVE"]) for r in rows], marker="s", label=label)
    axes[0, 0].set_xlabel("iteration")
    axes[0, 0].set_ylabel("E_I")
    if has_nve:
        axes[0, 1].set_xlabel("iteration")
        axes[0, 1].set_ylabel("NVE")
    for ax in axes.ravel():
        ax.grid(alpha=0.3)
        if len(runs) > 1:
            ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info("wrote %s", path)
    return path


def plot_sweep(rows: list, path) -> Path:
    """Mean NVE with one-sigma bars per interface fluctuation level."""
    plt = _pyplot()
    s = [_float(r["sigma"]) for r in rows]
    m = [_float(r["nve_mean"]) for r in rows]
    e = [_float(r["nve_std"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.errorbar(s, m, yerr=e, marker="o", capsize=3)
    ax.set_xlabel("interface height std [m]")
    ax.set_ylabel("NVE after refinement")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_view(image, path, labels=None, title: str = "") -> Path:
    """Beam-bin image with optional component-label contours."""
    plt = _pyplot()
    img = np.asarray(image, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.6))
    ax.imshow(img.T, origin="lower", aspect="auto", cmap="gray")
    if labels is not None:
        lab = np.asarray(labels)
        for code, color in ((1, "tab:green"), (2, "tab:blue"), (3, "tab:red"), (4, "tab:orange")):
            if (lab == code).any():
                ax.contour((lab == code).T.astype(float), levels=[0.5], colors=color,
                           linewidths=0.8)
    ax.set_xlabel("beam")
    ax.set_ylabel("range bin")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
