"""Static SVG figures (optional, needs matplotlib)."""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping plots (pip install twotone[plot])")
        return None
    return plt


def plot_heatmap(
    path: Path,
    x_axis: np.ndarray,
    y_axis: np.ndarray,
    values: np.ndarray,
    xlabel: str,
    ylabel: str,
    title: str = "",
    colorbar_label: str = "",
    contours: Optional[Sequence[np.ndarray]] = None,
) -> Optional[Path]:
    """Heatmap of ``values[i_y, j_x]`` with optional (x, y) polylines on top."""
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(6, 4.5))
    mesh = ax.pcolormesh(
        x_axis, y_axis, np.ma.masked_invalid(values), shading="auto", cmap="RdBu_r"
    )
    fig.colorbar(mesh, ax=ax, label=colorbar_label)
    for line in contours or []:
        ax.plot(line[:, 0], line[:, 1], color="k", linewidth=0.8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_lines(
    path: Path,
    series: Dict[str, Sequence[np.ndarray]],
    xlabel: str,
    ylabel: str,
    logy: bool = False,
    title: str = "",
) -> Optional[Path]:
    """Line plot; ``series`` maps a label to (x, y)."""
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        ax.plot(x, y, label=label, linewidth=1.0)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_contours(path: Path, contours: Dict[str, List[np.ndarray]]) -> Optional[Path]:
    """Threshold curves per cooperativity in the (Δ̃c, Δ̃m) plane."""
    series = {}
    for label, branches in contours.items():
        for n, branch in enumerate(branches):
            series[f"{label}" if n == 0 else f"{label} ({n})"] = (branch[:, 0], branch[:, 1])
    return plot_lines(path, series, "Δ̃c", "Δ̃m", title="Instability threshold")
