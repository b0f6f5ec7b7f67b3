"""
Plotting - every figure is written as PNG next to the CSV it was drawn from.

Tests read the CSV; the PNG is for people.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from kitpose.resource_manager import PathLike, SafeFileWriter  # noqa: E402

logger = logging.getLogger(__name__)

FIG_WIDTH = 6.0
GOLDEN = (5 ** 0.5 - 1.0) / 2.0


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with SafeFileWriter(path) as f:
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return Path(path)


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.debug(f"💾 Figure written: {path}")
    return path


def _figure(width: float = FIG_WIDTH, height: Optional[float] = None):
    return plt.subplots(figsize=(width, height or width * GOLDEN))


def plot_curves(png_path: PathLike, x: Sequence[float], series: Dict[str, Sequence[Optional[float]]],
                xlabel: str = "epoch", ylabel: str = "") -> Path:
    """Line plot of several named series over a shared x axis; None gaps are skipped."""
    fig, ax = _figure()
    for name, ys in series.items():
        pts = [(xi, yi) for xi, yi in zip(x, ys) if yi is not None]
        if pts:
            xs, vs = zip(*pts)
            ax.plot(xs, vs, marker="o", markersize=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(frameon=False)
    return _save(fig, png_path)


def plot_attention(png_path: PathLike, attn: np.ndarray, boundary: int, title: str = "") -> Path:
    """
    Attention grid with the keypoint / prompt split drawn at `boundary`.

    Rows are queries, columns keys; indices < boundary are keypoint tokens.
    """
    fig, ax = _figure(width=5.0, height=5.0)
    im = ax.imshow(attn, cmap="viridis", interpolation="nearest")
    if 0 < boundary < attn.shape[0]:
        ax.axhline(boundary - 0.5, color="w", linewidth=1.0)
        ax.axvline(boundary - 0.5, color="w", linewidth=1.0)
    ax.set_xlabel("key")
    ax.set_ylabel("query")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, png_path)


def plot_bars(png_path: PathLike, labels: List[str], values: Sequence[float], ylabel: str = "") -> Path:
    fig, ax = _figure()
    ax.bar(range(len(values)), values, color="#4c72b0")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    return _save(fig, png_path)


def plot_assignment(png_path: PathLike, names: Sequence[str], assignment: Sequence[int]) -> Path:
    """One colored cell per keypoint token, colored by its body-part cluster."""
    fig, ax = _figure(width=max(4.0, 0.35 * len(names)), height=1.8)
    ax.imshow(np.asarray(assignment)[None, :], cmap="tab10", aspect="auto", vmin=0, vmax=9)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_yticks([])
    return _save(fig, png_path)
