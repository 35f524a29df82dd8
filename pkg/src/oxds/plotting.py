"""Heatmap figures for evaluation reports.

One PNG per (metric, k) written beside the CSV: rows are source domain sets,
columns are target domain sets, cells carry the value.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ReportRow  # noqa: E402


def report_matrix(rows: Iterable[ReportRow], metric: str, k: str):
    """Source sets, target sets and the value grid (NaN where a pair is absent)."""
    picked = [r for r in rows if r.metric == metric and r.k == k]
    sources = sorted({r.source_domains for r in picked})
    targets = sorted({r.target_domains for r in picked})
    grid = np.full((len(sources), len(targets)), np.nan)
    for r in picked:
        grid[sources.index(r.source_domains), targets.index(r.target_domains)] = r.value
    return sources, targets, grid


def plot_heatmap(sources, targets, grid, title: str, path) -> Path:
    fig, ax = plt.subplots(figsize=(1.2 * len(targets) + 2.5, 0.9 * len(sources) + 1.8))
    im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(targets)))
    ax.set_xticklabels(targets, rotation=45, ha="right")
    ax.set_yticks(range(len(sources)))
    ax.set_yticklabels(sources)
    ax.set_xlabel("target")
    ax.set_ylabel("source")
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            if not np.isnan(grid[i, j]):
                v = grid[i, j]
                ax.text(j, i, f"{v:.2f}", ha="center", va="center",
                        color="black" if v > 0.6 else "white", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    path = Path(path)
    # Fixed metadata keeps repeated runs byte-identical.
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_report(rows: Iterable[ReportRow], csv_path) -> list[Path]:
    rows = list(rows)
    csv_path = Path(csv_path)
    out = []
    for metric, k in sorted({(r.metric, r.k) for r in rows}):
        sources, targets, grid = report_matrix(rows, metric, k)
        label = metric if not k else f"{metric}@{k}"
        name = f"{csv_path.stem}_{label.replace('@', '_at_')}.png"
        out.append(plot_heatmap(sources, targets, grid, label, csv_path.with_name(name)))
    return out
