"""Figures for the diagnose report, written next to the CSV tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps repeated renders byte-identical
    "svg.hashsalt": "fedgfm",
}


def degree_histogram(distributions: dict[str, dict[int, int]], path, max_degree: int | None = 30) -> Path:
    """Grouped bars of node counts per degree, one colour per domain.

    Degree 0 is left out and ``max_degree`` caps the axis, matching the usual
    "first 30 degrees from 1" view.
    """
    path = Path(path)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.4, 3.2))
        names = list(distributions)
        top = max((max(d) for d in distributions.values() if d), default=1)
        hi = min(top, max_degree) if max_degree else top
        xs = np.arange(1, hi + 1)
        width = 0.8 / max(len(names), 1)
        for i, name in enumerate(names):
            dist = distributions[name]
            total = sum(dist.values()) or 1
            ys = np.array([dist.get(int(k), 0) / total for k in xs])
            ax.bar(xs + (i - (len(names) - 1) / 2) * width, ys, width=width, label=name)
        ax.set_xlabel("degree")
        ax.set_ylabel("fraction of nodes")
        ax.legend(frameon=False)
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def similarity_heatmap(matrix: np.ndarray, names: list[str], path, title: str = "") -> Path:
    """Annotated cosine-similarity heatmap on a fixed [-1, 1] colour scale."""
    path = Path(path)
    m = np.asarray(matrix, dtype=np.float64)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(names), 0.8 + 0.7 * len(names)))
        im = ax.imshow(m, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_yticks(range(len(names)), names)
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="white" if abs(m[i, j]) > 0.6 else "black")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
