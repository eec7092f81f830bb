"""File-based figure rendering for the CLI report paths.

Every report CSV the CLI writes gets a matplotlib companion figure next
to it; attention exports additionally get the raw 8-bit binary PGM
heatmap whose pixels follow the row-major 4x4 sub-image grid.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .dataset import DIMENSIONS  # noqa: E402

_METRICS = ("r_squared", "pearson", "rmse")


def save_report_figure(report, path):
    """Three-panel horizontal bar chart of the per-dimension metrics."""
    values = report.values()
    fig, axes = plt.subplots(1, 3, figsize=(11, 4.2), sharey=True)
    ypos = np.arange(len(DIMENSIONS))[::-1]
    for ax, (col, name) in zip(axes, enumerate(_METRICS)):
        ax.barh(ypos, values[:, col], color="#4878a8")
        ax.set_title(name)
        ax.grid(axis="x", alpha=0.3)
    axes[0].set_yticks(ypos)
    axes[0].set_yticklabels(DIMENSIONS, fontsize=8)
    fig.suptitle(report.provenance_line().lstrip("# "), fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_ablation_figure(reports, path):
    """Grouped per-dimension r-squared bars, one group color per variant."""
    variants = list(reports)
    n = len(variants)
    width = 0.8 / n
    xpos = np.arange(len(DIMENSIONS))
    fig, ax = plt.subplots(figsize=(12, 4.5))
    for i, variant in enumerate(variants):
        vals = [row.r_squared for row in reports[variant].rows]
        ax.bar(xpos + (i - (n - 1) / 2) * width, vals, width,
               label=f"{variant} (mean {np.mean(vals):.3f})")
    ax.set_xticks(xpos)
    ax.set_xticklabels(DIMENSIONS, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("r_squared")
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def attention_heatmap_pixels(alpha_primary):
    """Model-averaged primary attention as a min-max normalized 4x4 uint8 grid.

    alpha_primary: (4, 16) simplex rows.  Sub-image j maps to pixel
    (j // 4, j % 4); a degenerate (flat) map renders as all zeros.
    """
    alpha_primary = np.asarray(alpha_primary, dtype=np.float64)
    mean = alpha_primary.mean(axis=0).reshape(4, 4)
    lo, hi = mean.min(), mean.max()
    if hi - lo < 1e-15:
        return np.zeros((4, 4), dtype=np.uint8)
    return np.round(255.0 * (mean - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path, pixels):
    """8-bit binary portable graymap (P5)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValueError(f"pixel grid must be 2-d, got shape {pixels.shape}")
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())


def save_attention_figure(alpha_primary, path, title=""):
    """Matplotlib companion of the PGM heatmap (same data, same ordering)."""
    mean = np.asarray(alpha_primary, dtype=np.float64).mean(axis=0).reshape(4, 4)
    fig, ax = plt.subplots(figsize=(3.4, 3.2))
    im = ax.imshow(mean, cmap="gray", interpolation="nearest")
    ax.set_xticks(range(4))
    ax.set_yticks(range(4))
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
