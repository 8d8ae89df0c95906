"""Matplotlib renderings written next to the CSV/PGM exports.

Every report subcommand saves a PNG figure of each matrix it exports so the
results can be eyeballed without further tooling; the CSV and PGM files stay
the machine-readable contract.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams["figure.dpi"] = 110
plt.rcParams["font.size"] = 8


def _draw(ax, matrix, title, row_labels, col_labels):
    im = ax.imshow(matrix, cmap="gray", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_title(title)
    if row_labels is not None and len(row_labels) <= 40:
        ax.set_yticks(range(len(row_labels)))
        ax.set_yticklabels(row_labels)
    if col_labels is not None and len(col_labels) <= 60:
        ax.set_xticks(range(len(col_labels)))
        ax.set_xticklabels(col_labels, rotation=90)
    return im


def save_heatmap_figure(matrix, path, title="", row_labels=None, col_labels=None):
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(
        figsize=(max(3.0, 0.16 * matrix.shape[1]), max(2.0, 0.3 * matrix.shape[0]) + 1)
    )
    im = _draw(ax, matrix, title, row_labels, col_labels)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_side_by_side_figure(matrices, titles, path, col_labels=None):
    fig, axes = plt.subplots(
        len(matrices),
        1,
        figsize=(max(4.0, 0.16 * matrices[0].shape[1]), 2.2 * len(matrices) + 1),
    )
    if len(matrices) == 1:
        axes = [axes]
    for ax, m, t in zip(axes, matrices, titles):
        im = _draw(ax, np.asarray(m), t, None, col_labels)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_flops_figure(report, path, top=24):
    rows = sorted(report.rows, key=lambda r: r[1], reverse=True)[:top]
    names = [n for n, _ in rows][::-1]
    values = [f / 1e6 for _, f in rows][::-1]
    fig, ax = plt.subplots(figsize=(6, 0.28 * len(rows) + 1.2))
    ax.barh(names, values, color="0.35")
    ax.set_xlabel("MFLOPs per sample")
    ax.set_title(f"per-layer cost (total {report.gflops:.4f} GFLOPs)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
