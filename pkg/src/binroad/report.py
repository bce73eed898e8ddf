"""Report rendering: delimited outputs plus matplotlib figures.

Every reporting path writes machine-readable text (CSV / key-value) next to
a rendered PNG so results can be inspected without rerunning anything.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def save_loss_curves(path_png, history: list[dict]):
    """Loss-curve figure; history is one stats dict per epoch."""
    epochs = np.arange(len(history))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [h["total"] for h in history], label="total", lw=2, color="k")
    for key, style in [("focal", "-"), ("lovasz_img", "--"), ("vf", "-"), ("lovasz_pcd", "--"), ("pi", ":")]:
        ax.plot(epochs, [h[key] for h in history], style, label=key, alpha=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(ncol=3, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path_png, dpi=120)
    plt.close(fig)


def save_eval_bars(path_png, scores: dict):
    """Grouped bars of the Table-style metrics for both streams."""
    keys = ["mAcc", "mIoU", "RoadAcc", "RoadIoU"]
    x = np.arange(len(keys))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(x - 0.2, [scores["pcd"][k] for k in keys], width=0.4, label="point cloud")
    ax.bar(x + 0.2, [scores["image"][k] for k in keys], width=0.4, label="image")
    ax.set_xticks(x, keys)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path_png, dpi=120)
    plt.close(fig)


def save_ops_breakdown(path_png, report, twin=None):
    """Stacked overview of where the OPs go, binarized vs full-precision twin."""
    fig, ax = plt.subplots(figsize=(7, 4))
    reports = [("binary", report)] + ([("full precision", twin)] if twin else [])
    labels = [name for name, _ in reports]
    binops = [r.bops / 64 for _, r in reports]
    flops = [r.flops for _, r in reports]
    x = np.arange(len(reports))
    ax.bar(x, binops, width=0.5, label="BOPs / 64")
    ax.bar(x, flops, width=0.5, bottom=binops, label="FLOPs")
    ax.set_xticks(x, labels)
    ax.set_ylabel("OPs")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path_png, dpi=120)
    plt.close(fig)


def save_bench_figure(path_png, results):
    sizes = [r["m"] for r in results]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(sizes, [r["binary_s"] for r in results], "o-", label="binary xnor/popcount")
    ax.plot(sizes, [r["float_loop_s"] for r in results], "s-", label="float loop")
    ax.plot(sizes, [r["float_blas_s"] for r in results], "^-", label="float BLAS")
    ax.set_xlabel("matrix size")
    ax.set_ylabel("median seconds")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path_png, dpi=120)
    plt.close(fig)


def save_osm_overlay(path_png, stitched, skeleton, graph=None):
    """Skeleton over the stitched mask, with graph nodes when available."""
    fig, ax = plt.subplots(figsize=(6.5, 6.5))
    ax.imshow(stitched, cmap="gray", interpolation="nearest")
    ys, xs = np.nonzero(skeleton)
    ax.scatter(xs, ys, s=1.2, c="tab:red", label="skeleton")
    if graph is not None and graph.nodes:
        nx = [xy[0] for xy in graph.nodes.values()]
        ny = [xy[1] for xy in graph.nodes.values()]
        ax.scatter(nx, ny, s=28, facecolors="none", edgecolors="tab:cyan", label="graph nodes")
    ax.legend(loc="lower right", fontsize=8)
    ax.set_title("stitched road mask, skeleton and graph nodes")
    fig.tight_layout()
    fig.savefig(path_png, dpi=120)
    plt.close(fig)


def save_mask_panel(path_png, image_chw, labels, mask_img, mask_pcd):
    """Qualitative panel: input image, truth, and the two stream predictions."""
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    axes[0].imshow(np.transpose(image_chw, (1, 2, 0)))
    axes[0].set_title("image")
    for ax, data, title in zip(axes[1:], [labels, mask_img, mask_pcd],
                               ["truth", "image stream", "pcd stream"]):
        ax.imshow(data, cmap="viridis", vmin=0, vmax=max(1, int(np.max(labels))))
        ax.set_title(title)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path_png, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
