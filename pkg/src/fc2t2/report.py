"""Run artifacts: metrics CSV, matplotlib figures, and reproducibility
manifests.

Every training/bench command writes a delimited metrics file and renders
the matching figures (loss curves, image grids, timing bars) next to it,
so a run directory is self-describing.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_metrics_csv(path: str, fieldnames: list[str],
                      rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def read_metrics_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_loss_curve(path: str, epochs, losses, ylabel: str = "loss",
                    title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2), layout="constrained")
    ax.semilogy(epochs, losses, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.savefig(path, dpi=140)
    plt.close(fig)


def plot_image_grid(path: str, images: list[np.ndarray],
                    titles: list[str] | None = None, cols: int = 4) -> None:
    n = len(images)
    cols = min(cols, max(n, 1))
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows),
                             squeeze=False, layout="constrained")
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < n:
            img = np.clip(images[i], 0.0, 1.0)
            if img.ndim == 2:
                ax.imshow(img, cmap="viridis")
            else:
                ax.imshow(img)
            if titles:
                ax.set_title(titles[i], fontsize=8)
    fig.savefig(path, dpi=140)
    plt.close(fig)


def plot_bench_bars(path: str, labels: list[str], seconds: list[float],
                    title: str = "wall time") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2), layout="constrained")
    ax.bar(range(len(labels)), seconds)
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right",
                  fontsize=8)
    ax.set_ylabel("seconds")
    ax.set_title(title)
    fig.savefig(path, dpi=140)
    plt.close(fig)


def _hash_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: str, config: dict,
                   input_paths: list[str] | None = None) -> str:
    """Echo the effective config plus content hashes of the inputs so a run
    can be reproduced byte-for-byte."""
    manifest = {
        "config": config,
        "inputs": {p: _hash_file(p) for p in (input_paths or [])
                   if os.path.exists(p)},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return path
