"""PNG figures for reports: cross-play heatmaps, transfer bars, training curves."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def crossplay_heatmap(means: np.ndarray, labels: Sequence[str], path, title: str = "cross-play") -> Path:
    means = np.asarray(means, dtype=float)
    size = 1.2 + 0.7 * len(labels)
    fig, ax = plt.subplots(figsize=(size + 1.5, size))
    im = ax.imshow(means, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("partner seats")
    ax.set_ylabel("seat 0")
    for i in range(means.shape[0]):
        for j in range(means.shape[1]):
            ax.text(j, i, f"{means[i, j]:.1f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="mean score")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def bar_chart(rows: Sequence[dict], path, title: str = "", ylabel: str = "mean score") -> Path:
    groups = [r["group"] for r in rows]
    values = [r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.5 + 0.8 * len(rows), 3.5))
    ax.bar(range(len(rows)), values, color="tab:blue")
    ax.set_xticks(range(len(rows)), groups, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def training_curve(metrics_path, path) -> Path:
    """Loss and probe scores per epoch from a metrics.jsonl file."""
    records = [json.loads(line) for line in Path(metrics_path).read_text().splitlines() if line]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    top.plot([r["epoch"] for r in records], [r["loss"] for r in records])
    top.set_ylabel("loss")
    probes = [r for r in records if "probe_scores" in r]
    for key in sorted({k for r in probes for k in r["probe_scores"]}):
        pts = [(r["epoch"], r["probe_scores"][key]) for r in probes if key in r["probe_scores"]]
        bottom.plot(*zip(*pts), marker="o", label=key)
    if probes:
        bottom.legend()
    bottom.set_xlabel("epoch")
    bottom.set_ylabel("greedy score")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
