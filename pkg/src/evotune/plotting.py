"""Static figures for the ``report`` and ``plot`` commands."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from evotune.reporting import Histogram  # noqa: E402


def plot_progress(curve: Sequence[dict], path: Path | str, k: int = 50, unit: str = "%") -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))
    b = [row["budget"] for row in curve]
    ax1.plot(b, [row["top1_gap"] for row in curve], label="top-1")
    ax1.plot(b, [row["topk_gap"] for row in curve], label=f"top-{k}")
    ax1.set_xlabel("sampled outputs")
    ax1.set_ylabel(f"optimality gap ({unit})")
    ax1.legend()
    ax2.plot(b, [row["unique_scores"] for row in curve], color="tab:green")
    ax2.set_xlabel("sampled outputs")
    ax2.set_ylabel("unique scores")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_histogram(hist: Histogram, path: Path | str, unit: str = "%") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.8))
    ax.bar(hist.edges[:-1], hist.counts, width=hist.bin_width, align="edge", edgecolor="black", linewidth=0.4)
    ax.set_xlabel(f"optimality gap ({unit})")
    ax.set_ylabel("programs")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
