"""Figures written next to the CSV outputs (non-interactive backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_matrix(m: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4.4))
    im = ax.imshow(np.asarray(m), cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_xlabel("node")
    ax.set_ylabel("node")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_profile(profiles: dict[str, Sequence[tuple[int, float]]], path, title: str = "") -> Path:
    """One line per labelled ``(hop, mean weight)`` profile."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for label, prof in profiles.items():
        hops, vals = zip(*prof) if prof else ((), ())
        ax.plot(hops, vals, marker="o", ms=3, label=label)
    ax.set_xlabel("hop distance from center")
    ax.set_ylabel("mean weight")
    if len(profiles) > 1:
        ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_training_curves(rows: Sequence, path) -> Path:
    """Loss and test accuracy per epoch from ``EpochMetrics``-like rows."""
    epochs = [r.epoch for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 3.6))
    ax1.plot(epochs, [r.train_loss for r in rows], color="tab:blue", marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r.test_accuracy for r in rows], color="tab:red", marker="s", ms=3)
    ax2.set_ylabel("test accuracy", color="tab:red")
    ax2.set_ylim(0, 1.02)
    return _save(fig, path)
