"""Report figures.

Small matplotlib helpers used by the train/eval report paths; every
figure is written next to the delimited output it illustrates.  The Agg
backend keeps rendering headless and PNG metadata is pinned so repeated
runs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

RC = {
    "figure.figsize": (5.2, 3.4),
    "figure.dpi": 130,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}

_METADATA = {"Software": "idevc"}


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)


def training_curves(history: list[dict], path) -> None:
    """Loss components over training steps from the metrics log rows."""
    steps = [row["step"] for row in history]
    with plt.rc_context(RC):
        fig, (left, right) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        for key in ("I1", "I2", "I3"):
            left.plot(steps, [row[key] for row in history], label=key, linewidth=1.0)
        left.set_xlabel("step")
        left.set_ylabel("bound value (nats)")
        left.legend()
        right.plot(steps, [row["loss"] for row in history], color="tab:red", linewidth=1.0)
        right.set_xlabel("step")
        right.set_ylabel("total loss")
        fig.suptitle("training curves")
        _save(fig, path)


def distance_histogram(values, path, title: str = "DTW-MCD to oracle target") -> None:
    values = np.asarray(values, dtype=float)
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.hist(values, bins=min(30, max(5, values.size // 5)), color="tab:blue", alpha=0.85)
        ax.set_xlabel("distance")
        ax.set_ylabel("count")
        ax.set_title(title)
        _save(fig, path)


def accuracy_bars(named: dict[str, float], path) -> None:
    labels = list(named)
    values = [named[k] for k in labels]
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        bars = ax.bar(labels, values, color="tab:green", alpha=0.85)
        for bar, value in zip(bars, values):
            ax.text(
                bar.get_x() + bar.get_width() / 2,
                value,
                f"{value:.3f}",
                ha="center",
                va="bottom",
                fontsize=8,
            )
        ax.set_ylim(0.0, 1.05)
        ax.set_ylabel("accuracy")
        ax.set_title("evaluation accuracies")
        _save(fig, path)


def embedding_scatter(embeddings: np.ndarray, labels, path, title: str) -> None:
    """2-D projection (top two principal directions) colored by group."""
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    centered = embeddings - embeddings.mean(axis=0)
    if centered.shape[1] > 2:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        points = centered @ vt[:2].T
    elif centered.shape[1] == 2:
        points = centered
    else:
        points = np.hstack([centered, np.zeros_like(centered)])
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for group in np.unique(labels):
            mask = labels == group
            ax.scatter(points[mask, 0], points[mask, 1], s=8, alpha=0.7, label=str(group))
        ax.set_title(title)
        ax.set_xlabel("pc 1")
        ax.set_ylabel("pc 2")
        if np.unique(labels).size <= 12:
            ax.legend(markerscale=1.2, ncols=2)
        _save(fig, path)
