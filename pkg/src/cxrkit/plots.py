"""Thin matplotlib emitters for the report bundle figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ConfusionMatrix, Curve, ScoreHistogram
from .retrieval import ProjectedPoint

POSITIVE_COLOR = "#c0392b"
NEGATIVE_COLOR = "#2a6f97"


def save_roc_figure(curve: Curve, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    xs = [p[0] for p in curve.points]
    ys = [p[1] for p in curve.points]
    ax.plot(xs, ys, color=POSITIVE_COLOR, lw=1.8, label=f"AUC = {curve.auc:.3f}")
    ax.plot([0, 1], [0, 1], color="0.6", ls="--", lw=1.0, label="chance")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"ROC {title}".strip())
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_pr_figure(curve: Curve, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    xs = [p[0] for p in curve.points]
    ys = [p[1] for p in curve.points]
    ax.plot(xs, ys, color=NEGATIVE_COLOR, lw=1.8, label=f"AUC = {curve.auc:.3f}")
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_title(f"Precision-Recall {title}".strip())
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_histogram_figure(
    hist: ScoreHistogram, threshold: float, path: str | Path, title: str = ""
) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    edges = np.asarray(hist.bin_edges)
    centers = (edges[:-1] + edges[1:]) / 2.0
    width = edges[1] - edges[0]
    ax.bar(centers, hist.negative_counts, width=width * 0.92, color=NEGATIVE_COLOR,
           alpha=0.75, label="ground truth negative")
    ax.bar(centers, hist.positive_counts, width=width * 0.92, color=POSITIVE_COLOR,
           alpha=0.75, bottom=hist.negative_counts, label="ground truth positive")
    ax.axvline(threshold, color="k", ls="--", lw=1.0, label=f"threshold {threshold:g}")
    ax.set_xlabel("Classification score")
    ax.set_ylabel("Images")
    ax.set_title(f"Score histogram {title}".strip())
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_confusion_figure(cm: ConfusionMatrix, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    grid = np.array([[cm.tn, cm.fp], [cm.fn, cm.tp]], dtype=float)
    ax.imshow(grid, cmap="Blues")
    for (i, j), value in np.ndenumerate(grid):
        ax.text(j, i, f"{int(value)}", ha="center", va="center",
                color="black" if value < grid.max() * 0.6 else "white")
    ax.set_xticks([0, 1], ["called negative", "called positive"])
    ax.set_yticks([0, 1], ["negative", "positive"])
    ax.set_xlabel("Prediction")
    ax.set_ylabel("Ground truth")
    ax.set_title(f"Confusion {title}".strip())
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_projection_figure(points: list[ProjectedPoint], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    for label, color in (("negative", NEGATIVE_COLOR), ("positive", POSITIVE_COLOR)):
        xs = [p.xy[0] for p in points if p.label == label]
        ys = [p.xy[1] for p in points if p.label == label]
        ax.scatter(xs, ys, s=14, color=color, alpha=0.8, label=label, edgecolors="none")
    ax.set_xlabel("dimension 1")
    ax.set_ylabel("dimension 2")
    ax.set_title("Embedding projection")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
