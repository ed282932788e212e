"""Figures written next to the machine-readable outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport  # noqa: E402


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_roc(report: EvalReport, path, title: str | None = None) -> None:
    fpr, tpr = zip(*report.roc)
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.step(fpr, tpr, where="post", lw=1.6, label=f"AUC = {report.auc:.4f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="0.6")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title or f"ACC {report.acc:.3f}  ({report.n_real} real / {report.n_fake} fake)", fontsize=9)
    ax.legend(loc="lower right", frameon=False)
    _finish(fig, path)


def plot_loss(records: list[dict], path) -> None:
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r["loss"] for r in records], lw=1.4, label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross entropy")
    if "train_acc" in records[0]:
        ax2 = ax.twinx()
        ax2.plot(epochs, [r["train_acc"] for r in records], lw=1.0, color="C1", label="train acc")
        ax2.set_ylim(0, 1.02)
        ax2.set_ylabel("train accuracy")
    _finish(fig, path)


def plot_heatmap_overlay(image, heatmap, path, alpha: float = 0.45) -> None:
    """Input frame beside the same frame with the heatmap blended in."""
    rgb = image.transpose(1, 2, 0)
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    axes[0].imshow(rgb)
    axes[1].imshow(rgb)
    axes[1].imshow(heatmap, cmap="jet", alpha=alpha, vmin=0, vmax=1)
    for ax in axes:
        ax.axis("off")
    _finish(fig, path)
