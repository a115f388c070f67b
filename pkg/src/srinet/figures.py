"""Matplotlib figure rendering for the CLI report paths (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(metrics: list[dict], path) -> None:
    """Loss and accuracy per epoch, one panel each, split by train/test."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for split in ("train", "test"):
        rows = [m for m in metrics if m["split"] == split]
        if not rows:
            continue
        epochs = [m["epoch"] for m in rows]
        ax_loss.plot(epochs, [m["loss"] for m in rows], label=split)
        ax_acc.plot(epochs, [m["accuracy"] for m in rows], label=split)
        if any(m.get("iou") is not None for m in rows):
            ax_acc.plot(epochs, [m["iou"] for m in rows],
                        linestyle="--", label=f"{split} iou")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_loss.legend()
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_invariance_report(records: list[tuple[str, float]],
                           tolerances: dict[str, float], path) -> None:
    """Per-stage deviation scatter on a log scale with tolerance lines."""
    stages = sorted({stage for stage, _ in records})
    fig, ax = plt.subplots(figsize=(6, 4))
    floor = 1e-18
    for i, stage in enumerate(stages):
        vals = [max(dev, floor) for s, dev in records if s == stage]
        ax.scatter([i] * len(vals), vals, s=8, alpha=0.5)
        tol = tolerances.get(stage)
        if tol is not None:
            ax.hlines(tol, i - 0.3, i + 0.3, color="red", linestyle="--")
    ax.set_yscale("log")
    ax.set_xticks(range(len(stages)))
    ax.set_xticklabels(stages)
    ax.set_ylabel("max-abs deviation under rotation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
