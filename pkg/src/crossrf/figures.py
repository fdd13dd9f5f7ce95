"""Figure rendering for the report path: confusion heatmaps, the
three-column accuracy comparison, and per-stage training curves.

PNGs land next to the delimited outputs; the delimited files stay the
machine-readable source of truth.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .report import ComparisonReport, ConfusionMatrix  # noqa: E402
from .training import StageLog  # noqa: E402

_DPI = 130


def plot_confusion(matrix: ConfusionMatrix, path, title: str = "",
                   class_names=None) -> None:
    k = matrix.num_classes
    names = class_names or [f"dev {i}" for i in range(k)]
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(matrix.counts, cmap="Blues")
    threshold = matrix.counts.max() / 2 if matrix.total else 0
    for t in range(k):
        for p in range(k):
            v = int(matrix.counts[t, p])
            ax.text(p, t, str(v), ha="center", va="center", fontsize=8,
                    color="white" if v > threshold else "black")
    ax.set_xticks(range(k), names, fontsize=8)
    ax.set_yticks(range(k), names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title, fontsize=10)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def plot_comparison(report: ComparisonReport, path) -> None:
    labels = ["source only", "target\n(before)", "target\n(adapted)"]
    values = [report.source_only_acc, report.target_before_acc,
              report.target_after_acc]
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    bars = ax.bar(labels, values, color=["#4c72b0", "#c44e52", "#55a868"])
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 1, f"{v:.1f}",
                ha="center", fontsize=9)
    ax.set_ylim(0, 105)
    ax.set_ylabel("accuracy [%]")
    ax.set_title(report.scenario, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def plot_stage_log(log: StageLog, path, title: str = "") -> None:
    epochs = [r.epoch for r in log.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.4, 3.0))
    plotted = False
    for attr, label in (("cls_loss", "classification"),
                        ("disc_loss", "discriminator"),
                        ("distill_loss", "distillation"),
                        ("total_loss", "total")):
        series = [getattr(r, attr) for r in log.rows]
        if any(v != 0.0 for v in series):
            ax1.plot(epochs, series, label=label, linewidth=1.2)
            plotted = True
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    if plotted:
        ax1.legend(fontsize=7)
    ax2.plot(epochs, [100.0 * r.val_accuracy for r in log.rows],
             color="#55a868", linewidth=1.4)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val accuracy [%]")
    ax2.set_ylim(0, 105)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
