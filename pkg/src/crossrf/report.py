"""Confusion matrices, macro metrics, and three-column comparison reports.

A comparison report captures the cross-channel story in one row: accuracy
of the source model at home (source_only), the same model moved to the
target channel unadapted (target_before), and the adapted target encoder
(target_after), plus macro precision/recall/F1 of the adapted model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

STAGES = ("source_only", "target_before", "target_after")

REPORT_CSV_HEADER = ("scenario,source_only,target_before,target_after,"
                     "macro_precision,macro_recall,macro_f1")


@dataclass
class ConfusionMatrix:
    """counts[t][p] = number of windows of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got "
                             f"{list(self.counts.shape)}")
        if np.any(self.counts < 0):
            raise ValueError("confusion matrix counts must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


class MetricSummary(NamedTuple):
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float


def confusion(predictions: Sequence[int], labels: Sequence[int],
              num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise ValueError(
            f"predictions {list(preds.shape)} and labels {list(labs.shape)} "
            "must be equal-length vectors")
    for name, arr in (("prediction", preds), ("label", labs)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            bad = arr[(arr < 0) | (arr >= num_classes)][0]
            raise ValueError(f"{name} {bad} out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labs, preds), 1)
    return ConfusionMatrix(counts)


def metrics(m: ConfusionMatrix) -> MetricSummary:
    """Accuracy plus macro (unweighted) precision/recall/F1.

    A class with zero predicted support scores precision 0; zero actual
    support scores recall 0; F1 is 0 whenever precision + recall is 0.
    """
    c = m.counts
    total = c.sum()
    if total == 0:
        raise ValueError("metrics of an empty confusion matrix")
    tp = np.diag(c).astype(np.float64)
    pred_support = c.sum(axis=0).astype(np.float64)
    true_support = c.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_support, out=np.zeros_like(tp),
                          where=pred_support > 0)
    recall = np.divide(tp, true_support, out=np.zeros_like(tp),
                       where=true_support > 0)
    pr = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr, out=np.zeros_like(tp),
                   where=pr > 0)
    return MetricSummary(
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


@dataclass
class ComparisonReport:
    scenario: str
    source_only_acc: float   # percent
    target_before_acc: float
    target_after_acc: float
    macro_precision: float   # fractions, adapted model
    macro_recall: float
    macro_f1: float
    matrices: dict = field(default_factory=dict)  # stage name -> ConfusionMatrix

    def __post_init__(self):
        for name in ("source_only_acc", "target_before_acc", "target_after_acc"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"{name} must be a percentage in [0,100], got {v}")


def comparison_report(scenario: str, evals, num_classes: int) -> ComparisonReport:
    """Assemble the three-stage report from (predictions, labels) pairs.

    ``evals`` holds the source_only, target_before, target_after pairs in
    that order.
    """
    if len(evals) != 3:
        raise ValueError(f"expected 3 (predictions, labels) pairs, got {len(evals)}")
    matrices = {}
    accs = {}
    for stage, (preds, labels) in zip(STAGES, evals):
        m = confusion(preds, labels, num_classes)
        matrices[stage] = m
        accs[stage] = 100.0 * metrics(m).accuracy
    after = metrics(matrices["target_after"])
    return ComparisonReport(
        scenario=scenario,
        source_only_acc=accs["source_only"],
        target_before_acc=accs["target_before"],
        target_after_acc=accs["target_after"],
        macro_precision=after.macro_precision,
        macro_recall=after.macro_recall,
        macro_f1=after.macro_f1,
        matrices=matrices,
    )


def write_report_csv(report: ComparisonReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(REPORT_CSV_HEADER + "\n")
        fh.write(f"{report.scenario},"
                 f"{report.source_only_acc:.2f},"
                 f"{report.target_before_acc:.2f},"
                 f"{report.target_after_acc:.2f},"
                 f"{report.macro_precision:.4f},"
                 f"{report.macro_recall:.4f},"
                 f"{report.macro_f1:.4f}\n")


def parse_report_csv(path) -> ComparisonReport:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != REPORT_CSV_HEADER:
            raise ValueError(f"{path}: unexpected report header {header!r}")
        fields = fh.readline().strip().split(",")
    if len(fields) != 7:
        raise ValueError(f"{path}: malformed report row")
    return ComparisonReport(
        scenario=fields[0],
        source_only_acc=float(fields[1]),
        target_before_acc=float(fields[2]),
        target_after_acc=float(fields[3]),
        macro_precision=float(fields[4]),
        macro_recall=float(fields[5]),
        macro_f1=float(fields[6]),
    )


def write_report_json(report: ComparisonReport, path) -> None:
    doc = {
        "scenario": report.scenario,
        "source_only": round(report.source_only_acc, 2),
        "target_before": round(report.target_before_acc, 2),
        "target_after": round(report.target_after_acc, 2),
        "macro_precision": round(report.macro_precision, 4),
        "macro_recall": round(report.macro_recall, 4),
        "macro_f1": round(report.macro_f1, 4),
        "confusion": {stage: m.counts.tolist()
                      for stage, m in report.matrices.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_confusion_csv(matrix: ConfusionMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in matrix.counts:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def read_confusion_csv(path) -> ConfusionMatrix:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([int(v) for v in line.split(",")])
    return ConfusionMatrix(np.array(rows, dtype=np.int64))
