"""Staging metrics: confusion matrices, per-class/macro/micro F1, and
the report/CSV serializations the CLI emits.

Per-class F1 is 2TP / (2TP + FP + FN), defined as 0 when that
denominator is 0 (a class absent from both truth and predictions drags
the macro average down rather than being skipped). Micro-F1 pools the
counts globally, which for exhaustive single-label classification
equals plain accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import N_CLASSES, STAGE_NAMES


def confusion_matrix(true_labels: np.ndarray, pred_labels: np.ndarray,
                     n_classes: int = N_CLASSES) -> np.ndarray:
    """Count matrix u64[n, n], rows = true class, cols = predicted."""
    true_labels = np.asarray(true_labels).reshape(-1)
    pred_labels = np.asarray(pred_labels).reshape(-1)
    if true_labels.shape != pred_labels.shape:
        raise ValueError(f"label arrays differ in length: "
                         f"{true_labels.shape} vs {pred_labels.shape}")
    if true_labels.size and (true_labels.min() < 0 or true_labels.max() >= n_classes
                             or pred_labels.min() < 0 or pred_labels.max() >= n_classes):
        raise ValueError(f"labels out of range for {n_classes} classes")
    flat = true_labels.astype(np.int64) * n_classes + pred_labels.astype(np.int64)
    counts = np.bincount(flat, minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes).astype(np.uint64)


def compute_f1(confusion: np.ndarray) -> tuple[np.ndarray, float, float]:
    """(per_class_f1, macro_f1, micro_f1) from a square count matrix."""
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {confusion.shape}")
    c = confusion.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = 2.0 * tp + fp + fn
    per_class = np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    macro = float(per_class.mean())
    gd = 2.0 * tp.sum() + fp.sum() + fn.sum()
    micro = float(2.0 * tp.sum() / gd) if gd > 0 else 0.0
    return per_class, macro, micro


@dataclass
class EvalReport:
    config: str
    confusion: np.ndarray
    per_class_f1: np.ndarray = field(init=False)
    macro_f1: float = field(init=False)
    micro_f1: float = field(init=False)

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.uint64)
        self.per_class_f1, self.macro_f1, self.micro_f1 = compute_f1(self.confusion)

    @property
    def n_evaluated(self) -> int:
        return int(self.confusion.sum())


def report_to_json(report: EvalReport) -> str:
    payload = {
        "config": report.config,
        "confusion": report.confusion.astype(int).tolist(),
        "per_class_f1": [round(float(v), 6) for v in report.per_class_f1],
        "macro_f1": round(report.macro_f1, 6),
        "micro_f1": round(report.micro_f1, 6),
        "n_evaluated_epochs": report.n_evaluated,
        "stage_names": list(STAGE_NAMES),
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def confusion_to_csv(confusion: np.ndarray, names=STAGE_NAMES) -> str:
    confusion = np.asarray(confusion)
    if confusion.shape != (len(names), len(names)):
        raise ValueError(f"confusion shape {confusion.shape} does not match "
                         f"{len(names)} stage names")
    lines = ["true\\pred," + ",".join(names)]
    for i, name in enumerate(names):
        lines.append(name + "," + ",".join(str(int(v)) for v in confusion[i]))
    return "\n".join(lines) + "\n"


def render_confusion(confusion: np.ndarray, names=STAGE_NAMES) -> str:
    """Aligned text table for logs and the ablation summary."""
    confusion = np.asarray(confusion)
    width = max(6, max(len(n) for n in names) + 1,
                len(str(int(confusion.max()))) + 1 if confusion.size else 2)
    header = " " * width + "".join(f"{n:>{width}}" for n in names)
    rows = [header]
    for i, name in enumerate(names):
        rows.append(f"{name:>{width}}" + "".join(f"{int(v):>{width}}" for v in confusion[i]))
    return "\n".join(rows) + "\n"
