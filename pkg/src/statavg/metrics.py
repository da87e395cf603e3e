"""Confusion matrices and one-vs-rest classification metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import records

AVERAGING = "macro"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def to_record(self) -> dict:
        return {"version": records.FORMAT_VERSION, "kind": "confusion_matrix",
                "class_names": list(self.class_names), "counts": self.counts}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\predicted", *self.class_names])
            for name, row in zip(self.class_names, self.counts):
                w.writerow([name, *(int(v) for v in row)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "ConfusionMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        names = tuple(rows[0][1:])
        counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
        return cls(counts, names)


def confusion(y_true, y_pred, num_classes: int, class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError("true and predicted label vectors differ in length")
    for v in (y_true, y_pred):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"label outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    names = tuple(class_names) if class_names is not None else tuple(str(c) for c in range(num_classes))
    return ConfusionMatrix(counts, names)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def per_class_metrics(m: ConfusionMatrix, c: int) -> dict:
    """One-vs-rest counts and rates for class ``c``.

    acc = (TP + TN) / (TP + TN + FP + FN), f1 = 2TP / (2TP + FP + FN);
    any zero denominator yields 0.
    """
    if not 0 <= c < m.num_classes:
        raise ValueError(f"class index {c} out of range")
    counts = m.counts
    tp = int(counts[c, c])
    fn = int(counts[c, :].sum()) - tp
    fp = int(counts[:, c].sum()) - tp
    tn = m.total - tp - fn - fp
    return {
        "TP": tp, "TN": tn, "FP": fp, "FN": fn,
        "acc": _ratio(tp + tn, tp + tn + fp + fn),
        "tpr": _ratio(tp, tp + fn),
        "fpr": _ratio(fp, fp + tn),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
    }


@dataclass(frozen=True)
class MetricReport:
    per_class: tuple[dict, ...]
    macro: dict
    micro: dict
    class_names: tuple[str, ...]

    def to_record(self, verbose: bool = False, **extra) -> dict:
        rec = {
            "version": records.FORMAT_VERSION,
            "kind": "metric_report",
            **extra,
            "averaging": AVERAGING,
            "macro": self.macro,
            "per_class": [{"class": n, **pc} for n, pc in zip(self.class_names, self.per_class)],
        }
        if verbose:
            rec["micro"] = self.micro
        return rec


def macro_report(m: ConfusionMatrix) -> MetricReport:
    """Unweighted class means of the one-vs-rest metrics (micro rates alongside)."""
    if m.num_classes < 2:
        raise ValueError("macro report needs at least 2 classes")
    per = tuple(per_class_metrics(m, c) for c in range(m.num_classes))
    macro = {k: float(np.mean([p[k] for p in per])) for k in ("acc", "tpr", "fpr", "f1")}
    tp = sum(p["TP"] for p in per)
    fp = sum(p["FP"] for p in per)
    fn = sum(p["FN"] for p in per)
    tn = sum(p["TN"] for p in per)
    micro = {
        "acc": _ratio(tp + tn, tp + tn + fp + fn),
        "tpr": _ratio(tp, tp + fn),
        "fpr": _ratio(fp, fp + tn),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
    }
    return MetricReport(per, macro, micro, m.class_names)


def average_reports(reports: Sequence[MetricReport]) -> dict:
    """Cross-client average of macro metrics (each client weighs equally)."""
    if not reports:
        raise ValueError("no reports to average")
    return {k: float(np.mean([r.macro[k] for r in reports])) for k in ("acc", "tpr", "fpr", "f1")}
