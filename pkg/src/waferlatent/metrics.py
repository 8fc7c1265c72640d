"""Confusion-matrix metrics: per-class and macro precision/recall/F1, accuracy."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES, DatasetSplit, WaferMap
from .errors import InvalidArgumentError


def confusion_matrix(true_labels, predicted_labels, k: int = NUM_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.shape != p.shape or t.ndim != 1:
        raise InvalidArgumentError(f"label arrays differ in shape: {t.shape} vs {p.shape}")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= k):
        raise InvalidArgumentError(f"labels must lie in 0..{k - 1}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t.astype(np.intp), p.astype(np.intp)), 1)
    return cm


@dataclass
class MetricsReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    # classes with no predicted positives (precision set to 0) / no true examples
    no_predictions: list[int] = field(default_factory=list)
    no_support: list[int] = field(default_factory=list)

    @property
    def num_examples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> "OrderedDict[str, object]":
        k = self.confusion.shape[0]
        names = CLASS_NAMES if k == NUM_CLASSES else tuple(str(i) for i in range(k))
        per_class = [
            OrderedDict([("class", c), ("name", names[c]), ("precision", float(self.precision[c])),
                         ("recall", float(self.recall[c])), ("f1", float(self.f1[c])),
                         ("support", int(self.support[c]))])
            for c in range(k)
        ]
        return OrderedDict([
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("num_examples", self.num_examples),
            ("per_class", per_class),
            ("confusion", self.confusion.tolist()),
            ("flags", OrderedDict([("no_predictions", list(self.no_predictions)),
                                   ("no_support", list(self.no_support))])),
        ])

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_table(self) -> str:
        rows = [("class", "precision", "recall", "f1", "support")]
        d = self.to_dict()
        for entry in d["per_class"]:
            rows.append((f"{entry['class']} {entry['name']}", f"{entry['precision']:.4f}",
                         f"{entry['recall']:.4f}", f"{entry['f1']:.4f}", str(entry["support"])))
        rows.append(("macro", f"{self.macro_precision:.4f}", f"{self.macro_recall:.4f}",
                     f"{self.macro_f1:.4f}", str(self.num_examples)))
        rows.append(("accuracy", "", "", f"{self.accuracy:.4f}", ""))
        return format_table(rows)


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for n, r in enumerate(rows):
        cells = [str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_from_confusion(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise InvalidArgumentError("cannot score an empty evaluation set")
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    present = support > 0
    return MetricsReport(
        confusion=cm,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        accuracy=float(tp.sum() / total),
        no_predictions=[int(c) for c in np.flatnonzero(predicted == 0)],
        no_support=[int(c) for c in np.flatnonzero(~present)],
    )


def report_from_labels(true_labels, predicted_labels, k: int = NUM_CLASSES) -> MetricsReport:
    return report_from_confusion(confusion_matrix(true_labels, predicted_labels, k))


def evaluate(model, vae, test_set: Sequence[WaferMap]) -> MetricsReport:
    from .classifier import predict_batch

    if not test_set:
        raise InvalidArgumentError("evaluate: empty test set")
    if any(m.label is None for m in test_set):
        raise InvalidArgumentError("evaluate: every test map needs a label")
    predicted, _ = predict_batch(model, vae, test_set)
    return report_from_labels([m.label for m in test_set], predicted, model.config.num_classes)


def hidden_labels(split: DatasetSplit) -> dict[str, int]:
    """True labels of the unlabeled portion. Evaluation code only."""
    return dict(split._hidden_labels)
