"""Confusion matrices and accuracy / precision / recall / F1.  Patient is the positive class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .dataio import Label
from .errors import LengthMismatch, UndefinedMetric


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def rounded(self, digits: int = 2) -> tuple[float, float, float, float]:
        return tuple(round(v, digits) for v in (self.accuracy, self.precision, self.recall, self.f1))

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}


def accumulate(predictions: Sequence, truths: Sequence) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truths)} truths")
    if not predictions:
        raise LengthMismatch("need at least one prediction")
    tp = fp = tn = fn = 0
    for pred, truth in zip(predictions, truths):
        pred_patient = Label.parse(pred) is Label.PATIENT
        true_patient = Label.parse(truth) is Label.PATIENT
        if true_patient and pred_patient:
            tp += 1
        elif true_patient:
            fn += 1
        elif pred_patient:
            fp += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, tn, fn)


def metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.total == 0:
        raise UndefinedMetric("accuracy", "tp+fp+tn+fn")
    if cm.tp + cm.fp == 0:
        raise UndefinedMetric("precision", "tp+fp")
    if cm.tp + cm.fn == 0:
        raise UndefinedMetric("recall", "tp+fn")
    a = (cm.tp + cm.tn) / cm.total
    p = cm.tp / (cm.tp + cm.fp)
    r = cm.tp / (cm.tp + cm.fn)
    if p + r == 0:
        raise UndefinedMetric("f1", "precision+recall")
    return Metrics(a, p, r, 2 * p * r / (p + r))


def metrics_table(rows: dict) -> str:
    """Aligned text table; ``rows`` maps (system, size) to a ``Metrics``."""
    header = f"{'System':<8}{'Size':<12}{'A':>8}{'P':>8}{'R':>8}{'F1':>8}"
    lines = [header, "-" * len(header)]
    for (system, size), m in rows.items():
        a, p, r, f = m.rounded(2)
        lines.append(f"{system:<8}{size:<12}{a:>8.2f}{p:>8.2f}{r:>8.2f}{f:>8.2f}")
    return "\n".join(lines)
