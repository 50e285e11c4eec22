"""Accuracy, confusion matrix, per-class precision/recall/F1 and macro F1."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import EvaluationError
from .nn_core import MlpModel, predict

CSV_FIXED_COLUMNS = ("strategy", "setting", "round", "accuracy", "macro_f1", "sim_time")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64; rows = true class, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsRecord:
    round: int
    accuracy: float
    macro_f1: float
    per_class: list[ClassScores] = field(default_factory=list)
    sim_time: float = 0.0
    strategy: str = ""
    setting: str = ""

    @staticmethod
    def csv_header(num_classes: int) -> list[str]:
        cols = list(CSV_FIXED_COLUMNS)
        for c in range(num_classes):
            cols += [f"precision_{c}", f"recall_{c}", f"f1_{c}"]
        return cols

    def csv_row(self) -> list[str]:
        # repr keeps every float bit-exact and the output byte-stable across runs
        row = [self.strategy, self.setting, str(self.round), repr(self.accuracy), repr(self.macro_f1),
               repr(self.sim_time)]
        for s in self.per_class:
            row += [repr(s.precision), repr(s.recall), repr(s.f1)]
        return row


def confusion(true_labels, predicted_labels, num_classes: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise EvaluationError(f"{len(t)} true labels but {len(p)} predictions")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= num_classes):
        raise EvaluationError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def precision_recall_f1(cm: ConfusionMatrix) -> tuple[list[ClassScores], float, float, float]:
    """Per-class scores and (macro precision, macro recall, macro F1).

    Classes that are neither present nor predicted are left out of the macro means.
    """
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    col = counts.sum(axis=0).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)
    scores = []
    for c in range(cm.num_classes):
        p = tp[c] / col[c] if col[c] else 0.0
        r = tp[c] / row[c] if row[c] else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        scores.append(ClassScores(float(p), float(r), float(f)))
    used = [c for c in range(cm.num_classes) if row[c] or col[c]]
    if not used:
        return scores, 0.0, 0.0, 0.0
    macro_p = float(np.mean([scores[c].precision for c in used]))
    macro_r = float(np.mean([scores[c].recall for c in used]))
    macro_f = float(np.mean([scores[c].f1 for c in used]))
    return scores, macro_p, macro_r, macro_f


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EvaluationError("no samples evaluated")
    return float(np.trace(cm.counts) / cm.total)


def evaluate(model: MlpModel, test_ds: Dataset | None, round: int = 0, sim_time: float = 0.0,
             strategy: str = "", setting: str = "") -> MetricsRecord:
    if test_ds is None or len(test_ds.labels) == 0:
        raise EvaluationError("empty test set")
    cm = confusion(test_ds.labels, predict(model, test_ds.features), test_ds.num_classes)
    per_class, _, _, macro_f1 = precision_recall_f1(cm)
    return MetricsRecord(round, accuracy(cm), macro_f1, per_class, sim_time, strategy, setting)
