"""Classification metrics, one-vs-rest ROC analysis, and snippet-level segmentation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .dsp import PcmSignal, StftConfig, clip_segments, signal_to_model_input
from .errors import DegenerateClass, EmptyDataset
from .model import ModelConfig
from .nonclass import ThresholdTable, flag
from .training import Prediction, predict_norms, prediction_from_norms

log = logging.getLogger(__name__)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score cut for each point after the origin
    auc: float


def roc_curve(scores, positive) -> RocCurve:
    """Sweep a threshold down through the distinct scores; trapezoid AUC.

    Tied scores move both rates at once, so ties earn half credit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass(f"need positives and negatives, got {n_pos} and {n_neg}")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positive[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(p)[last_of_group]
    fps = (last_of_group + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, s[last_of_group], auc)


def roc_one_vs_rest(scores: np.ndarray, labels, n_classes: int | None = None) -> dict[int, RocCurve]:
    """One curve per class scored by that class's capsule norm.

    Classes lacking positives or negatives are left out with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    curves = {}
    for c in range(n_classes or scores.shape[1]):
        try:
            curves[c] = roc_curve(scores[:, c], labels == c)
        except DegenerateClass as exc:
            log.warning("ROC for class %d omitted: %s", c, exc)
    return curves


@dataclass
class MetricsReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]  # rows actual, columns predicted
    auc: list[float | None]
    macro_auc: float | None
    n_samples: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion,
            "auc": self.auc,
            "macro_auc": self.macro_auc,
            "auc_aggregation": "macro mean of one-vs-rest curves",
            "n_samples": self.n_samples,
            "notes": self.notes,
        }


def _ratio(num: int, den: int, what: str, c: int, notes: list[str]) -> float:
    if den == 0:
        notes.append(f"{what} undefined for class {c} (zero denominator); reported as 0")
        return 0.0
    return num / den


def metrics_from_predictions(labels, predicted, scores=None, n_classes: int = 5) -> MetricsReport:
    labels = np.asarray(labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if labels.size == 0:
        raise EmptyDataset("no samples to evaluate")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    notes: list[str] = []
    precision, recall, f1 = [], [], []
    for c in range(n_classes):
        tp = int(confusion[c, c])
        p = _ratio(tp, int(confusion[:, c].sum()), "precision", c, notes)
        r = _ratio(tp, int(confusion[c, :].sum()), "recall", c, notes)
        precision.append(p)
        recall.append(r)
        f1.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    auc: list[float | None] = [None] * n_classes
    macro = None
    if scores is not None:
        curves = roc_one_vs_rest(scores, labels, n_classes)
        for c in range(n_classes):
            if c in curves:
                auc[c] = curves[c].auc
            else:
                notes.append(f"ROC for class {c} omitted (no positives or no negatives)")
        if curves:
            macro = float(np.mean([cv.auc for cv in curves.values()]))
    return MetricsReport(
        accuracy=float(np.trace(confusion) / labels.size),
        precision=precision,
        recall=recall,
        f1=f1,
        confusion=confusion.tolist(),
        auc=auc,
        macro_auc=macro,
        n_samples=int(labels.size),
        notes=notes,
    )


def evaluate(params, images, labels, model_cfg: ModelConfig = ModelConfig()) -> MetricsReport:
    if len(images) == 0:
        raise EmptyDataset("empty test set")
    norms = predict_norms(params, images, model_cfg)
    return metrics_from_predictions(labels, np.argmax(norms, axis=1), norms, model_cfg.n_classes)


def write_roc_csv(path, curves: dict[int, RocCurve]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "fpr", "tpr"])
        for c, curve in sorted(curves.items()):
            for x, y in zip(curve.fpr, curve.tpr):
                w.writerow([c, repr(float(x)), repr(float(y))])


def write_confusion_csv(path, confusion) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        n = len(confusion)
        w.writerow(["actual\\predicted"] + [str(c) for c in range(n)])
        for c, row in enumerate(confusion):
            w.writerow([c] + [int(v) for v in row])


# ---------------------------------------------------------------------------
# multilingual snippets
# ---------------------------------------------------------------------------


def segment_and_classify(
    params,
    signal: PcmSignal,
    clip_seconds: int = 5,
    model_cfg: ModelConfig = ModelConfig(),
    thresholds: ThresholdTable | None = None,
    stft_config: StftConfig | None = None,
) -> list[Prediction]:
    """Classify consecutive snippets of a long recording, in temporal order."""
    snippets = clip_segments(signal, clip_seconds)
    images = np.stack([signal_to_model_input(seg, clip_seconds, stft_config) for seg in snippets])
    norms = predict_norms(params, images, model_cfg)
    if thresholds is None:
        return [prediction_from_norms(n) for n in norms]
    return [flag(n, thresholds) for n in norms]


def locate_switch(labels, first: int, second: int) -> int:
    """Snippet index where a ``first`` -> ``second`` recording most plausibly switches.

    Picks ``k`` minimizing disagreements with ``[first] * k + [second] * (n - k)``;
    the lowest such ``k`` wins ties.
    """
    labels = np.asarray(labels)
    n = labels.size
    not_first = np.r_[0, np.cumsum(labels != first)]
    not_second_suffix = np.r_[np.cumsum((labels != second)[::-1])[::-1], 0]
    cost = not_first + not_second_suffix
    return int(np.argmin(cost[: n + 1]))
