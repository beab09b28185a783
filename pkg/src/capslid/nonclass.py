"""Out-of-set language detection from per-language capsule-norm thresholds.

Calibration runs the classifier over labelled clips and, for each language,
keeps the smallest winning-capsule norm among its true positives. At test
time a clip whose winning norm falls below its language's threshold is
flagged as belonging to none of the trained languages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CalibrationInsufficient
from .model import ModelConfig
from .training import Prediction, predict_norms, prediction_from_norms


@dataclass
class ThresholdTable:
    tau: list[float]
    counts: list[int]  # true positives behind each threshold

    def to_dict(self) -> dict:
        return {"tau": [float(t) for t in self.tau], "counts": [int(c) for c in self.counts]}

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdTable":
        return cls([float(t) for t in d["tau"]], [int(c) for c in d["counts"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def thresholds_from_norms(norms: np.ndarray, labels, n_classes: int | None = None) -> ThresholdTable:
    norms = np.asarray(norms, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = n_classes or norms.shape[1]
    predicted = np.argmax(norms, axis=1)
    tau, counts, missing = [], [], []
    for lang in range(n_classes):
        hits = (predicted == lang) & (labels == lang)
        counts.append(int(hits.sum()))
        if not hits.any():
            missing.append(lang)
            tau.append(float("nan"))
        else:
            tau.append(float(norms[hits, lang].min()))
    if missing:
        raise CalibrationInsufficient(f"no true positives for language(s) {missing}; counts={counts}")
    return ThresholdTable(tau, counts)


def calibrate(params, images, labels, model_cfg: ModelConfig = ModelConfig()) -> ThresholdTable:
    return thresholds_from_norms(predict_norms(params, images, model_cfg), labels, model_cfg.n_classes)


def flag(norms, thresholds: ThresholdTable) -> Prediction:
    """Attach the out-of-set flag; the winning label itself is never changed."""
    pred = prediction_from_norms(norms)
    pred.is_non_class = bool(pred.norms[pred.label] < thresholds.tau[pred.label])
    return pred


def flag_many(norms: np.ndarray, thresholds: ThresholdTable) -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    winner = np.argmax(norms, axis=1)
    tau = np.asarray(thresholds.tau)
    return norms[np.arange(len(norms)), winner] < tau[winner]


def detect(params, image, thresholds: ThresholdTable, model_cfg: ModelConfig = ModelConfig()) -> Prediction:
    norms = predict_norms(params, image, model_cfg)
    return flag(norms[0], thresholds)
