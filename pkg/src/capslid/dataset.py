"""Manifest-driven feature loading: WAV -> clips -> model inputs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import ManifestRecord, read_manifest
from .dsp import SAMPLE_RATE_HZ, StftConfig, clip_segments, read_wav, signal_to_model_input
from .errors import EmptyDataset, UnsupportedFormat


@dataclass
class Split:
    images: np.ndarray  # (N, 32, 25)
    labels: np.ndarray  # (N,), -1 for out-of-set clips
    sources: list[str]  # manifest path of each image

    def __len__(self):
        return len(self.labels)


def record_inputs(
    root: Path, rec: ManifestRecord, clip_seconds: int = 5, config: StftConfig | None = None
) -> list[np.ndarray]:
    signal = read_wav(root / rec.path)
    if signal.sample_rate_hz != SAMPLE_RATE_HZ:
        raise UnsupportedFormat(f"{rec.path}: {signal.sample_rate_hz} Hz, expected {SAMPLE_RATE_HZ} Hz")
    return [signal_to_model_input(seg, clip_seconds, config) for seg in clip_segments(signal, clip_seconds)]


def load_split(manifest, split: str, clip_seconds: int = 5, config: StftConfig | None = None) -> Split:
    """Model inputs for every clip of ``split``; long clips yield one image per snippet."""
    manifest = Path(manifest)
    root = manifest.parent
    images, labels, sources = [], [], []
    for rec in read_manifest(manifest):
        if rec.split != split:
            continue
        for img in record_inputs(root, rec, clip_seconds, config):
            images.append(img)
            labels.append(rec.label)
            sources.append(rec.path)
    if not images:
        raise EmptyDataset(f"{manifest}: no clips in split {split!r}")
    return Split(np.stack(images), np.asarray(labels, dtype=np.int64), sources)


def save_features(path, splits: dict[str, Split]) -> None:
    arrays = {}
    for name, s in splits.items():
        arrays[f"{name}.images"] = s.images
        arrays[f"{name}.labels"] = s.labels
        arrays[f"{name}.sources"] = np.asarray(s.sources)
    np.savez_compressed(path, **arrays)


def load_features(path) -> dict[str, Split]:
    with np.load(path) as data:
        names = sorted({k.split(".")[0] for k in data.files})
        return {
            n: Split(data[f"{n}.images"], data[f"{n}.labels"], data[f"{n}.sources"].tolist())
            for n in names
        }
