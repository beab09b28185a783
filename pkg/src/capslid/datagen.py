"""Seeded synthetic speech-like corpus.

Each class is a ``ClassSignature``: a band for a slowly drifting voice pitch,
three resonances that shape the harmonic spectrum, a syllable-rate
amplitude modulation, and a noise floor. Clips are a pure function of
(signature, duration, seed).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE_HZ, PcmSignal, write_wav

NONCLASS_LABEL = -1
SPLITS = ("train", "test", "calib", "nonclass")


@dataclass(frozen=True)
class ClassSignature:
    class_id: int
    f0_band: tuple[float, float]
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    am_rate_hz: float
    noise_level: float = 0.02

    def __post_init__(self):
        nyquist = SAMPLE_RATE_HZ / 2
        lo, hi = self.f0_band
        if not 0 < lo <= hi < nyquist:
            raise ValueError(f"invalid f0 band {self.f0_band}")
        if any(not 0 < f < nyquist for f in self.formants):
            raise ValueError(f"formants must lie below {nyquist} Hz")
        if any(b <= 0 for b in self.bandwidths):
            raise ValueError("bandwidths must be positive")


# Resonance layouts are staggered so that every class owns a distinct set of
# frequency regions at the 25-column model resolution (~320 Hz per column).
DEFAULT_SIGNATURES: tuple[ClassSignature, ...] = (
    ClassSignature(0, (100.0, 140.0), (500.0, 1500.0, 2500.0), (120.0, 160.0, 200.0), 3.0),
    ClassSignature(1, (150.0, 200.0), (800.0, 2200.0, 3800.0), (120.0, 180.0, 240.0), 4.0),
    ClassSignature(2, (200.0, 260.0), (300.0, 2900.0, 5000.0), (100.0, 200.0, 260.0), 5.0),
    ClassSignature(3, (120.0, 170.0), (1100.0, 1800.0, 6200.0), (140.0, 160.0, 300.0), 6.0),
    ClassSignature(4, (170.0, 230.0), (650.0, 3300.0, 4400.0), (120.0, 200.0, 240.0), 3.5),
)
# held out of training: the out-of-set ("non-class") language
NONCLASS_SIGNATURE = ClassSignature(5, (90.0, 120.0), (1400.0, 4000.0, 7000.0), (160.0, 220.0, 300.0), 7.0)


def resonance_gain(freqs: np.ndarray, sig: ClassSignature) -> np.ndarray:
    """Sum of Gaussian bumps, one per resonance."""
    f = np.asarray(freqs, dtype=np.float64)[..., None]
    c = np.asarray(sig.formants)
    bw = np.asarray(sig.bandwidths)
    return np.sum(np.exp(-0.5 * ((f - c) / bw) ** 2), axis=-1)


def _smooth_walk(rng, n: int, n_knots: int) -> np.ndarray:
    """Random curve in [0, 1], linearly interpolated between ``n_knots`` points."""
    knots = rng.random(n_knots)
    return np.interp(np.linspace(0.0, n_knots - 1, n), np.arange(n_knots), knots)


def generate_clip(
    sig: ClassSignature,
    duration_s: float,
    seed: int,
    sample_rate_hz: int = SAMPLE_RATE_HZ,
) -> PcmSignal:
    if duration_s < 5:
        raise ValueError("duration must be at least 5 s")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    lo, hi = sig.f0_band
    f0 = lo + (hi - lo) * _smooth_walk(rng, n, max(2, int(duration_s * 2)))
    phase = (2.0 * np.pi * np.cumsum(f0) / sample_rate_hz) % (2.0 * np.pi)
    nyquist = sample_rate_hz / 2
    # harmonic gains vary at the pitch-drift rate; hold them over 64-sample blocks
    coarse = np.arange(0, n, 64)
    audio = np.zeros(n, dtype=np.float32)
    for k in range(1, int(nyquist // lo) + 1):
        offset = rng.uniform(0, 2 * np.pi)
        fk = k * f0[coarse]
        gain = np.where(fk < nyquist, resonance_gain(fk, sig), 0.0)
        if gain.max() < 1e-3:
            continue
        partial = np.sin((k * phase + offset).astype(np.float32))
        partial *= np.repeat(gain.astype(np.float32), 64)[:n]
        audio += partial
    rate = sig.am_rate_hz * (1.0 + 0.1 * rng.standard_normal())
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    audio = audio.astype(np.float64) * envelope
    if sig.noise_level > 0:
        peak = np.max(np.abs(audio)) or 1.0
        audio = audio + sig.noise_level * peak * rng.standard_normal(n)
    peak = np.max(np.abs(audio))
    if peak > 0:
        audio = audio * (0.9 / peak)
    return PcmSignal(audio, sample_rate_hz)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    split: str
    duration_s: float
    seed: int


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(ManifestRecord(**json.loads(line)))
    paths = [r.path for r in records]
    if len(set(paths)) != len(paths):
        raise ValueError(f"{path}: duplicate clip paths in manifest")
    return records


def build_corpus(
    out_dir,
    n_train: int = 200,
    n_test: int = 50,
    n_calib: int = 50,
    n_nonclass: int = 50,
    n_in_set: int = 5,
    n_nonclass_classes: int = 1,
    base_seed: int = 0,
    duration_s: float = 5.0,
) -> list[ManifestRecord]:
    """Write WAV clips and ``manifest.jsonl`` under ``out_dir``.

    Split membership is encoded in the seed: clip ``k`` of split ``s`` for
    class ``c`` uses ``base_seed + 1_000_000 * s + 1_000 * c + k``, so the
    splits draw from disjoint seed ranges.
    """
    if n_in_set > len(DEFAULT_SIGNATURES) or n_nonclass_classes > 1:
        raise ValueError(f"at most {len(DEFAULT_SIGNATURES)} in-set and 1 non-class signature")
    if max(n_train, n_test, n_calib, n_nonclass) >= 1000:
        raise ValueError("at most 999 clips per class and split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = [("train", n_train), ("test", n_test), ("calib", n_calib)]
    jobs = []
    for split_idx, (split, count) in enumerate(plan):
        for sig in DEFAULT_SIGNATURES[:n_in_set]:
            jobs += [(split_idx, split, sig, sig.class_id, k) for k in range(count)]
    if n_nonclass_classes:
        jobs += [(3, "nonclass", NONCLASS_SIGNATURE, NONCLASS_LABEL, k) for k in range(n_nonclass)]
    records = []
    for split_idx, split, sig, label, k in jobs:
        seed = base_seed + 1_000_000 * split_idx + 1_000 * sig.class_id + k
        rel = f"{split}/c{sig.class_id}_{k:04d}.wav"
        (out / split).mkdir(exist_ok=True)
        write_wav(out / rel, generate_clip(sig, duration_s, seed))
        records.append(ManifestRecord(rel, label, split, float(duration_s), seed))
    write_manifest(out / "manifest.jsonl", records)
    return records
