"""Audio front end: WAV decoding, clipping, STFT spectrograms, model-input resizing.

Spectrograms are stored as ``(time_px, n_bins)`` grids. The model consumes a
32 x 25 image where rows follow time and columns follow frequency.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedWav, TooShort, UnsupportedFormat

SAMPLE_RATE_HZ = 16000
MODEL_ROWS = 32
MODEL_COLS = 25
LOG_EPS = 1e-10


@dataclass(frozen=True)
class PcmSignal:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a nonempty 1-D sequence")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if np.max(np.abs(samples)) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class StftConfig:
    n_bins: int = 64
    pps: int = 10
    sample_rate_hz: int = SAMPLE_RATE_HZ
    floor_db: float = -80.0

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be at least 2")
        if self.pps <= 0:
            raise ValueError("pps must be positive")
        if self.hop_samples < 1:
            raise ValueError("hop_samples must be >= 1")

    @property
    def fft_size(self) -> int:
        return 2 * (self.n_bins - 1)

    @property
    def hop_samples(self) -> int:
        return self.sample_rate_hz // self.pps

    @classmethod
    def for_clip(cls, clip_seconds: int, sample_rate_hz: int = SAMPLE_RATE_HZ) -> "StftConfig":
        """Native rendering per clip length: 5 s -> 50 x 64 and 10 s -> 500 x 129."""
        if clip_seconds == 5:
            return cls(n_bins=64, pps=10, sample_rate_hz=sample_rate_hz)
        if clip_seconds == 10:
            return cls(n_bins=129, pps=50, sample_rate_hz=sample_rate_hz)
        raise ValueError(f"clip_seconds must be 5 or 10, got {clip_seconds}")


@dataclass(frozen=True)
class Spectrogram:
    magnitudes_db: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    @property
    def time_px(self) -> int:
        return self.magnitudes_db.shape[0]


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedWav(f"chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes) -> PcmSignal:
    """Decode a mono PCM16 RIFF/WAVE byte string into samples in [-1, 1]."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWav("missing RIFF/WAVE header")
    fmt = None
    pcm = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedWav("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            pcm = body
    if fmt is None or pcm is None:
        raise MalformedWav("missing fmt or data chunk")
    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format != 1 or bits != 16:
        raise UnsupportedFormat(f"only PCM 16-bit is supported (format={audio_format}, bits={bits})")
    if channels != 1:
        raise UnsupportedFormat(f"only mono is supported, got {channels} channels")
    if rate <= 0:
        raise MalformedWav("sample rate must be positive")
    if len(pcm) < 2:
        raise MalformedWav("no audio samples")
    ints = np.frombuffer(pcm[: len(pcm) - len(pcm) % 2], dtype="<i2")
    return PcmSignal(ints.astype(np.float64) / 32768.0, rate)


def encode_wav(signal: PcmSignal) -> bytes:
    ints = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, signal.sample_rate_hz, 2 * signal.sample_rate_hz, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def read_wav(path) -> PcmSignal:
    return decode_wav(Path(path).read_bytes())


def write_wav(path, signal: PcmSignal) -> None:
    Path(path).write_bytes(encode_wav(signal))


# ---------------------------------------------------------------------------
# Framing and STFT
# ---------------------------------------------------------------------------


def clip_segments(signal: PcmSignal, clip_seconds: int) -> list[PcmSignal]:
    """Cut consecutive non-overlapping clips; the trailing remainder is dropped."""
    if clip_seconds not in (5, 10):
        raise ValueError(f"clip_seconds must be 5 or 10, got {clip_seconds}")
    n = clip_seconds * signal.sample_rate_hz
    count = signal.samples.size // n
    if count == 0:
        raise TooShort(
            f"signal of {signal.duration_s:.3f} s is shorter than one {clip_seconds} s clip"
        )
    return [
        PcmSignal(signal.samples[k * n : (k + 1) * n], signal.sample_rate_hz)
        for k in range(count)
    ]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, w[0] = 0."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def frame_signal(samples: np.ndarray, frame: int, hop: int) -> np.ndarray:
    if samples.size < frame:
        raise TooShort(f"{samples.size} samples is fewer than one window of {frame}")
    count = (samples.size - frame) // hop + 1
    windows = np.lib.stride_tricks.sliding_window_view(samples, frame)
    return windows[: (count - 1) * hop + 1 : hop]


def stft_magnitudes(signal: PcmSignal, config: StftConfig | None = None) -> np.ndarray:
    """Linear |rfft| of each Hann-windowed frame, shape (frames, n_bins)."""
    config = config or StftConfig(sample_rate_hz=signal.sample_rate_hz)
    if config.sample_rate_hz != signal.sample_rate_hz:
        raise ValueError(
            f"config expects {config.sample_rate_hz} Hz, signal is {signal.sample_rate_hz} Hz"
        )
    frames = frame_signal(signal.samples, config.fft_size, config.hop_samples)
    return np.abs(np.fft.rfft(frames * hann_window(config.fft_size), axis=1))


def stft(signal: PcmSignal, config: StftConfig | None = None) -> Spectrogram:
    config = config or StftConfig(sample_rate_hz=signal.sample_rate_hz)
    db = 20.0 * np.log10(stft_magnitudes(signal, config) + LOG_EPS)
    return Spectrogram(np.maximum(db, config.floor_db), config)


# ---------------------------------------------------------------------------
# Resize to model input
# ---------------------------------------------------------------------------


def _linear_taps(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edge-clamped (cv2.INTER_LINEAR convention)
    x = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    x = np.clip(x, 0.0, src - 1)
    lo = np.floor(x).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, x - lo


def bilinear_resize(grid: np.ndarray, rows: int, cols: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    r0, r1, fr = _linear_taps(grid.shape[0], rows)
    c0, c1, fc = _linear_taps(grid.shape[1], cols)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bottom = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def minmax_normalize(grid: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(grid)), float(np.max(grid))
    if hi <= lo:
        return np.full(grid.shape, 0.5)
    return np.clip((grid - lo) / (hi - lo), 0.0, 1.0)


def resize_to_model_input(spec: Spectrogram) -> np.ndarray:
    """32 x 25 image in [0, 1]; rows follow time, columns follow frequency."""
    if spec.magnitudes_db.size == 0:
        raise ValueError("empty spectrogram")
    return minmax_normalize(bilinear_resize(spec.magnitudes_db, MODEL_ROWS, MODEL_COLS))


def signal_to_model_input(signal: PcmSignal, clip_seconds: int = 5, config: StftConfig | None = None) -> np.ndarray:
    config = config or StftConfig.for_clip(clip_seconds, signal.sample_rate_hz)
    return resize_to_model_input(stft(signal, config))


def to_pgm(spec: Spectrogram) -> bytes:
    """Binary grey-map (P5): dB mapped linearly from [floor_db, max] onto [0, 255].

    Image rows are time frames, columns are frequency bins.
    """
    db = spec.magnitudes_db
    lo = spec.config.floor_db
    hi = float(np.max(db))
    if hi <= lo:
        pix = np.zeros(db.shape, dtype=np.uint8)
    else:
        pix = np.round((db - lo) / (hi - lo) * 255.0).clip(0, 255).astype(np.uint8)
    rows, cols = pix.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.tobytes()
