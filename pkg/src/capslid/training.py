"""Mini-batch Adam training, prediction, and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ChecksumMismatch, CheckpointError, EmptyDataset, LabelOutOfRange, NonFiniteLoss, ShapeMismatch, VersionMismatch
from .model import MarginLossConfig, ModelConfig, build_loss, check_params, forward, init_params

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CLID"
CHECKPOINT_VERSION = 1
GRAD_CHUNK = 8  # examples per gradient job; fixes the reduction order


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    routing_iterations: int = 3
    clip_norm: float = 5.0
    workers: int = 1

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.routing_iterations, self.workers) < 1:
            raise ValueError("batch_size, epochs, routing_iterations and workers must be >= 1")
        if self.learning_rate <= 0 or self.eps <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate, eps and clip_norm must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamMoments":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: AdamMoments,
    config: TrainConfig,
    t: int,
) -> tuple[dict[str, np.ndarray], AdamMoments]:
    """One bias-corrected Adam update; returns new params and moments."""
    if t < 1:
        raise ValueError("step t must be >= 1")
    b1, b2 = config.beta1, config.beta2
    new_params, m_out, v_out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or moments.m[k].shape != p.shape:
            raise ShapeMismatch(f"{k}: param {p.shape}, grad {g.shape}, moment {moments.m[k].shape}")
        m = b1 * moments.m[k] + (1 - b1) * g
        v = b2 * moments.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[k] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        m_out[k], v_out[k] = m, v
    return new_params, AdamMoments(m_out, v_out)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / total
        return {k: g * factor for k, g in grads.items()}, total
    return grads, total


def snap_to_storage(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round to float32 values (held in float64) so the model equals its checkpoint."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


@dataclass
class BatchResult:
    loss: float  # summed over the batch
    grads: dict[str, np.ndarray]  # of the summed loss
    norms: np.ndarray  # (N, classes)


def _chunk_gradients(params, images, labels, model_cfg, loss_cfg) -> BatchResult:
    lg = build_loss(params, images, labels, model_cfg, loss_cfg)
    try:
        return BatchResult(float(lg.loss.value), ad.backprop(lg.graph, lg.loss), lg.encoder.norms.value.copy())
    finally:
        lg.graph.release()


def batch_gradients(
    params,
    images: np.ndarray,
    labels: np.ndarray,
    model_cfg: ModelConfig,
    loss_cfg: MarginLossConfig,
    workers: int = 1,
    pool: ThreadPoolExecutor | None = None,
) -> BatchResult:
    """Loss and gradients summed over a batch.

    The batch is always cut into contiguous chunks of ``GRAD_CHUNK`` examples
    and the chunk results are summed in chunk order. Workers only decide how
    many chunks run at once, so the result is bit-identical for any worker
    count and any scheduling.
    """
    bounds = [np.arange(s, min(s + GRAD_CHUNK, len(images))) for s in range(0, len(images), GRAD_CHUNK)]
    jobs = [(images[b], labels[b]) for b in bounds]
    run = lambda job: _chunk_gradients(params, job[0], job[1], model_cfg, loss_cfg)  # noqa: E731
    if workers <= 1 or len(jobs) < 2:
        parts = [run(j) for j in jobs]
    elif pool is None:
        with ThreadPoolExecutor(max_workers=workers) as own:
            parts = list(own.map(run, jobs))
    else:
        parts = list(pool.map(run, jobs))
    grads = {}
    for k in params:
        acc = parts[0].grads[k].copy()
        for part in parts[1:]:
            acc += part.grads[k]
        grads[k] = acc
    loss = 0.0
    for part in parts:
        loss += part.loss
    return BatchResult(loss, grads, np.concatenate([p.norms for p in parts]))


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    train_acc: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    moments: AdamMoments
    step: int
    stats: list[EpochStats] = field(default_factory=list)


def train(
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig | None = None,
    loss_cfg: MarginLossConfig = MarginLossConfig(),
    params: dict[str, np.ndarray] | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Train from a fixed-seed initialization; fully determined by the inputs.

    Each batch minimizes the mean per-example total loss. Gradients are
    clipped to ``config.clip_norm`` in global norm before the Adam update.
    The returned parameters are rounded to float32 precision so that saving
    and reloading them reproduces the same forward outputs bit for bit.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise EmptyDataset("no training examples")
    if len(images) != len(labels):
        raise ShapeMismatch(f"{len(images)} images but {len(labels)} labels")
    model_cfg = model_cfg or ModelConfig(routing_iterations=config.routing_iterations)
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= model_cfg.n_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {model_cfg.n_classes})")
    params = init_params(model_cfg, config.seed) if params is None else {k: v.copy() for k, v in params.items()}
    check_params(params, model_cfg)
    moments = AdamMoments.zeros_like(params)
    step = 0
    stats = []
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(images))
            loss_sum, correct = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                res = batch_gradients(params, images[idx], labels[idx], model_cfg, loss_cfg, config.workers, pool)
                if not np.isfinite(res.loss) or not all(np.all(np.isfinite(g)) for g in res.grads.values()):
                    raise NonFiniteLoss(
                        f"non-finite loss/gradient at epoch {epoch}, step {step + 1}: "
                        f"loss={res.loss!r}, batch indices {idx.tolist()}"
                    )
                grads = {k: g / len(idx) for k, g in res.grads.items()}
                grads, _ = clip_by_global_norm(grads, config.clip_norm)
                step += 1
                params, moments = adam_step(params, grads, moments, config, step)
                loss_sum += res.loss
                correct += int(np.sum(np.argmax(res.norms, axis=1) == labels[idx]))
            st = EpochStats(epoch, loss_sum / len(images), correct / len(images))
            log.info("epoch %d: mean_loss=%.5f train_acc=%.4f", epoch, st.mean_loss, st.train_acc)
            stats.append(st)
            if on_epoch is not None:
                on_epoch(st)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(snap_to_storage(params), moments, step, stats)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    label: int
    norms: list[float]
    is_non_class: bool = False

    def to_dict(self) -> dict:
        return {"label": self.label, "norms": self.norms, "non_class": self.is_non_class}


def predict_norms(params, images, model_cfg: ModelConfig = ModelConfig(), batch_size: int = 64) -> np.ndarray:
    """LangCaps norms (N, classes) for a stack of images."""
    x = np.asarray(images, dtype=np.float64)
    if x.shape == model_cfg.input_shape:
        x = x[None]
    if len(x) == 0:
        return np.zeros((0, model_cfg.n_classes))
    return np.concatenate(
        [forward(params, x[i : i + batch_size], model_cfg).norms for i in range(0, len(x), batch_size)]
    )


def predict(params, image, model_cfg: ModelConfig = ModelConfig()) -> Prediction:
    """Language with the longest LangCaps vector; ties go to the lowest index."""
    norms = predict_norms(params, image, model_cfg)
    if len(norms) != 1:
        raise ShapeMismatch("predict takes a single image; use predict_norms for batches")
    return prediction_from_norms(norms[0])


def prediction_from_norms(norms) -> Prediction:
    norms = np.asarray(norms, dtype=np.float64)
    return Prediction(int(np.argmax(norms)), [float(v) for v in norms])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig = field(default_factory=ModelConfig)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    step: int = 0
    moments: AdamMoments | None = None
    thresholds: dict | None = None  # ThresholdTable.to_dict()
    frontend: dict = field(default_factory=lambda: {"clip_seconds": 5, "n_bins": 64, "pps": 10})
    version: int = CHECKPOINT_VERSION


def _tensor_table(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    table = sorted(ckpt.params.items())
    if ckpt.moments is not None:
        table += [(f"adam.m.{k}", v) for k, v in sorted(ckpt.moments.m.items())]
        table += [(f"adam.v.{k}", v) for k, v in sorted(ckpt.moments.v.items())]
    return table


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serialize to the CLID v1 byte layout (all integers little-endian).

    magic "CLID" | u32 version | u64 step | u32 tensor count |
    per tensor: u32 name length, name (UTF-8), u32 rank, u64 dims..., f32 data |
    u64 JSON length, canonical JSON config | u32 CRC32 of everything before.
    """
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<IQ", ckpt.version, ckpt.step)
    table = _tensor_table(ckpt)
    out += struct.pack("<I", len(table))
    for name, arr in table:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": asdict(ckpt.train_config),
        "thresholds": ckpt.thresholds,
        "frontend": ckpt.frontend,
    }
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<Q", len(text)) + text
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a CLID checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumMismatch("checkpoint CRC32 does not match contents")
    r = _Reader(data[:-4])
    r.take(4)
    version, step = r.unpack("<IQ")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    (text_len,) = r.unpack("<Q")
    meta = json.loads(r.take(text_len).decode("utf-8"))
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after config block")
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    moments = None
    if any(k.startswith("adam.") for k in tensors):
        moments = AdamMoments(
            {k: tensors[f"adam.m.{k}"] for k in params}, {k: tensors[f"adam.v.{k}"] for k in params}
        )
    return Checkpoint(
        params=params,
        model_config=ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig(**meta["train_config"]),
        step=step,
        moments=moments,
        thresholds=meta.get("thresholds"),
        frontend=meta["frontend"],
        version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
