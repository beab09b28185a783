"""Capsule network for language identification.

Encoder: conv (ReLU) -> PrimaryCaps (strided conv, squashed 8-d capsules)
-> MidCaps (dynamic routing) -> LangCaps (dynamic routing), one 16-d capsule
per language. The predicted language is the capsule with the longest output
vector. A three-layer decoder reconstructs the input image from the
true-label capsule and serves as a regularizer during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import LabelOutOfRange, ShapeMismatch


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int] = (32, 25)
    kernel: int = 9
    conv1_channels: int = 128
    primary_banks: int = 32
    primary_dim: int = 8
    primary_stride: int = 2
    mid_caps: int = 32
    mid_dim: int = 8
    n_classes: int = 5
    lang_dim: int = 16
    decoder_hidden: tuple[int, int] = (512, 1024)
    routing_iterations: int = 3

    @property
    def conv1_shape(self) -> tuple[int, int]:
        h, w = self.input_shape
        return h - self.kernel + 1, w - self.kernel + 1

    @property
    def primary_grid(self) -> tuple[int, int]:
        h, w = self.conv1_shape
        s = self.primary_stride
        return (h - self.kernel) // s + 1, (w - self.kernel) // s + 1

    @property
    def n_primary(self) -> int:
        gh, gw = self.primary_grid
        return gh * gw * self.primary_banks

    @property
    def n_pixels(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "kernel": self.kernel,
            "conv1_channels": self.conv1_channels,
            "primary_banks": self.primary_banks,
            "primary_dim": self.primary_dim,
            "primary_stride": self.primary_stride,
            "mid_caps": self.mid_caps,
            "mid_dim": self.mid_dim,
            "n_classes": self.n_classes,
            "lang_dim": self.lang_dim,
            "decoder_hidden": list(self.decoder_hidden),
            "routing_iterations": self.routing_iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["decoder_hidden"] = tuple(d["decoder_hidden"])
        return cls(**d)


@dataclass(frozen=True)
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    recon_weight: float = 0.0005

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError("need 0 < m_minus < m_plus < 1")
        if self.lam <= 0 or self.recon_weight < 0:
            raise ValueError("lam must be positive and recon_weight nonnegative")


@dataclass
class CapsuleOutputs:
    lang_vectors: np.ndarray  # (N, classes, lang_dim)
    norms: np.ndarray  # (N, classes)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    k = cfg.kernel
    h1, h2 = cfg.decoder_hidden
    return {
        "conv1.w": (k, k, 1, cfg.conv1_channels),
        "conv1.b": (cfg.conv1_channels,),
        "primary.w": (k, k, cfg.conv1_channels, cfg.primary_banks * cfg.primary_dim),
        "primary.b": (cfg.primary_banks * cfg.primary_dim,),
        "mid.w": (cfg.n_primary, cfg.mid_caps, cfg.mid_dim, cfg.primary_dim),
        "lang.w": (cfg.mid_caps, cfg.n_classes, cfg.lang_dim, cfg.mid_dim),
        "dec1.w": (cfg.lang_dim, h1),
        "dec1.b": (h1,),
        "dec2.w": (h1, h2),
        "dec2.b": (h2,),
        "dec3.w": (h2, cfg.n_pixels),
        "dec3.b": (cfg.n_pixels,),
    }


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Random initial parameters.

    Each squash of a short vector roughly squares its length, so small
    initial scales compound across the three capsule stages until the class
    norms sit near 1e-10 and gradients vanish below Adam's epsilon. Convs
    therefore use He-uniform bounds and routing transforms N(0, 1/D_in),
    which keep capsule lengths of order 0.5 at every stage. Decoder layers
    are Glorot-uniform; biases start at 0.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name in ("mid.w", "lang.w"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[-1]), size=shape)
        elif len(shape) == 4:
            k, _, cin, _ = shape
            params[name] = _uniform(rng, shape, np.sqrt(6.0 / (k * k * cin)))
        else:
            params[name] = _uniform(rng, shape, np.sqrt(6.0 / (shape[0] + shape[1])))
    return params


def zero_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


def check_params(params: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise ShapeMismatch(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------


@dataclass
class RoutingResult:
    outputs: ad.Node  # (N, J, E)
    couplings: list[np.ndarray] = field(default_factory=list)  # one (N, I, J) per iteration


def route(u_hat: ad.Node, iterations: int) -> RoutingResult:
    """Routing-by-agreement over predictions ``u_hat`` of shape (N, I, J, E)."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    n, i, j, _ = u_hat.shape
    logits = u_hat.graph.constant(np.zeros((n, i, j)))
    result = RoutingResult(outputs=None)
    for it in range(iterations):
        c = ad.softmax(logits, axis=2)
        result.couplings.append(c.value)
        v = ad.squash(ad.einsum("nij,nije->nje", c, u_hat))
        if it < iterations - 1:
            logits = ad.add(logits, ad.einsum("nije,nje->nij", u_hat, v))
    result.outputs = v
    return result


def dynamic_routing(u_hat: np.ndarray, iterations: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Route one set of predictions (I, J, E); returns outputs (J, E) and final couplings (I, J)."""
    g = ad.Graph()
    res = route(g.constant(np.asarray(u_hat, dtype=np.float64)[None]), iterations)
    return res.outputs.value[0], res.couplings[-1][0]


def squash(s: np.ndarray) -> np.ndarray:
    return ad.squash(ad.Graph().constant(s)).value


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass
class EncoderNodes:
    primary: ad.Node  # (N, n_primary, primary_dim), squashed
    mid: RoutingResult
    lang: RoutingResult
    norms: ad.Node  # (N, classes)


def as_batch(images, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.shape == cfg.input_shape:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != cfg.input_shape:
        raise ShapeMismatch(f"expected input of shape {cfg.input_shape}, got {np.shape(images)}")
    return x


def encode(graph: ad.Graph, p: dict[str, ad.Node], x: np.ndarray, cfg: ModelConfig) -> EncoderNodes:
    n = x.shape[0]
    inp = graph.constant(x[..., None])
    h = ad.relu(ad.bias_add(ad.conv2d_valid(inp, p["conv1.w"], 1), p["conv1.b"]))
    prim = ad.bias_add(ad.conv2d_valid(h, p["primary.w"], cfg.primary_stride), p["primary.b"])
    # channel c of the strided conv is component c % dim of bank c // dim
    u = ad.squash(ad.reshape(prim, (n, cfg.n_primary, cfg.primary_dim)))
    mid = route(ad.capsule_predict(u, p["mid.w"]), cfg.routing_iterations)
    lang = route(ad.capsule_predict(mid.outputs, p["lang.w"]), cfg.routing_iterations)
    return EncoderNodes(u, mid, lang, ad.norm(lang.outputs))


def decode(graph: ad.Graph, p: dict[str, ad.Node], lang_vectors: ad.Node, onehot: np.ndarray) -> ad.Node:
    """Reconstruction (N, pixels) from the capsule selected by ``onehot``."""
    picked = ad.einsum("nce,nc->ne", lang_vectors, graph.constant(onehot))
    h = ad.relu(ad.fully_connected(picked, p["dec1.w"], p["dec1.b"]))
    h = ad.relu(ad.fully_connected(h, p["dec2.w"], p["dec2.b"]))
    return ad.sigmoid(ad.fully_connected(h, p["dec3.w"], p["dec3.b"]))


def forward(params: dict[str, np.ndarray], images, cfg: ModelConfig = ModelConfig()) -> CapsuleOutputs:
    x = as_batch(images, cfg)
    g = ad.Graph()
    enc = encode(g, g.parameters_from(params), x, cfg)
    return CapsuleOutputs(enc.lang.outputs.value.copy(), enc.norms.value.copy())


def reconstruct(lang_vector: np.ndarray, params: dict[str, np.ndarray], cfg: ModelConfig = ModelConfig()) -> np.ndarray:
    v = np.asarray(lang_vector, dtype=np.float64)
    g = ad.Graph()
    p = g.parameters_from({k: v_ for k, v_ in params.items() if k.startswith("dec")})
    h = ad.relu(ad.fully_connected(g.constant(v[None]), p["dec1.w"], p["dec1.b"]))
    h = ad.relu(ad.fully_connected(h, p["dec2.w"], p["dec2.b"]))
    return ad.sigmoid(ad.fully_connected(h, p["dec3.w"], p["dec3.b"])).value[0].reshape(cfg.input_shape)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= n_classes):
        raise LabelOutOfRange(f"labels must be integers in [0, {n_classes}), got {labels.tolist()}")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def margin_loss_node(norms: ad.Node, onehot: np.ndarray, cfg: MarginLossConfig) -> ad.Node:
    """Summed margin loss over the batch and the class capsules."""
    g = norms.graph
    present = ad.square(ad.relu(ad.add_scalar(ad.scale(norms, -1.0), cfg.m_plus)))
    absent = ad.square(ad.relu(ad.add_scalar(norms, -cfg.m_minus)))
    terms = ad.add(
        ad.mul(present, g.constant(onehot)),
        ad.mul(absent, g.constant(cfg.lam * (1.0 - onehot))),
    )
    return ad.total(terms)


def margin_loss(norms, true_label: int, cfg: MarginLossConfig = MarginLossConfig()) -> float:
    norms = np.asarray(norms, dtype=np.float64)
    t = one_hot([true_label], norms.shape[-1])[0]
    present = np.maximum(0.0, cfg.m_plus - norms) ** 2
    absent = np.maximum(0.0, norms - cfg.m_minus) ** 2
    return float(np.sum(t * present + cfg.lam * (1.0 - t) * absent))


def reconstruction_error(recon: np.ndarray, image: np.ndarray) -> float:
    d = np.asarray(recon, dtype=np.float64).ravel() - np.asarray(image, dtype=np.float64).ravel()
    return float(np.sum(d * d))


def total_loss(
    image,
    outputs: CapsuleOutputs,
    true_label: int,
    params,
    cfg: MarginLossConfig = MarginLossConfig(),
    model_cfg: ModelConfig = ModelConfig(),
) -> float:
    """Margin loss plus weighted summed squared reconstruction error, for one example."""
    norms = outputs.norms.reshape(-1)
    vectors = outputs.lang_vectors.reshape(norms.size, -1)
    m = margin_loss(norms, true_label, cfg)
    if cfg.recon_weight == 0:
        return m
    recon = reconstruct(vectors[true_label], params, model_cfg)
    return m + cfg.recon_weight * reconstruction_error(recon, image)


@dataclass
class LossGraph:
    graph: ad.Graph
    loss: ad.Node
    margin: ad.Node
    recon: ad.Node | None
    encoder: EncoderNodes


def build_loss(
    params: dict[str, np.ndarray],
    images,
    labels,
    cfg: ModelConfig = ModelConfig(),
    loss_cfg: MarginLossConfig = MarginLossConfig(),
) -> LossGraph:
    """Graph of the batch-summed total loss."""
    x = as_batch(images, cfg)
    onehot = one_hot(labels, cfg.n_classes)
    if onehot.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{x.shape[0]} images but {onehot.shape[0]} labels")
    g = ad.Graph()
    p = g.parameters_from(params)
    enc = encode(g, p, x, cfg)
    margin = margin_loss_node(enc.norms, onehot, loss_cfg)
    loss = margin
    recon = None
    if loss_cfg.recon_weight > 0:
        out = decode(g, p, enc.lang.outputs, onehot)
        recon = ad.total(ad.square(ad.sub(out, g.constant(x.reshape(x.shape[0], -1)))))
        loss = ad.add(margin, ad.scale(recon, loss_cfg.recon_weight))
    return LossGraph(g, loss, margin, recon, enc)
