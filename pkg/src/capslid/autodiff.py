"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Graph` records every operation in insertion order, which is also a
valid topological order, so :func:`backprop` is a single reverse sweep. Only
the operations the capsule network needs are provided. There is no
broadcasting: operands of elementwise ops must have identical shapes, and
per-channel terms go through explicit ops such as :func:`bias_add`.

Conventions at non-differentiable points: ``relu'(0) = 0`` and the gradient
of the Euclidean norm at the zero vector is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch

class Node:
    __slots__ = ("graph", "id", "kind", "inputs", "value", "backward", "requires_grad", "name")

    def __init__(self, graph, id, kind, inputs, value, backward, requires_grad, name=None):
        self.graph = graph
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.backward = backward
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.kind}, shape={self.shape})"


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Node] = {}
        # activation mask of every relu, in emission order; used to spot kink crossings
        self.relu_masks: list[np.ndarray] = []

    def _emit(self, kind, inputs, value, backward=None, requires_grad=None, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        if requires_grad is None:
            requires_grad = any(n.requires_grad for n in inputs)
        node = Node(self, len(self.nodes), kind, tuple(inputs), value, backward, requires_grad, name)
        self.nodes.append(node)
        return node

    def parameter(self, name: str, value) -> Node:
        if name in self.parameters:
            raise ValueError(f"duplicate parameter {name!r}")
        node = self._emit("parameter", (), np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.parameters[name] = node
        return node

    def constant(self, value) -> Node:
        return self._emit("constant", (), np.array(value, dtype=np.float64), requires_grad=False)

    def release(self) -> None:
        """Drop recorded values and closures; nodes and graph reference each other."""
        for node in self.nodes:
            node.backward = None
            node.inputs = ()
        self.nodes = []
        self.relu_masks = []

    def parameters_from(self, params: Mapping[str, np.ndarray]) -> dict[str, Node]:
        return {k: self.parameter(k, v) for k, v in params.items()}


def backprop(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    """Gradient of a scalar node with respect to every parameter of ``graph``."""
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.id + 1)
    grads[loss.id] = np.ones_like(loss.value)
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = grads[node.id]
        if g is None or not node.requires_grad or node.backward is None:
            continue
        for parent, pg in zip(node.inputs, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if grads[parent.id] is None:
                grads[parent.id] = pg
            else:
                grads[parent.id] = grads[parent.id] + pg
    out = {}
    for name, p in graph.parameters.items():
        g = grads[p.id] if p.id <= loss.id else None
        out[name] = np.zeros_like(p.value) if g is None else np.asarray(g).reshape(p.shape)
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _same_shape(op: str, *nodes: Node) -> None:
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ShapeMismatch(f"{op}: operand shapes differ: {[n.shape for n in nodes]}")


def _graph_of(*nodes: Node) -> Graph:
    g = nodes[0].graph
    if any(n.graph is not g for n in nodes):
        raise ValueError("operands belong to different graphs")
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _graph_of(a, b)._emit("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _graph_of(a, b)._emit("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _graph_of(a, b)._emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.graph._emit("scale", (a,), a.value * c, lambda g: (g * c,))


def add_scalar(a: Node, c: float) -> Node:
    return a.graph._emit("add_scalar", (a,), a.value + float(c), lambda g: (g,))


def square(a: Node) -> Node:
    av = a.value
    return a.graph._emit("square", (a,), av * av, lambda g: (2.0 * av * g,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    a.graph.relu_masks.append(mask)
    return a.graph._emit("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def sigmoid(a: Node) -> Node:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.graph._emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------


def reshape(a: Node, shape: Sequence[int]) -> Node:
    old = a.shape
    value = a.value.reshape(shape)
    return a.graph._emit("reshape", (a,), value, lambda g: (g.reshape(old),))


def total(a: Node) -> Node:
    """Sum of every element, as a 0-d node."""
    shape = a.shape
    return a.graph._emit("sum", (a,), np.sum(a.value), lambda g: (np.full(shape, float(g)),))


def bias_add(x: Node, b: Node) -> Node:
    """Add a per-channel vector along the last axis of ``x``."""
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"bias_add: bias {b.shape} does not match channels of {x.shape}")
    axes = tuple(range(x.value.ndim - 1))
    return _graph_of(x, b)._emit(
        "bias_add", (x, b), x.value + b.value, lambda g: (g, g.sum(axis=axes))
    )


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------


def fully_connected(x: Node, w: Node, b: Node) -> Node:
    """Affine map ``x @ w + b`` for ``x`` of shape (N, Din) and ``w`` of shape (Din, Dout)."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"fully_connected: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeMismatch(f"fully_connected: bias {b.shape} vs output width {w.shape[1]}")
    xv, wv = x.value, w.value

    def backward(g):
        gx = g @ wv.T if x.requires_grad else None
        return gx, xv.T @ g, g.sum(axis=0)

    return _graph_of(x, w, b)._emit("fully_connected", (x, w, b), xv @ wv + b.value, backward)


def einsum(subscripts: str, a: Node, b: Node) -> Node:
    """Two-operand einsum without repeated indices inside one operand."""
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index in {s!r}")
    av, bv = a.value, b.value

    def backward(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, bv, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{sa},{out}->{sb}", av, g, optimize=True) if b.requires_grad else None
        return ga, gb

    value = np.einsum(subscripts, av, bv, optimize=True)
    return _graph_of(a, b)._emit("einsum", (a, b), value, backward)


def capsule_predict(u: Node, w: Node) -> Node:
    """Per-pair transforms: ``out[n, i, j] = w[i, j] @ u[n, i]``.

    ``u`` is (N, I, D) child capsules and ``w`` is (I, J, E, D); the result is
    (N, I, J, E) prediction vectors.
    """
    n, i, d = u.shape
    if w.value.ndim != 4 or w.shape[0] != i or w.shape[3] != d:
        raise ShapeMismatch(f"capsule_predict: u {u.shape} vs w {w.shape}")
    _, j, e, _ = w.shape
    # batched over i: (I, N, D) @ (I, D, J*E)
    ut = np.ascontiguousarray(u.value.transpose(1, 0, 2))
    wt = np.ascontiguousarray(w.value.reshape(i, j * e, d).transpose(0, 2, 1))
    value = np.matmul(ut, wt).reshape(i, n, j, e).transpose(1, 0, 2, 3)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(i, n, j * e)
        gu = np.matmul(gt, wt.transpose(0, 2, 1)).transpose(1, 0, 2) if u.requires_grad else None
        gw = np.matmul(ut.transpose(0, 2, 1), gt).transpose(0, 2, 1).reshape(i, j, e, d)
        return gu, gw

    return _graph_of(u, w)._emit("capsule_predict", (u, w), value, backward)


def conv2d_valid(x: Node, k: Node, stride: int = 1) -> Node:
    """Valid cross-correlation, channels last.

    ``x`` is (H, W, Cin) or (N, H, W, Cin); ``k`` is (K, K, Cin, Cout).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    batched = x.value.ndim == 4
    xv = x.value if batched else x.value[None]
    if xv.ndim != 4 or k.value.ndim != 4:
        raise ShapeMismatch(f"conv2d_valid: input {x.shape}, kernels {k.shape}")
    n, h, w, cin = xv.shape
    kh, kw, kcin, cout = k.shape
    if kcin != cin or kh != kw:
        raise ShapeMismatch(f"conv2d_valid: input {x.shape} vs kernels {k.shape}")
    if h < kh or w < kw:
        raise ShapeMismatch(f"conv2d_valid: input {x.shape} smaller than kernel {kh}x{kw}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    # patch matrix with columns ordered (kh, kw, cin), matching the kernel layout
    win = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    kmat = k.value.reshape(kh * kw * cin, cout)
    value = (cols @ kmat).reshape(n, ho, wo, cout)

    def backward(g):
        gmat = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ gmat).reshape(kh, kw, cin, cout)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            gx = np.zeros_like(xv)
            for a in range(kh):
                for b in range(kw):
                    gx[:, a : a + (ho - 1) * stride + 1 : stride, b : b + (wo - 1) * stride + 1 : stride] += gcols[:, :, :, a, b]
            if not batched:
                gx = gx[0]
        return gx, gk

    if not batched:
        value = value[0]
    return _graph_of(x, k)._emit("conv2d_valid", (x, k), value, backward)


# ---------------------------------------------------------------------------
# capsule nonlinearities
# ---------------------------------------------------------------------------


def norm(a: Node) -> Node:
    """Euclidean length along the last axis."""
    av = a.value
    n = np.sqrt(np.sum(av * av, axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[..., None], av * (g / safe)[..., None], 0.0),)

    return a.graph._emit("norm", (a,), n, backward)


def squash(a: Node) -> Node:
    """``v = s * |s| / (1 + |s|^2)``, i.e. ``|s|^2/(1+|s|^2) * s/|s|``, with ``squash(0) = 0``."""
    s = a.value
    n2 = np.sum(s * s, axis=-1, keepdims=True)
    n = np.sqrt(n2)
    f = n / (1.0 + n2)

    def backward(g):
        # dv = f ds + s f'(n) (s . ds) / n,  f'(n) = (1 - n^2) / (1 + n^2)^2
        safe = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, (1.0 - n2) / ((1.0 + n2) ** 2 * safe), 0.0)
        return (f * g + s * coef * np.sum(s * g, axis=-1, keepdims=True),)

    return a.graph._emit("squash", (a,), s * f, backward)


def softmax(a: Node, axis: int = -1) -> Node:
    z = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return a.graph._emit("softmax", (a,), y, backward)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class FiniteDiffReport:
    """Outcome of :func:`finite_diff_check`.

    ``rel_error[name]`` compares the probed entries of one parameter as
    vectors, ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-12)`` with Euclidean
    norms; this decides pass/fail. ``worst_entry[name]`` is the same ratio
    taken entry by entry, for diagnostics: entries whose gradient is near the
    roundoff floor of the difference quotient (about 1e-16 |loss| / step) can
    show large ratios without any defect in the analytic gradient.
    """

    tolerance: float
    rel_error: dict[str, float] = field(default_factory=dict)
    worst_entry: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    excluded: dict[str, list[int]] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def relative_error(g_ad, g_fd) -> float:
    g_ad = np.asarray(g_ad, dtype=np.float64).ravel()
    g_fd = np.asarray(g_fd, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(g_ad), np.linalg.norm(g_fd), 1e-12)
    return float(np.linalg.norm(g_ad - g_fd) / scale)


def _same_kinks(a: Graph, b: Graph) -> bool:
    return len(a.relu_masks) == len(b.relu_masks) and all(
        np.array_equal(x, y) for x, y in zip(a.relu_masks, b.relu_masks)
    )


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], tuple[Graph, Node]],
    params: Mapping[str, np.ndarray],
    subset: Mapping[str, Sequence[int]] | None = None,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> FiniteDiffReport:
    """Compare :func:`backprop` against central differences.

    ``loss_fn`` rebuilds the graph from a parameter mapping. ``subset`` maps a
    parameter name to the flat indices to probe (default: every entry of
    every parameter). An entry whose perturbation flips any relu activation,
    including a relu input sitting exactly at 0, straddles a kink; it is
    listed under ``excluded`` and not compared.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    base_graph, base_loss = loss_fn(params)
    grads = backprop(base_graph, base_loss)
    if subset is None:
        subset = {k: range(v.size) for k, v in params.items()}
    report = FiniteDiffReport(tolerance)
    for name, indices in subset.items():
        flat = params[name].reshape(-1)
        ad_vals, fd_vals, excluded = [], [], []
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + step
            g_plus, l_plus = loss_fn(params)
            flat[idx] = orig - step
            g_minus, l_minus = loss_fn(params)
            flat[idx] = orig
            if not (_same_kinks(base_graph, g_plus) and _same_kinks(base_graph, g_minus)):
                excluded.append(int(idx))
                continue
            fd_vals.append((float(l_plus.value) - float(l_minus.value)) / (2.0 * step))
            ad_vals.append(float(grads[name].reshape(-1)[idx]))
        report.rel_error[name] = relative_error(ad_vals, fd_vals) if ad_vals else 0.0
        report.worst_entry[name] = max(
            (relative_error(a, f) for a, f in zip(ad_vals, fd_vals)), default=0.0
        )
        report.checked[name] = len(ad_vals)
        report.excluded[name] = excluded
    return report


def sample_entries(params: Mapping[str, np.ndarray], per_param: int, rng: np.random.Generator):
    """Pick up to ``per_param`` distinct flat indices from each parameter."""
    return {
        k: np.sort(rng.choice(v.size, size=min(per_param, v.size), replace=False))
        for k, v in params.items()
    }
