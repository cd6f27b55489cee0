import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

LN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def as_tensor(values: Any) -> Tensor:
    """Return a float64 ndarray view/copy of values."""
    return np.asarray(values, dtype=np.float64)


def glorot_uniform(shape: Tuple[int, ...], fan_in: int, fan_out: int, uniform: Callable[[int], np.ndarray]) -> Tensor:
    """
    Draw a weight tensor uniform in ±sqrt(6 / (fan_in + fan_out)).

    `uniform(n)` must return n variates in [0, 1); the caller owns the stream.
    """
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    size = int(np.prod(shape))
    return ((2.0 * uniform(size) - 1.0) * limit).reshape(shape)


def _batched(x: Tensor, rank: int) -> Tuple[Tensor, bool]:
    # Layer ops work on a leading batch axis; single examples get one added.
    if x.ndim == rank:
        return x[np.newaxis], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected a rank-{rank} tensor (or a batch of them), got shape {x.shape}")


# --------------------------------------------------------------------------
# Forward kernels
# --------------------------------------------------------------------------

def _conv_out_extent(n: int, stride: int) -> int:
    return -(-n // stride)


def _conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor, stride: int) -> Tuple[Tensor, Tensor]:
    n, h, w, c = x.shape
    kh, kw, kc, q = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernels expect {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got ({kh}, {kw})")
    if bias.shape != (q,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {q} kernels")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    ho, wo = _conv_out_extent(h, stride), _conv_out_extent(w, stride)
    out = np.zeros((n, ho, wo, q))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
            out += patch @ kernels[i, j]
    return out + bias, xp


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """
    2D convolution with zero "same" padding.

    x is H×W×C (or N×H×W×C), kernels kh×kw×C×Q with odd extents, bias Q.
    With stride 1 the spatial extents are preserved; stride 2 halves them
    (rounding up).
    """
    xb, single = _batched(as_tensor(x), 3)
    out, _ = _conv2d_forward(xb, as_tensor(kernels), as_tensor(bias), stride)
    return out[0] if single else out


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """out = weights · x + bias for x of length n (or N×n), weights m×n."""
    xb, single = _batched(as_tensor(x), 1)
    weights, bias = as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or weights.shape[1] != xb.shape[1]:
        raise ShapeError(f"dense: weights {weights.shape} cannot act on input of length {xb.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match {weights.shape[0]} outputs")
    out = xb @ weights.T + bias
    return out[0] if single else out


def _layer_norm_forward(x: Tensor, gain: Tensor, shift: Tensor, eps: float) -> Tuple[Tensor, Tensor, Tensor]:
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / shift {shift.shape} do not match {c} channels")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mu) * inv_std
    return x_hat * gain + shift, x_hat, inv_std


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the channel axis independently at each spatial position."""
    out, _, _ = _layer_norm_forward(as_tensor(x), as_tensor(gain), as_tensor(shift), eps)
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return np.where(x > 0.0, x, 0.0)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the last (channel) axis in argument order."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels: nothing to concatenate")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: spatial extents {p.shape[:-1]} differ from {lead}")
    return np.concatenate(parts, axis=-1)


def channel_offsets(parts: Sequence[Tensor]) -> List[Tuple[int, int]]:
    """Channel ranges occupied by each part after concat_channels."""
    offsets, start = [], 0
    for p in parts:
        stop = start + p.shape[-1]
        offsets.append((start, stop))
        start = stop
    return offsets


# --------------------------------------------------------------------------
# Graph
# --------------------------------------------------------------------------

@dataclass
class Node:
    kind: str
    inputs: Tuple[int, ...]
    value: Tensor
    name: Optional[str] = None
    cache: Dict[str, Any] = field(default_factory=dict)


class Graph:
    """
    A tape of operation records in creation order.

    Node ids are list positions, so every input id precedes its consumer and
    the list is a valid topological order. Parameters are leaves created with
    `param(name, value)`; `backward` returns gradients keyed by those names.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.outputs: List[int] = []

    def _add(self, kind: str, inputs: Tuple[int, ...], value: Tensor, name: Optional[str] = None, **cache) -> int:
        self.nodes.append(Node(kind, inputs, value, name, cache))
        return len(self.nodes) - 1

    def value(self, node_id: int) -> Tensor:
        return self.nodes[node_id].value

    def param(self, name: str, value: Tensor) -> int:
        return self._add("param", (), as_tensor(value), name=name)

    def constant(self, value: Tensor) -> int:
        return self._add("constant", (), as_tensor(value))

    def mark_output(self, node_id: int) -> int:
        self.outputs.append(node_id)
        return node_id

    # -- layer ops --------------------------------------------------------

    def conv2d(self, x: int, kernels: int, bias: int, stride: int = 1) -> int:
        xv = self.value(x)
        if xv.ndim != 4:
            raise ShapeError(f"conv2d: graph tensors are N×H×W×C, got {xv.shape}")
        out, xp = _conv2d_forward(xv, self.value(kernels), self.value(bias), stride)
        return self._add("conv2d", (x, kernels, bias), out, padded=xp, stride=stride)

    def dense(self, x: int, weights: int, bias: int) -> int:
        xv = self.value(x)
        if xv.ndim != 2:
            raise ShapeError(f"dense: graph tensors are N×n, got {xv.shape}")
        return self._add("dense", (x, weights, bias), dense(xv, self.value(weights), self.value(bias)))

    def layer_norm(self, x: int, gain: int, shift: int, eps: float = LN_EPS) -> int:
        out, x_hat, inv_std = _layer_norm_forward(self.value(x), self.value(gain), self.value(shift), eps)
        return self._add("layer_norm", (x, gain, shift), out, x_hat=x_hat, inv_std=inv_std)

    def relu(self, x: int) -> int:
        xv = self.value(x)
        gate = xv > 0.0
        return self._add("relu", (x,), np.where(gate, xv, 0.0), gate=gate)

    def concat_channels(self, parts: Sequence[int]) -> int:
        values = [self.value(p) for p in parts]
        out = concat_channels(values)
        return self._add("concat", tuple(parts), out, offsets=channel_offsets(values))

    def slice_channels(self, x: int, start: int, stop: int) -> int:
        xv = self.value(x)
        return self._add("slice", (x,), xv[..., start:stop].copy(), start=start, stop=stop, shape=xv.shape)

    def pad_spatial(self, x: int, pad_h: int, pad_w: int) -> int:
        """Zero-pad the bottom/right spatial borders."""
        xv = self.value(x)
        out = np.pad(xv, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
        return self._add("pad", (x,), out, h=xv.shape[1], w=xv.shape[2])

    def crop_spatial(self, x: int, h: int, w: int) -> int:
        xv = self.value(x)
        return self._add("crop", (x,), xv[:, :h, :w, :].copy(), shape=xv.shape)

    def upsample2x(self, x: int) -> int:
        """Nearest-neighbour ×2 upsampling of both spatial axes."""
        xv = self.value(x)
        return self._add("upsample", (x,), np.repeat(np.repeat(xv, 2, axis=1), 2, axis=2))

    def broadcast_spatial(self, x: int, h: int, w: int) -> int:
        """Copy an N×C tensor to every position of an N×h×w×C grid."""
        xv = self.value(x)
        out = np.broadcast_to(xv[:, np.newaxis, np.newaxis, :], (xv.shape[0], h, w, xv.shape[1])).copy()
        return self._add("broadcast", (x,), out)

    # -- reductions -------------------------------------------------------

    def square(self, x: int) -> int:
        xv = self.value(x)
        return self._add("square", (x,), xv * xv)

    def sum(self, x: int) -> int:
        return self._add("sum", (x,), np.asarray(self.value(x).sum()))

    def mse(self, prediction: int, target: int) -> int:
        """Mean over every element of (prediction − target)²."""
        p, t = self.value(prediction), self.value(target)
        if p.shape != t.shape:
            raise ShapeError(f"mse: prediction {p.shape} and target {t.shape} differ")
        diff = p - t
        return self._add("mse", (prediction, target), np.asarray(np.mean(diff * diff)), diff=diff)

    def relu_gates(self) -> List[np.ndarray]:
        return [n.cache["gate"] for n in self.nodes if n.kind == "relu"]


# --------------------------------------------------------------------------
# Reverse mode
# --------------------------------------------------------------------------

def _grad_conv2d(graph: Graph, node: Node, g: Tensor) -> List[Tensor]:
    x_id, k_id, _ = node.inputs
    x, kernels = graph.value(x_id), graph.value(k_id)
    xp, stride = node.cache["padded"], node.cache["stride"]
    n, h, w, c = x.shape
    kh, kw = kernels.shape[:2]
    ph, pw = kh // 2, kw // 2
    ho, wo = g.shape[1], g.shape[2]
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            dk[i, j] = np.einsum("nhwc,nhwq->cq", xp[:, rows, cols, :], g)
            dxp[:, rows, cols, :] += g @ kernels[i, j].T
    return [dxp[:, ph:ph + h, pw:pw + w, :], dk, g.sum(axis=(0, 1, 2))]


def _grad_dense(graph: Graph, node: Node, g: Tensor) -> List[Tensor]:
    x_id, w_id, _ = node.inputs
    x, weights = graph.value(x_id), graph.value(w_id)
    return [g @ weights, g.T @ x, g.sum(axis=0)]


def _grad_layer_norm(graph: Graph, node: Node, g: Tensor) -> List[Tensor]:
    gain = graph.value(node.inputs[1])
    x_hat, inv_std = node.cache["x_hat"], node.cache["inv_std"]
    reduce_axes = tuple(range(g.ndim - 1))
    d_hat = g * gain
    dx = inv_std * (d_hat - d_hat.mean(axis=-1, keepdims=True)
                    - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True))
    return [dx, (g * x_hat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)]


def _grad_concat(graph: Graph, node: Node, g: Tensor) -> List[Tensor]:
    return [g[..., a:b] for a, b in node.cache["offsets"]]


def _grad_slice(graph: Graph, node: Node, g: Tensor) -> List[Tensor]:
    dx = np.zeros(node.cache["shape"])
    dx[..., node.cache["start"]:node.cache["stop"]] = g
    return [dx]


def _grad_upsample(graph: Graph, node: Node, g: Tensor) -> List[Tensor]:
    n, h2, w2, c = g.shape
    return [g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))]


def _grad_crop(graph: Graph, node: Node, g: Tensor) -> List[Tensor]:
    dx = np.zeros(node.cache["shape"])
    dx[:, :g.shape[1], :g.shape[2], :] = g
    return [dx]


def _grad_mse(graph: Graph, node: Node, g: Tensor) -> List[Tensor]:
    diff = node.cache["diff"]
    d = g * 2.0 * diff / diff.size
    return [d, -d]


_GRADIENTS: Dict[str, Callable[[Graph, Node, Tensor], List[Tensor]]] = {
    "conv2d": _grad_conv2d,
    "dense": _grad_dense,
    "layer_norm": _grad_layer_norm,
    "relu": lambda graph, node, g: [g * node.cache["gate"]],
    "concat": _grad_concat,
    "slice": _grad_slice,
    "pad": lambda graph, node, g: [g[:, :node.cache["h"], :node.cache["w"], :]],
    "crop": _grad_crop,
    "upsample": _grad_upsample,
    "broadcast": lambda graph, node, g: [g.sum(axis=(1, 2))],
    "square": lambda graph, node, g: [2.0 * graph.value(node.inputs[0]) * g],
    "sum": lambda graph, node, g: [np.full(graph.value(node.inputs[0]).shape, float(g))],
    "mse": _grad_mse,
}


def backward(graph: Graph, loss_node: int) -> Dict[str, Tensor]:
    """
    Reverse-mode gradients of a scalar node w.r.t. every parameter leaf.

    Parameters with no path to the loss get an all-zero gradient.
    """
    loss = graph.value(loss_node)
    if loss.size != 1:
        raise ContractError(f"backward: loss node must be scalar, got shape {loss.shape}")

    grads: List[Optional[Tensor]] = [None] * len(graph.nodes)
    grads[loss_node] = np.ones_like(loss)
    for node_id in range(loss_node, -1, -1):
        g = grads[node_id]
        node = graph.nodes[node_id]
        if g is None or not node.inputs:
            continue
        for input_id, input_grad in zip(node.inputs, _GRADIENTS[node.kind](graph, node, g)):
            if grads[input_id] is None:
                grads[input_id] = input_grad
            else:
                grads[input_id] = grads[input_id] + input_grad

    result: Dict[str, Tensor] = {}
    for node_id, node in enumerate(graph.nodes):
        if node.kind == "param":
            g = grads[node_id]
            result[node.name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64).reshape(node.value.shape)
    return result


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, Tensor]
    v: Dict[str, Tensor]
    step: int = 0
    learning_rate: float = 8e-5
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor], learning_rate: float = 8e-5, **kwargs) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            learning_rate=learning_rate,
            **kwargs,
        )


def adam_step(state: OptimizerState, params: Dict[str, Tensor], grads: Dict[str, Tensor]) -> Tuple[Dict[str, Tensor], OptimizerState]:
    """One adaptive-moment update with bias correction; the step counter advances by one."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"adam_step: shape mismatch for {name}: param {p.shape}, grad {g.shape}")

    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name in params:
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        params[name] = params[name] - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    errors: Dict[str, float]
    checked: int
    skipped: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def gradcheck(
    build: Callable[[Dict[str, Tensor]], Tuple[Graph, int]],
    params: Dict[str, Tensor],
    step: float = 1e-4,
    max_coords: Optional[int] = None,
) -> GradcheckReport:
    """
    Compare `backward` against central finite differences.

    `build(params)` must construct a fresh graph and return (graph, loss id).
    For each parameter, up to `max_coords` evenly spaced coordinates are
    perturbed by ±step. A coordinate whose perturbation flips any ReLU gate
    straddles a kink and is skipped. The error per parameter is
    ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over the checked
    coordinates.
    """
    graph, loss_id = build(params)
    analytic = backward(graph, loss_id)
    base_gates = graph.relu_gates()

    errors: Dict[str, float] = {}
    checked = skipped = 0
    for name in list(params):
        p = params[name] = np.ascontiguousarray(params[name])
        flat = p.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.unique(np.linspace(0, flat.size - 1, max_coords).round().astype(int))
        a_vals, n_vals = [], []
        for idx in coords:
            original = flat[idx]
            values = []
            crossed = False
            for sign in (1.0, -1.0):
                flat[idx] = original + sign * step
                g_pert, l_pert = build(params)
                if any(not np.array_equal(a, b) for a, b in zip(base_gates, g_pert.relu_gates())):
                    crossed = True
                values.append(float(g_pert.value(l_pert)))
            flat[idx] = original
            if crossed:
                skipped += 1
                continue
            checked += 1
            n_vals.append((values[0] - values[1]) / (2.0 * step))
            a_vals.append(analytic[name].reshape(-1)[idx])
        a_arr, n_arr = np.asarray(a_vals), np.asarray(n_vals)
        scale = max(np.linalg.norm(a_arr), np.linalg.norm(n_arr))
        errors[name] = 0.0 if scale == 0.0 else float(np.linalg.norm(a_arr - n_arr) / scale)
    logger.debug(f"gradcheck: {checked} coordinates checked, {skipped} skipped at ReLU kinks")
    return GradcheckReport(errors=errors, checked=checked, skipped=skipped)
