"""
Noise-prediction network ε_θ(x_t, x_p, t).

Conditional encoder (three same-padded convs, the first two followed by
layer norm and ReLU, with a skip concat of x_c), a sinusoidal time embedding
through one dense layer broadcast over the grid, and a small U-Net over
z_in = concat(c, t_emb, x_t).
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from modules.errors import ConfigError, ContractError, ShapeError
from modules.gradcore import Graph, Tensor, as_tensor, glorot_uniform
from modules.rng import derive_rng

logger = logging.getLogger(__name__)

NoisePredictorParams = Dict[str, Tensor]

UNET_MULTIPLE = 4


@dataclass(frozen=True)
class EncoderSpec:
    d_h: int
    d_w: int
    d_ch: int
    q_c1: int = 64
    q_c2: int = 64
    q_cl: int = 128
    kernel: Tuple[int, int] = (3, 3)

    def __post_init__(self):
        if self.q_cl <= self.d_ch:
            raise ConfigError(f"network.q_cl: must exceed the {self.d_ch} condition channels, got {self.q_cl}")
        if self.kernel[0] % 2 == 0 or self.kernel[1] % 2 == 0:
            raise ConfigError(f"network.kernel: extents must be odd, got {self.kernel}")

    @property
    def out_channels(self) -> int:
        return self.q_cl + self.d_ch


@dataclass(frozen=True)
class TimeEmbedSpec:
    q_t: int = 16
    max_period: float = 1e4

    def __post_init__(self):
        if self.q_t <= 0 or self.q_t % 2:
            raise ConfigError(f"network.q_t: must be a positive even number, got {self.q_t}")
        if self.max_period <= 0:
            raise ConfigError(f"network.max_period: must be positive, got {self.max_period}")


@dataclass(frozen=True)
class NoisePredictorSpec:
    encoder: EncoderSpec
    time: TimeEmbedSpec
    c_x: int
    base_width: int = 32
    T: int = 500

    @property
    def unet_in_channels(self) -> int:
        return self.encoder.out_channels + self.time.q_t + self.c_x


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

def _conv_shapes(prefix: str, kernel: Tuple[int, int], c_in: int, c_out: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.kernel", (kernel[0], kernel[1], c_in, c_out)), (f"{prefix}.bias", (c_out,))]


def _norm_shapes(prefix: str, channels: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.gain", (channels,)), (f"{prefix}.shift", (channels,))]


def _double_conv_shapes(prefix: str, kernel: Tuple[int, int], c_in: int, c_out: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return (_conv_shapes(f"{prefix}.conv1", kernel, c_in, c_out) + _norm_shapes(f"{prefix}.ln1", c_out)
            + _conv_shapes(f"{prefix}.conv2", kernel, c_out, c_out) + _norm_shapes(f"{prefix}.ln2", c_out))


def parameter_shapes(spec: NoisePredictorSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter id with its shape, in the stable enumeration order."""
    enc, k = spec.encoder, spec.encoder.kernel
    w0, w1, w2 = spec.base_width, 2 * spec.base_width, 4 * spec.base_width
    shapes = (
        _conv_shapes("encoder.conv1", k, enc.d_ch, enc.q_c1) + _norm_shapes("encoder.ln1", enc.q_c1)
        + _conv_shapes("encoder.conv2", k, enc.q_c1, enc.q_c2) + _norm_shapes("encoder.ln2", enc.q_c2)
        + _conv_shapes("encoder.conv3", k, enc.q_c2, enc.q_cl)
        + [("time.dense.weight", (spec.time.q_t, spec.time.q_t)), ("time.dense.bias", (spec.time.q_t,))]
        + _double_conv_shapes("unet.enc0", (3, 3), spec.unet_in_channels, w0)
        + _conv_shapes("unet.down0", (3, 3), w0, w0)
        + _double_conv_shapes("unet.enc1", (3, 3), w0, w1)
        + _conv_shapes("unet.down1", (3, 3), w1, w1)
        + _double_conv_shapes("unet.mid", (3, 3), w1, w2)
        + _conv_shapes("unet.up1", (3, 3), w2, w1)
        + _double_conv_shapes("unet.dec1", (3, 3), 2 * w1, w1)
        + _conv_shapes("unet.up0", (3, 3), w1, w0)
        + _double_conv_shapes("unet.dec0", (3, 3), 2 * w0, w0)
        + _conv_shapes("unet.out", (1, 1), w0, spec.c_x)
    )
    return shapes


def init_params(spec: NoisePredictorSpec, seed: int) -> NoisePredictorParams:
    """Glorot-uniform kernels and dense weights, zero biases and shifts, unit gains."""
    rng = derive_rng(seed, ("init", 0))
    params: NoisePredictorParams = {}
    for name, shape in parameter_shapes(spec):
        kind = name.rsplit(".", 1)[1]
        if kind == "kernel":
            kh, kw, c_in, c_out = shape
            params[name] = glorot_uniform(shape, kh * kw * c_in, kh * kw * c_out, rng.uniform)
        elif kind == "weight":
            params[name] = glorot_uniform(shape, shape[1], shape[0], rng.uniform)
        elif kind == "gain":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def parameter_count(params: NoisePredictorParams) -> int:
    return int(sum(p.size for p in params.values()))


# --------------------------------------------------------------------------
# Graph builders
# --------------------------------------------------------------------------

def _conv(g: Graph, ids: Dict[str, int], prefix: str, x: int, stride: int = 1) -> int:
    return g.conv2d(x, ids[f"{prefix}.kernel"], ids[f"{prefix}.bias"], stride=stride)


def _conv_norm_relu(g: Graph, ids: Dict[str, int], conv: str, norm: str, x: int) -> int:
    x = _conv(g, ids, conv, x)
    x = g.layer_norm(x, ids[f"{norm}.gain"], ids[f"{norm}.shift"])
    return g.relu(x)


def _double_conv(g: Graph, ids: Dict[str, int], prefix: str, x: int) -> int:
    x = _conv_norm_relu(g, ids, f"{prefix}.conv1", f"{prefix}.ln1", x)
    return _conv_norm_relu(g, ids, f"{prefix}.conv2", f"{prefix}.ln2", x)


def build_encoder(g: Graph, ids: Dict[str, int], x_c: int) -> int:
    h = _conv_norm_relu(g, ids, "encoder.conv1", "encoder.ln1", x_c)
    h = _conv_norm_relu(g, ids, "encoder.conv2", "encoder.ln2", h)
    h = _conv(g, ids, "encoder.conv3", h)
    # Skip connection keeps the raw condition next to the learned features.
    return g.concat_channels([h, x_c])


def sinusoidal_features(t: np.ndarray, q_t: int, max_period: float) -> Tensor:
    """[sin(t/ρ_0), cos(t/ρ_0), sin(t/ρ_1), ...] with ρ_k = max_period^(k/(q_t/2))."""
    half = q_t // 2
    periods = max_period ** (np.arange(half) / half)
    angles = np.asarray(t, dtype=np.float64).reshape(-1, 1) / periods
    features = np.empty((angles.shape[0], q_t))
    features[:, 0::2] = np.sin(angles)
    features[:, 1::2] = np.cos(angles)
    return features


def build_time_embedding(g: Graph, ids: Dict[str, int], t: np.ndarray, spec: TimeEmbedSpec, h: int, w: int) -> int:
    features = g.constant(sinusoidal_features(t, spec.q_t, spec.max_period))
    emb = g.dense(features, ids["time.dense.weight"], ids["time.dense.bias"])
    return g.broadcast_spatial(emb, h, w)


def build_unet(g: Graph, ids: Dict[str, int], z_in: int, pad: bool = True) -> int:
    _, h, w, _ = g.value(z_in).shape
    pad_h, pad_w = (-h) % UNET_MULTIPLE, (-w) % UNET_MULTIPLE
    if pad_h or pad_w:
        if not pad:
            raise ShapeError(f"unet: extents {h}×{w} are not divisible by {UNET_MULTIPLE}")
        z_in = g.pad_spatial(z_in, pad_h, pad_w)

    s0 = _double_conv(g, ids, "unet.enc0", z_in)
    x = _conv(g, ids, "unet.down0", s0, stride=2)
    s1 = _double_conv(g, ids, "unet.enc1", x)
    x = _conv(g, ids, "unet.down1", s1, stride=2)
    x = _double_conv(g, ids, "unet.mid", x)

    x = _conv(g, ids, "unet.up1", g.upsample2x(x))
    x = _double_conv(g, ids, "unet.dec1", g.concat_channels([x, s1]))
    x = _conv(g, ids, "unet.up0", g.upsample2x(x))
    x = _double_conv(g, ids, "unet.dec0", g.concat_channels([x, s0]))
    x = _conv(g, ids, "unet.out", x)

    if pad_h or pad_w:
        x = g.crop_spatial(x, h, w)
    return x


def _leaves(g: Graph, params: NoisePredictorParams, prefixes: Tuple[str, ...]) -> Dict[str, int]:
    return {name: g.param(name, value) for name, value in params.items() if name.startswith(prefixes)}


def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    x = as_tensor(x)
    return (x[np.newaxis], True) if x.ndim == 3 else (x, False)


def _check_time(t: np.ndarray, T: Optional[int]) -> None:
    if T is not None and (np.min(t) < 1 or np.max(t) > T):
        raise ContractError(f"time step outside [1, {T}]: {t}")


def cond_encode(x_c: Tensor, spec: EncoderSpec, params: NoisePredictorParams) -> Tensor:
    """c = concat(conv3(relu(ln(conv2(relu(ln(conv1(x_c))))))), x_c)."""
    xb, single = _as_batch(x_c)
    if xb.shape[1:] != (spec.d_h, spec.d_w, spec.d_ch):
        raise ShapeError(f"cond_encode: x_c {xb.shape[1:]} differs from {(spec.d_h, spec.d_w, spec.d_ch)}")
    g = Graph()
    out = build_encoder(g, _leaves(g, params, ("encoder.",)), g.constant(xb))
    c = g.value(out)
    return c[0] if single else c


def time_embed(t, spec: TimeEmbedSpec, params: NoisePredictorParams, h: int, w: int, T: Optional[int] = None) -> Tensor:
    """Dense-projected sinusoidal embedding of t, copied to every h×w position."""
    scalar = np.ndim(t) == 0
    steps = np.atleast_1d(np.asarray(t))
    _check_time(steps, T)
    g = Graph()
    out = g.value(build_time_embedding(g, _leaves(g, params, ("time.",)), steps, spec, h, w))
    return out[0] if scalar else out


def unet_forward(z_in: Tensor, params: NoisePredictorParams, pad: bool = True) -> Tensor:
    zb, single = _as_batch(z_in)
    g = Graph()
    out = g.value(build_unet(g, _leaves(g, params, ("unet.",)), g.constant(zb), pad=pad))
    return out[0] if single else out


class NoisePredictor:
    """ε_θ with its parameters; `graph` builds a differentiable pass, `predict` a plain one."""

    def __init__(self, spec: NoisePredictorSpec, params: Optional[NoisePredictorParams] = None, seed: int = 0):
        self.spec = spec
        self.params = init_params(spec, seed) if params is None else params
        expected = dict(parameter_shapes(spec))
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                got = self.params[name].shape if name in self.params else None
                raise ShapeError(f"parameter {name}: expected {shape}, got {got}")

    @property
    def x_shape(self) -> Tuple[int, int, int]:
        return (self.spec.encoder.d_h, self.spec.encoder.d_w, self.spec.c_x)

    @property
    def xp_shape(self) -> Tuple[int, int, int]:
        enc = self.spec.encoder
        return (enc.d_h, enc.d_w, enc.d_ch)

    def graph(self, params: NoisePredictorParams, x_t: Tensor, x_c: Tensor, t: np.ndarray) -> Tuple[Graph, int]:
        x_t, x_c = as_tensor(x_t), as_tensor(x_c)
        if x_t.shape[1:] != self.x_shape:
            raise ShapeError(f"predict_noise: x_t {x_t.shape[1:]} differs from {self.x_shape}")
        if x_c.shape[1:] != self.xp_shape or x_c.shape[0] != x_t.shape[0]:
            raise ShapeError(f"predict_noise: x_c {x_c.shape} does not pair with x_t {x_t.shape}")
        t = np.asarray(t).reshape(-1)
        _check_time(t, self.spec.T)

        g = Graph()
        ids = {name: g.param(name, value) for name, value in params.items()}
        c = build_encoder(g, ids, g.constant(x_c))
        t_emb = build_time_embedding(g, ids, t, self.spec.time, self.x_shape[0], self.x_shape[1])
        z_in = g.concat_channels([c, t_emb, g.constant(x_t)])
        out = g.mark_output(build_unet(g, ids, z_in))
        return g, out

    def predict(self, x_t: Tensor, x_c: Tensor, t: np.ndarray) -> Tensor:
        g, out = self.graph(self.params, x_t, x_c, t)
        return g.value(out)

    def parameter_count(self) -> int:
        return parameter_count(self.params)


def predict_noise(x_t: Tensor, x_c: Tensor, t, params: NoisePredictorParams, spec: NoisePredictorSpec) -> Tensor:
    """ε̂ = f_unet(concat(c, t_emb, x_t)) for one example or a batch."""
    xb, single = _as_batch(x_t)
    cb, _ = _as_batch(x_c)
    steps = np.broadcast_to(np.atleast_1d(np.asarray(t)), (xb.shape[0],))
    eps = NoisePredictor(spec, params).predict(xb, cb, steps)
    return eps[0] if single else eps
