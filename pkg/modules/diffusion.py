import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from modules.errors import ConfigError, ContractError, InvariantViolation, ShapeError, TrainingDiverged
from modules.gradcore import Graph, OptimizerState, Tensor, adam_step, backward
from modules.rng import RngStream, derive_rng

logger = logging.getLogger(__name__)

SIGMOID_SLOPE = 6.0
RADICAND_TOLERANCE = 1e-12

Step = Union[int, np.ndarray]


@dataclass
class Schedule:
    """
    Noise-variance schedule β_1..β_T with α_t = 1 − β_t and ᾱ_t = ∏ α_s.

    Arrays are stored 0-based (index t−1 holds step t). ᾱ_0 = 1 by convention;
    `abar(0)` returns it so the last sampling step lands on x̂0.
    """
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    @classmethod
    def from_betas(cls, betas: Sequence[float], validate: bool = True) -> "Schedule":
        betas = np.asarray(betas, dtype=np.float64)
        if validate and (betas.size == 0 or np.any(betas <= 0.0) or np.any(betas >= 1.0)):
            raise ConfigError("schedule: every beta must lie in (0, 1)")
        return cls(betas)

    def abar(self, t: Step) -> Union[float, np.ndarray]:
        """ᾱ_t for t in 0..T (vectorised over arrays of steps)."""
        padded = np.concatenate([[1.0], self.alpha_bar])
        out = padded[np.asarray(t)]
        return float(out) if np.ndim(out) == 0 else out

    def sigma(self, tau_i: int, tau_prev: int, eta: float) -> float:
        """The sampling-noise policy: DDIM η-scaled posterior deviation, clamped."""
        return sigma_for_step(tau_i, tau_prev, eta, self)


@dataclass(frozen=True)
class TauSet:
    tau: Tuple[int, ...]
    eta: float = 1.0

    @property
    def S(self) -> int:
        return len(self.tau)


def make_sigmoid_schedule(T: int, beta_min: float, beta_max: float, slope: float = SIGMOID_SLOPE) -> Schedule:
    """β_t = β_min + (β_max − β_min)·sigmoid(slope·(2t/T − 1)) for t = 1..T."""
    if T < 1:
        raise ConfigError(f"schedule.T: must be at least 1, got {T}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ConfigError(f"schedule: need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    t = np.arange(1, T + 1, dtype=np.float64)
    return Schedule(beta_min + (beta_max - beta_min) * expit(slope * (2.0 * t / T - 1.0)))


def _check_step(t: Step, schedule: Schedule, allow_zero: bool = False) -> None:
    low = 0 if allow_zero else 1
    arr = np.asarray(t)
    if arr.size and (arr.min() < low or arr.max() > schedule.T):
        raise ContractError(f"time step {t} outside [{low}, {schedule.T}]")


def _per_example(values: Union[float, np.ndarray], ndim: int) -> Union[float, np.ndarray]:
    # A vector of per-example coefficients broadcasts over the trailing axes.
    if np.ndim(values) == 0:
        return values
    return np.reshape(values, (-1,) + (1,) * (ndim - 1))


def alpha_bar_at(schedule: Schedule, t: int) -> float:
    _check_step(t, schedule)
    return float(schedule.alpha_bar[t - 1])


def forward_step(x_prev: Tensor, t: int, eps: Tensor, schedule: Schedule) -> Tensor:
    """One Markov noising step: x_t = √(1−β_t)·x_{t−1} + √β_t·ε."""
    _check_step(t, schedule)
    beta = schedule.beta[t - 1]
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


def forward_noise(x0: Tensor, t: Step, eps: Tensor, schedule: Schedule) -> Tensor:
    """Closed-form marginal: x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε. t may be one step per example."""
    if np.shape(eps) != np.shape(x0):
        raise ShapeError(f"forward_noise: noise {np.shape(eps)} and x0 {np.shape(x0)} differ")
    _check_step(t, schedule)
    abar = _per_example(schedule.abar(t), np.ndim(x0))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def predict_x0(x_t: Tensor, eps_hat: Tensor, t: Step, schedule: Schedule) -> Tensor:
    """x̂0 = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t."""
    _check_step(t, schedule)
    abar = _per_example(schedule.abar(t), np.ndim(x_t))
    return (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def ddpm_mean(x_t: Tensor, eps_hat: Tensor, t: int, schedule: Schedule) -> Tensor:
    """μ = (x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t."""
    _check_step(t, schedule)
    beta, alpha, abar = schedule.beta[t - 1], schedule.alpha[t - 1], schedule.alpha_bar[t - 1]
    coef = 0.0 if beta == 0.0 else beta / np.sqrt(1.0 - abar)
    return (x_t - coef * eps_hat) / np.sqrt(alpha)


def ddim_step(
    x_t: Tensor,
    eps_hat: Tensor,
    tau_i: int,
    tau_prev: int,
    sigma: float,
    psi: Tensor,
    schedule: Schedule,
) -> Tensor:
    """
    One DDIM update from step tau_i to tau_prev (tau_prev = 0 means ᾱ = 1):
    √ᾱ_prev·x̂0 + √(1 − ᾱ_prev − σ²)·ε̂ + σ·ψ.
    """
    if not tau_prev < tau_i:
        raise ContractError(f"ddim_step: tau_prev {tau_prev} must be below tau_i {tau_i}")
    _check_step(tau_i, schedule)
    _check_step(tau_prev, schedule, allow_zero=True)
    if np.shape(psi) != np.shape(x_t) or np.shape(eps_hat) != np.shape(x_t):
        raise ShapeError(f"ddim_step: x_t {np.shape(x_t)}, eps {np.shape(eps_hat)}, psi {np.shape(psi)} differ")
    if sigma < 0.0:
        raise ContractError(f"ddim_step: sigma must be non-negative, got {sigma}")

    abar_prev = schedule.abar(tau_prev)
    radicand = 1.0 - abar_prev - sigma * sigma
    if radicand < -RADICAND_TOLERANCE:
        raise InvariantViolation(f"ddim_step: negative radicand {radicand} at tau {tau_i} -> {tau_prev}")
    x0_hat = predict_x0(x_t, eps_hat, tau_i, schedule)
    return np.sqrt(abar_prev) * x0_hat + np.sqrt(max(radicand, 0.0)) * eps_hat + sigma * psi


def make_tau(S: int, T: int, eta: float = 1.0) -> TauSet:
    """Uniform subset τ_i = round(i·T/S), i = 1..S, forced strictly increasing and ending at T."""
    if S < 1 or T < 1:
        raise ConfigError(f"sampler: S and T must be positive, got S={S}, T={T}")
    if S > T:
        raise ConfigError(f"sampler.steps: S={S} exceeds T={T}")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"sampler.eta: must lie in [0, 1], got {eta}")
    tau: List[int] = []
    for i in range(1, S + 1):
        # Half-up rounding; Python's round() is banker's rounding.
        value = (2 * i * T + S) // (2 * S)
        if tau and value <= tau[-1]:
            value = tau[-1] + 1
        tau.append(value)
    return TauSet(tuple(tau), eta)


def sigma_for_step(tau_i: int, tau_prev: int, eta: float, schedule: Schedule) -> float:
    """
    σ = η·√((1−ᾱ_prev)/(1−ᾱ_i))·√(1 − ᾱ_i/ᾱ_prev), clamped to √(1−ᾱ_prev).
    """
    if not tau_prev < tau_i:
        raise ContractError(f"sigma_for_step: tau_prev {tau_prev} must be below tau_i {tau_i}")
    abar_i, abar_prev = schedule.abar(tau_i), schedule.abar(tau_prev)
    if eta == 0.0 or abar_i >= 1.0:
        return 0.0
    ratio = max(1.0 - abar_i / abar_prev, 0.0)
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_i)) * np.sqrt(ratio)
    return float(min(sigma, np.sqrt(max(1.0 - abar_prev, 0.0))))


# --------------------------------------------------------------------------
# Training and sampling loops
# --------------------------------------------------------------------------

class NoiseModel(Protocol):
    params: dict
    x_shape: Tuple[int, ...]

    def graph(self, params: dict, x_t: Tensor, x_c: Tensor, t: np.ndarray) -> Tuple[Graph, int]:
        ...

    def predict(self, x_t: Tensor, x_c: Tensor, t: np.ndarray) -> Tensor:
        ...


class TrainBatchSource(Protocol):
    """Supplies (x_p, x_0) batches; batch `index` must be a pure function of (seed, index)."""
    xp_shape: Tuple[int, ...]
    x0_shape: Tuple[int, ...]

    def batch(self, index: int, size: int) -> Tuple[Tensor, Tensor]:
        ...


@dataclass
class TrainResult:
    losses: List[float]
    steps: int


def _batches(source: TrainBatchSource, steps: int, batch_size: int, workers: int) -> Iterator[Tuple[Tensor, Tensor]]:
    if workers <= 1:
        for index in range(1, steps + 1):
            yield source.batch(index, batch_size)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        index = 1
        while index <= steps or pending:
            while index <= steps and len(pending) < 2 * workers:
                pending.append(pool.submit(source.batch, index, batch_size))
                index += 1
            yield pending.popleft().result()


def train(
    model: NoiseModel,
    source: TrainBatchSource,
    schedule: Schedule,
    steps: int,
    optimizer: OptimizerState,
    seed: int,
    batch_size: int = 32,
    workers: int = 1,
    log_every: int = 100,
) -> TrainResult:
    """
    The conditional DDPM training loop.

    Each step draws a fresh batch, one t ~ Uniform{1..T} per example and
    ε ~ N(0, I), forms x_t in closed form, and takes one optimizer step on
    the mean-squared error between ε_θ(x_t, x_p, t) and ε. The loss trace
    has one value per step.
    """
    if tuple(model.x_shape) != tuple(source.x0_shape):
        raise ShapeError(f"train: model predicts {model.x_shape} but the source yields x0 of {source.x0_shape}")

    losses: List[float] = []
    started = time.monotonic()
    for step, (xp, x0) in enumerate(_batches(source, steps, batch_size, workers), start=1):
        if xp.shape[1:] != tuple(source.xp_shape) or x0.shape[1:] != tuple(source.x0_shape):
            raise ShapeError(f"train: batch {step} has shapes {xp.shape[1:]}, {x0.shape[1:]}")
        rng = derive_rng(seed, ("train_noise", step))
        t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
        eps = rng.normal(x0.shape)
        x_t = forward_noise(x0, t, eps, schedule)

        graph, out = model.graph(model.params, x_t, xp, t)
        loss_id = graph.mse(out, graph.constant(eps))
        loss = float(graph.value(loss_id))
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss, partial=TrainResult(losses, step - 1))

        grads = backward(graph, loss_id)
        adam_step(optimizer, model.params, grads)
        losses.append(loss)

        if log_every and step % log_every == 0:
            recent = float(np.mean(losses[-log_every:]))
            logger.info(f"step {step}/{steps} loss {recent:.6f} ({time.monotonic() - started:.1f}s)")
    return TrainResult(losses, len(losses))


@dataclass
class SampleResult:
    x0: Tensor
    taus: Tuple[int, ...]
    x0_trace: List[Tensor]


def sample(
    model: NoiseModel,
    x_p: Tensor,
    tau_set: TauSet,
    schedule: Schedule,
    rng: RngStream,
    x_T: Optional[Tensor] = None,
    trace: bool = False,
) -> SampleResult:
    """
    DDIM reverse pass over τ from τ_S down to τ_1.

    Starts from x_{τ_S} ~ N(0, I) (or the supplied x_T); ψ ~ N(0, I) on every
    step except the last, where ψ = 0. With `trace`, x̂0 is recorded at each
    step in reverse order of τ.
    """
    shape = (x_p.shape[0],) + tuple(model.x_shape)
    x = rng.normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    if x.shape != shape:
        raise ShapeError(f"sample: starting noise {x.shape} does not match {shape}")

    taus = tau_set.tau
    x0_trace: List[Tensor] = []
    visited: List[int] = []
    for i in range(len(taus), 0, -1):
        tau_i = taus[i - 1]
        tau_prev = taus[i - 2] if i > 1 else 0
        t = np.full(shape[0], tau_i)
        eps_hat = model.predict(x, x_p, t)
        if trace:
            x0_trace.append(predict_x0(x, eps_hat, tau_i, schedule))
        sigma = sigma_for_step(tau_i, tau_prev, tau_set.eta, schedule)
        psi = rng.normal(shape) if i > 1 and sigma > 0.0 else np.zeros(shape)
        x = ddim_step(x, eps_hat, tau_i, tau_prev, sigma, psi, schedule)
        visited.append(tau_i)
    return SampleResult(x0=x, taus=tuple(visited), x0_trace=x0_trace)
