"""
OFDM SIMO uplink testbed.

Grids are indexed [subcarrier k, symbol n, antenna m]; subcarrier row r
carries the centred index k = r − N_fft/2. The channel is a block-fading
tapped delay line applied per subcarrier, exact while the cyclic prefix
covers the delay spread. SNR is per receive antenna and subcarrier:
unit average symbol energy over σ² = 10^(−SNR/10).
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.stats import norm

from modules.errors import ConfigError, ContractError, ShapeError
from modules.qam import axis_levels, bits_per_symbol, qam_demap, qam_map, scale
from modules.rng import RngStream, derive_rng

logger = logging.getLogger(__name__)

DEFAULT_PROFILE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data", "tdl_d.txt")
BER_COLUMNS = ["snr_db", "receiver", "ber", "grid_mse"]

# Complex samples indexed [subcarrier k, symbol n(, antenna m)].
ResourceGrid = np.ndarray


class OfdmConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_fft: int = 64
    n_sym: int = 14
    cp_len: int = 6
    subcarrier_spacing: float = 30e3
    n_rx: int = 8
    data_order: int = 16
    pilot_symbols: Tuple[int, ...] = (3, 10)
    pilot_order: int = 4
    max_delay_spread: float = 100e-9
    # Seed of the known pilot values; independent of the master seed.
    pilot_seed: int = 0
    # Overrides the Rician factor of the profile's first tap.
    k_factor_db: Optional[float] = None
    profile: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "OfdmConfig":
        if self.n_fft < 2 or self.n_fft % 2:
            raise ValueError(f"n_fft must be a positive even number, got {self.n_fft}")
        if self.n_sym < 1 or self.n_rx < 1 or self.cp_len < 0:
            raise ValueError("n_sym and n_rx must be positive and cp_len non-negative")
        if self.subcarrier_spacing <= 0 or self.max_delay_spread < 0:
            raise ValueError("subcarrier_spacing must be positive and max_delay_spread non-negative")
        if self.cp_len / self.sample_rate < self.max_delay_spread:
            raise ValueError(
                f"cyclic prefix lasts {self.cp_len / self.sample_rate:.3e} s, "
                f"shorter than the {self.max_delay_spread:.3e} s delay spread"
            )
        if len(set(self.pilot_symbols)) != len(self.pilot_symbols):
            raise ValueError(f"pilot_symbols must be distinct, got {self.pilot_symbols}")
        if any(p < 0 or p >= self.n_sym for p in self.pilot_symbols):
            raise ValueError(f"pilot_symbols must lie in [0, {self.n_sym}), got {self.pilot_symbols}")
        if len(self.pilot_symbols) == 0 or len(self.pilot_symbols) >= self.n_sym:
            raise ValueError("need at least one pilot symbol and one data symbol")
        for order in (self.data_order, self.pilot_order):
            bits_per_symbol(order)
        return self

    @property
    def sample_rate(self) -> float:
        return self.n_fft * self.subcarrier_spacing

    @property
    def data_symbols(self) -> Tuple[int, ...]:
        return tuple(n for n in range(self.n_sym) if n not in self.pilot_symbols)

    @property
    def data_bits(self) -> int:
        return len(self.data_symbols) * self.n_fft * bits_per_symbol(self.data_order)

    @property
    def subcarrier_index(self) -> np.ndarray:
        return np.arange(self.n_fft) - self.n_fft // 2


def noise_variance(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


# --------------------------------------------------------------------------
# Transmitter
# --------------------------------------------------------------------------

@dataclass
class TxFrame:
    grid: ResourceGrid      # K×N complex, unit average power
    bits: np.ndarray        # data bits, symbol-major then subcarrier
    pilot_grid: ResourceGrid  # K×N, zero at data positions


def pilot_sequence(config: OfdmConfig, seed: Optional[int] = None) -> np.ndarray:
    """The known pilot values (K × number of pilot symbols); `seed` defaults to `config.pilot_seed`."""
    rng = derive_rng(config.pilot_seed if seed is None else seed, ("pilots", 0))
    n = bits_per_symbol(config.pilot_order)
    count = config.n_fft * len(config.pilot_symbols)
    return qam_map(rng.bits(count * n), config.pilot_order).reshape(len(config.pilot_symbols), config.n_fft).T


def build_tx_grid(config: OfdmConfig, rng: RngStream, pilots: Optional[np.ndarray] = None) -> TxFrame:
    if pilots is None:
        pilots = pilot_sequence(config)
    data = list(config.data_symbols)
    bits = rng.bits(config.data_bits)
    grid = np.zeros((config.n_fft, config.n_sym), dtype=np.complex128)
    grid[:, data] = qam_map(bits, config.data_order).reshape(len(data), config.n_fft).T
    pilot_grid = np.zeros_like(grid)
    pilot_grid[:, list(config.pilot_symbols)] = pilots
    grid[:, list(config.pilot_symbols)] = pilots
    return TxFrame(grid=grid, bits=bits, pilot_grid=pilot_grid)


def data_bits_of(grid: np.ndarray, config: OfdmConfig) -> np.ndarray:
    """Hard-demapped bits of a K×N grid's data positions, in transmit order."""
    return qam_demap(grid[:, list(config.data_symbols)].T.reshape(-1), config.data_order)


# --------------------------------------------------------------------------
# Channel
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TdlProfile:
    delays: np.ndarray      # seconds
    powers: np.ndarray      # linear, summing to 1
    k_factors_db: np.ndarray  # NaN where the tap is pure Rayleigh


@lru_cache(maxsize=16)
def _read_profile(path: str) -> Tuple[Tuple[float, float, float], ...]:
    rows = []
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (2, 3):
                raise ConfigError(f"ofdm.profile: {path}:{number}: expected 'delay_ns power_db [k_db]'")
            try:
                values = [float(v) for v in fields]
            except ValueError:
                raise ConfigError(f"ofdm.profile: {path}:{number}: non-numeric field")
            rows.append((values[0], values[1], values[2] if len(values) == 3 else float("nan")))
    if not rows:
        raise ConfigError(f"ofdm.profile: {path} has no taps")
    return tuple(rows)


def load_profile(path: Optional[str] = None, max_delay_spread: float = 100e-9) -> TdlProfile:
    """Read a `delay_ns power_db [k_db]` table, scale delays to the spread and normalise powers."""
    rows = np.array(_read_profile(path or DEFAULT_PROFILE))
    delays = rows[:, 0] * 1e-9
    if delays.max() > 0:
        delays = delays * (max_delay_spread / delays.max())
    powers = 10.0 ** (rows[:, 1] / 10.0)
    return TdlProfile(delays=delays, powers=powers / powers.sum(), k_factors_db=rows[:, 2])


@dataclass
class ChannelRealization:
    delays: np.ndarray  # L
    gains: np.ndarray   # M×L complex
    H: np.ndarray       # K×M
    noise_var: float


def tdl_realize(profile: TdlProfile, n_rx: int, rng: RngStream, k_factor_db: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tap delays and an M×L gain matrix. Taps with a Rician factor get a
    line-of-sight part √(pK/(K+1))·e^{jθ_m} with θ_m uniform per antenna plus
    a diffuse part of power p/(K+1); the others are CN(0, p).
    """
    k_db = profile.k_factors_db.copy()
    if k_factor_db is not None:
        k_db[0] = k_factor_db
    n_taps = profile.delays.size
    diffuse = rng.complex_normal((n_rx, n_taps))
    los_phase = rng.phase((n_rx, n_taps))
    gains = np.empty((n_rx, n_taps), dtype=np.complex128)
    for l in range(n_taps):
        p = profile.powers[l]
        if np.isnan(k_db[l]):
            los_fraction = 0.0
        elif np.isposinf(k_db[l]):
            los_fraction = 1.0
        else:
            k = 10.0 ** (k_db[l] / 10.0)
            los_fraction = k / (k + 1.0)
        gains[:, l] = (np.sqrt(p * los_fraction) * np.exp(1j * los_phase[:, l])
                       + np.sqrt(p * (1.0 - los_fraction)) * diffuse[:, l])
    return profile.delays.copy(), gains


def freq_response(delays: np.ndarray, gains: np.ndarray, config: OfdmConfig) -> np.ndarray:
    """H[k, m] = Σ_l a_{m,l}·exp(−j2π k Δf τ_l) over centred subcarrier indices."""
    gains = np.atleast_2d(gains)
    phase = np.exp(-2j * np.pi * np.outer(np.asarray(delays), config.subcarrier_index) * config.subcarrier_spacing)
    return (gains @ phase).T


def apply_channel(grid: ResourceGrid, H: np.ndarray, noise_var: float, rng: Optional[RngStream] = None) -> ResourceGrid:
    """Y[k, n, m] = H[k, m]·X[k, n] + N[k, n, m]."""
    if H.ndim != 2 or H.shape[0] != grid.shape[0]:
        raise ShapeError(f"apply_channel: H {H.shape} does not match grid {grid.shape}")
    Y = H[:, np.newaxis, :] * grid[:, :, np.newaxis]
    if noise_var > 0.0:
        if rng is None:
            raise ContractError("apply_channel: noise_var > 0 needs a random stream")
        Y = Y + rng.complex_normal(Y.shape, noise_var)
    return Y


def apply_channel_time_domain(grid: np.ndarray, delays: np.ndarray, gains: np.ndarray, config: OfdmConfig) -> np.ndarray:
    """
    Noiseless time-domain chain: IFFT, cyclic prefix, tap convolution over
    the serial stream, prefix removal, FFT. Delays must be whole samples.
    """
    samples = np.asarray(delays) * config.sample_rate
    shifts = np.rint(samples).astype(np.int64)
    if np.any(np.abs(samples - shifts) > 1e-6):
        raise ContractError("apply_channel_time_domain: delays must be integer multiples of the sample period")
    if np.any(shifts > config.cp_len):
        raise ContractError("apply_channel_time_domain: a tap delay exceeds the cyclic prefix")

    K, N = grid.shape
    cp = config.cp_len
    time = np.fft.ifft(np.fft.ifftshift(grid, axes=0), axis=0)
    serial = np.concatenate([time[K - cp:], time], axis=0).T.reshape(-1)

    gains = np.atleast_2d(gains)
    Y = np.empty((K, N, gains.shape[0]), dtype=np.complex128)
    for m in range(gains.shape[0]):
        received = np.zeros_like(serial)
        for l, d in enumerate(shifts):
            received[d:] += gains[m, l] * serial[:serial.size - d]
        blocks = received.reshape(N, K + cp).T[cp:]
        Y[:, :, m] = np.fft.fftshift(np.fft.fft(blocks, axis=0), axes=0)
    return Y


# --------------------------------------------------------------------------
# Receivers
# --------------------------------------------------------------------------

def _per_re(H: np.ndarray) -> np.ndarray:
    return H[:, np.newaxis, :] if H.ndim == 2 else H


def lmmse_equalize(Y: ResourceGrid, H: np.ndarray, noise_var: float) -> ResourceGrid:
    """ŝ[k, n] = h[k]ᴴ y[k, n] / (‖h[k]‖² + σ²); 0 where the denominator vanishes."""
    h = _per_re(H)
    numerator = np.sum(np.conj(h) * Y, axis=-1)
    denominator = np.broadcast_to(np.sum(np.abs(h) ** 2, axis=-1) + noise_var, numerator.shape)
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=denominator > 0.0)
    return out


def lmmse_gain(H: np.ndarray, noise_var: float) -> np.ndarray:
    """Shrinkage ‖h‖²/(‖h‖² + σ²) of the LMMSE output, per resource element row."""
    power = np.sum(np.abs(_per_re(H)) ** 2, axis=-1)
    out = np.zeros_like(power)
    np.divide(power, power + noise_var, out=out, where=(power + noise_var) > 0.0)
    return out


def unbias(estimate: np.ndarray, gain: np.ndarray) -> np.ndarray:
    out = np.zeros_like(estimate)
    np.divide(estimate, np.broadcast_to(gain, estimate.shape), out=out, where=np.broadcast_to(gain, estimate.shape) > 0.0)
    return out


def ls_estimate(Y: np.ndarray, pilot_grid: np.ndarray, pilot_symbols: Sequence[int]) -> np.ndarray:
    """Ĥ[k, m] = mean over pilot symbols p of Y[k, p, m]/X[k, p]; zero pilots are left out."""
    pilots = pilot_grid[:, list(pilot_symbols)]
    observed = Y[:, list(pilot_symbols), :]
    valid = np.abs(pilots) > 0.0
    ratio = np.zeros_like(observed)
    np.divide(observed, pilots[:, :, np.newaxis], out=ratio, where=valid[:, :, np.newaxis])
    count = valid.sum(axis=1)[:, np.newaxis]
    out = np.zeros((Y.shape[0], Y.shape[2]), dtype=np.complex128)
    np.divide(ratio.sum(axis=1), count, out=out, where=count > 0)
    return out


# --------------------------------------------------------------------------
# Tensors for the noise predictor
# --------------------------------------------------------------------------

def assemble_xp(Y: np.ndarray, pilot_grid: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    x_c of shape K×N×(2M+2): Re/Im of each antenna (antenna-major) divided by
    the RMS amplitude of Y, then Re/Im of the pilot-only grid at unit scale.
    Returns the tensor and the RMS factor.
    """
    rms = float(np.sqrt(np.mean(np.abs(Y) ** 2)))
    factor = rms if rms > 0.0 else 1.0
    normalised = Y / factor
    K, N, M = Y.shape
    received = np.stack([normalised.real, normalised.imag], axis=-1).reshape(K, N, 2 * M)
    pilots = np.stack([pilot_grid.real, pilot_grid.imag], axis=-1)
    return np.concatenate([received, pilots], axis=-1), factor


def assemble_x0(
    mode: str,
    grid: np.ndarray,
    Y: Optional[np.ndarray] = None,
    H: Optional[np.ndarray] = None,
    noise_var: Optional[float] = None,
) -> np.ndarray:
    """Target K×N×2: gt1 is the perfect-CSI LMMSE output, gt2 the transmitted grid."""
    if mode == "gt2":
        target = grid
    elif mode == "gt1":
        if Y is None or H is None or noise_var is None:
            raise ContractError("assemble_x0: gt1 needs the received grid, the true channel and σ²")
        target = lmmse_equalize(Y, H, noise_var)
    else:
        raise ConfigError(f"ground_truth: expected 'gt1' or 'gt2', got {mode!r}")
    return np.stack([target.real, target.imag], axis=-1)


def grid_from_x0(x0: np.ndarray) -> np.ndarray:
    return x0[..., 0] + 1j * x0[..., 1]


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def ber(bits_ref: np.ndarray, bits_est: np.ndarray) -> float:
    bits_ref, bits_est = np.asarray(bits_ref).reshape(-1), np.asarray(bits_est).reshape(-1)
    if bits_ref.size != bits_est.size:
        raise ContractError(f"ber: {bits_ref.size} reference bits against {bits_est.size} estimated")
    if bits_ref.size == 0:
        return 0.0
    return float(np.count_nonzero(bits_ref != bits_est)) / bits_ref.size


def awgn_ber(order: int, snr_db: float) -> float:
    """
    Exact bit error probability of Gray square QAM on AWGN with nearest-point
    decisions, integrating each axis's Gaussian over the decision intervals.
    """
    pairs = axis_levels(order)
    m = len(pairs[0][0])
    levels = np.array([level for _, level in pairs], dtype=np.float64) / scale(order)
    bits = np.array([b for b, _ in pairs])
    ordering = np.argsort(levels)
    levels, bits = levels[ordering], bits[ordering]
    edges = np.concatenate([[-np.inf], (levels[1:] + levels[:-1]) / 2.0, [np.inf]])
    sd = np.sqrt(noise_variance(snr_db) / 2.0)

    errors = 0.0
    for sent in range(levels.size):
        cdf = norm.cdf((edges - levels[sent]) / sd)
        region = np.diff(cdf)
        wrong = bits != bits[sent]
        errors += float(np.sum(region[:, np.newaxis] * wrong))
    return errors / (levels.size * m)


# --------------------------------------------------------------------------
# Frame simulation and receiver evaluation
# --------------------------------------------------------------------------

@dataclass
class OfdmFrame:
    tx: TxFrame
    channel: ChannelRealization
    received: ResourceGrid
    snr_db: float

    @property
    def noise_var(self) -> float:
        return self.channel.noise_var


@dataclass
class ReceiverOutput:
    estimate: ResourceGrid   # K×N grid compared against the transmitted grid
    decisions: ResourceGrid  # K×N grid that is demapped


Receiver = Callable[[Sequence[OfdmFrame], RngStream], List[ReceiverOutput]]


def simulate_frame(
    config: OfdmConfig,
    profile: TdlProfile,
    snr_db: float,
    rng: RngStream,
    pilots: Optional[np.ndarray] = None,
) -> OfdmFrame:
    """One block-fading frame: transmit grid, channel draw, noisy reception."""
    tx = build_tx_grid(config, rng, pilots)
    delays, gains = tdl_realize(profile, config.n_rx, rng, config.k_factor_db)
    noise_var = noise_variance(snr_db)
    channel = ChannelRealization(delays=delays, gains=gains, H=freq_response(delays, gains, config), noise_var=noise_var)
    received = apply_channel(tx.grid, channel.H, noise_var, rng)
    return OfdmFrame(tx=tx, channel=channel, received=received, snr_db=snr_db)


def frame_rng(seed: int, snr_db: float, index: int) -> RngStream:
    return derive_rng(seed, ("ofdm_eval", float(snr_db), index))


def unbias_pcsi(frame: OfdmFrame, estimate: ResourceGrid) -> ResourceGrid:
    """Undo the perfect-CSI LMMSE shrinkage of a K×N estimate of `frame` before slicing."""
    return unbias(estimate, lmmse_gain(frame.channel.H, frame.noise_var)[:, np.newaxis])


def lmmse_pcsi(frames: Sequence[OfdmFrame], rng: Optional[RngStream] = None) -> List[ReceiverOutput]:
    out = []
    for frame in frames:
        s = lmmse_equalize(frame.received, frame.channel.H, frame.noise_var)
        out.append(ReceiverOutput(estimate=s, decisions=unbias_pcsi(frame, s)))
    return out


def lmmse_icsi_for(config: OfdmConfig) -> Receiver:
    """LMMSE with the LS channel estimate from the pilot symbols."""
    def receive(frames: Sequence[OfdmFrame], rng: Optional[RngStream] = None) -> List[ReceiverOutput]:
        out = []
        for frame in frames:
            H_hat = ls_estimate(frame.received, frame.tx.pilot_grid, config.pilot_symbols)
            s = lmmse_equalize(frame.received, H_hat, frame.noise_var)
            gain = lmmse_gain(H_hat, frame.noise_var)
            out.append(ReceiverOutput(estimate=s, decisions=unbias(s, gain[:, np.newaxis])))
        return out
    return receive


def _evaluate_snr(
    receivers: Mapping[str, Receiver],
    config: OfdmConfig,
    profile: TdlProfile,
    snr_db: float,
    frames: int,
    seed: int,
    pilots: np.ndarray,
    batch_size: int,
) -> List[Dict[str, object]]:
    bit_errors = {name: 0 for name in receivers}
    sq_error = {name: 0.0 for name in receivers}
    total_bits = 0
    total_res = 0
    for start in range(0, frames, batch_size):
        batch = [
            simulate_frame(config, profile, snr_db, frame_rng(seed, snr_db, i), pilots)
            for i in range(start, min(start + batch_size, frames))
        ]
        total_bits += sum(f.tx.bits.size for f in batch)
        total_res += sum(f.tx.grid.size for f in batch)
        for name, receiver in receivers.items():
            for frame, output in zip(batch, receiver(batch, derive_rng(seed, ("ofdm_receive", float(snr_db), start)))):
                bit_errors[name] += int(np.count_nonzero(data_bits_of(output.decisions, config) != frame.tx.bits))
                sq_error[name] += float(np.sum(np.abs(output.estimate - frame.tx.grid) ** 2))
    rows = []
    for name in receivers:
        row = {
            "snr_db": float(snr_db),
            "receiver": name,
            "ber": bit_errors[name] / total_bits,
            "grid_mse": sq_error[name] / total_res,
        }
        logger.info(f"SNR {snr_db:g} dB {name}: BER {row['ber']:.4e}, grid MSE {row['grid_mse']:.4e}")
        rows.append(row)
    return rows


def evaluate_receiver(
    receivers: Mapping[str, Receiver],
    config: OfdmConfig,
    snr_grid: Sequence[float],
    frames: int,
    seed: int,
    profile: Optional[TdlProfile] = None,
    batch_size: int = 32,
    workers: int = 1,
) -> pd.DataFrame:
    """
    BER and grid MSE for each receiver at each SNR. Frame i at a given SNR
    always comes from stream ("ofdm_eval", snr, i), so every receiver sees the
    same frames and the table does not depend on `workers`.
    """
    if frames < 1:
        raise ConfigError(f"eval.frames: must be positive, got {frames}")
    profile = profile or load_profile(config.profile, config.max_delay_spread)
    pilots = pilot_sequence(config)
    run = lambda snr: _evaluate_snr(receivers, config, profile, snr, frames, seed, pilots, batch_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, snr_grid))
    else:
        results = [run(snr) for snr in snr_grid]
    table = pd.DataFrame([row for rows in results for row in rows], columns=BER_COLUMNS)
    return table.sort_values(["snr_db", "receiver"], kind="mergesort").reset_index(drop=True)
