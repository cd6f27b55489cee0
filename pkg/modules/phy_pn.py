"""
Single-carrier phase-noise testbed: y = s·e^{jφ} + n.

A block holds `block_sections` pilot sections of P symbols (pilot first,
then P − 1 data symbols) followed by one closing pilot, so every section is
bracketed by two pilots. φ is a Wiener random walk whose per-symbol variance
follows from the oscillator level in dBc/Hz.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from modules.errors import ConfigError, ContractError
from modules.qam import bits_per_symbol, hard_symbols, qam_map
from modules.rng import RngStream, derive_rng

logger = logging.getLogger(__name__)

PN_COLUMNS = ["snr_db", "pn_level_dbchz", "method", "mse"]
PILOT_ORDER = 4


class PnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    pilot_spacing: int = 50
    order: int = 256
    level_dbchz: float = -88.0
    offset_hz: float = 1e5
    symbol_rate: float = 1e8
    block_sections: int = 4

    @model_validator(mode="after")
    def _check(self) -> "PnConfig":
        if self.pilot_spacing < 2:
            raise ValueError(f"pilot_spacing must be at least 2, got {self.pilot_spacing}")
        if self.symbol_rate <= 0 or self.offset_hz <= 0:
            raise ValueError("symbol_rate and offset_hz must be positive")
        if self.block_sections < 1:
            raise ValueError(f"block_sections must be positive, got {self.block_sections}")
        bits_per_symbol(self.order)
        return self

    @property
    def block_length(self) -> int:
        return self.block_sections * self.pilot_spacing + 1


@dataclass
class PnSection:
    s: np.ndarray          # P transmitted symbols, pilot first
    phi: np.ndarray        # true phase
    y: np.ndarray          # observations
    phi_psam: np.ndarray   # PSAM phase estimate
    s_psam: np.ndarray     # decisions after PSAM derotation; the pilot where known
    noise_var: float

    @property
    def P(self) -> int:
        return int(self.s.size)


def pn_step_variance(level_dbchz: float, offset_hz: float, symbol_rate: float) -> float:
    """σ²_Δ = (2π f_off)²·10^{L/10}/R_s, the Wiener increment matching L at f_off."""
    if offset_hz <= 0 or symbol_rate <= 0:
        raise ConfigError("pn: offset_hz and symbol_rate must be positive")
    return float((2.0 * np.pi * offset_hz) ** 2 * 10.0 ** (level_dbchz / 10.0) / symbol_rate)


def gen_pn(step_variance: float, n: int, rng: RngStream) -> np.ndarray:
    """φ_0 uniform in [−π, π), then φ_{k+1} = φ_k + Δ_k with Δ_k ~ N(0, σ²_Δ)."""
    phi0 = float(rng.phase(1)[0])
    increments = rng.normal(max(n - 1, 0)) * np.sqrt(step_variance)
    return phi0 + np.concatenate([[0.0], np.cumsum(increments)])[:n]


def apply_pn(s: np.ndarray, phi: np.ndarray, noise_var: float, rng: Optional[RngStream] = None) -> np.ndarray:
    s, phi = np.asarray(s), np.asarray(phi)
    if s.shape != phi.shape:
        raise ContractError(f"apply_pn: symbols {s.shape} and phase {phi.shape} differ")
    y = s * np.exp(1j * phi)
    if noise_var > 0.0:
        if rng is None:
            raise ContractError("apply_pn: noise_var > 0 needs a random stream")
        y = y + rng.complex_normal(y.shape, noise_var)
    return y


def pilot_positions(n: int, pilot_spacing: int) -> np.ndarray:
    return np.arange(0, n, pilot_spacing)


def psam_estimate(y: np.ndarray, pilots: np.ndarray, pilot_spacing: int) -> np.ndarray:
    """
    Phase at each pilot is arg(y_p·conj(s_p)); the pilot phases are
    unwrapped and interpolated linearly. Symbols past the last pilot hold
    its estimate.
    """
    positions = pilot_positions(len(y), pilot_spacing)
    pilots = np.asarray(pilots)
    if pilots.size != positions.size:
        raise ContractError(f"psam_estimate: {positions.size} pilot positions but {pilots.size} pilot values")
    at_pilots = np.unwrap(np.angle(np.asarray(y)[positions] * np.conj(pilots)))
    return np.interp(np.arange(len(y)), positions, at_pilots)


def hard_decision(y: np.ndarray, phi_hat: np.ndarray, order: int) -> np.ndarray:
    """Nearest point to y·e^{−jφ̂}."""
    return hard_symbols(np.asarray(y) * np.exp(-1j * np.asarray(phi_hat)), order)


def simulate_block(
    config: PnConfig,
    noise_var: float,
    rng: RngStream,
    level_dbchz: Optional[float] = None,
) -> List[PnSection]:
    """One block of pilot sections with its PSAM estimates filled in."""
    P = config.pilot_spacing
    n = config.block_length
    positions = pilot_positions(n, P)

    m = bits_per_symbol(config.order)
    s = qam_map(rng.bits(n * m), config.order)
    pilots = qam_map(rng.bits(positions.size * bits_per_symbol(PILOT_ORDER)), PILOT_ORDER)
    s[positions] = pilots

    level = config.level_dbchz if level_dbchz is None else level_dbchz
    phi = gen_pn(pn_step_variance(level, config.offset_hz, config.symbol_rate), n, rng)
    y = apply_pn(s, phi, noise_var, rng)

    phi_psam = psam_estimate(y, pilots, P)
    s_psam = hard_decision(y, phi_psam, config.order)
    s_psam[positions] = pilots

    return [
        PnSection(
            s=s[i:i + P], phi=phi[i:i + P], y=y[i:i + P],
            phi_psam=phi_psam[i:i + P], s_psam=s_psam[i:i + P], noise_var=noise_var,
        )
        for i in range(0, config.block_sections * P, P)
    ]


def assemble_xp_pn(section: PnSection) -> np.ndarray:
    """1×P×3: Re and Im of y/s_PSAM, then σ² along the section."""
    ratio = section.y / section.s_psam
    return np.stack([ratio.real, ratio.imag, np.full(section.P, section.noise_var)], axis=-1)[np.newaxis]


def assemble_x0_pn(section: PnSection) -> np.ndarray:
    return np.stack([np.cos(section.phi), np.sin(section.phi)], axis=-1)[np.newaxis]


def pn_mse(estimate: np.ndarray, phi: np.ndarray) -> float:
    """
    Mean |e^{jφ̂} − e^{jφ}|². `estimate` is either phases shaped like `phi` or
    (cos, sin) pairs with a trailing axis of 2, projected onto the unit circle.
    """
    estimate, phi = np.asarray(estimate, dtype=np.float64), np.asarray(phi, dtype=np.float64)
    if estimate.shape == phi.shape:
        z = np.exp(1j * estimate)
    elif estimate.shape == phi.shape + (2,):
        z = np.exp(1j * np.arctan2(estimate[..., 1], estimate[..., 0]))
    else:
        raise ContractError(f"pn_mse: estimate {estimate.shape} does not match phase {phi.shape}")
    if phi.size == 0:
        return 0.0
    return float(np.mean(np.abs(z - np.exp(1j * phi)) ** 2))


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

Estimator = Callable[[Sequence[PnSection], RngStream], List[np.ndarray]]


def section_rng(seed: int, snr_db: float, level_dbchz: float, block: int) -> RngStream:
    return derive_rng(seed, ("pn_eval", float(snr_db), float(level_dbchz), block))


def simulate_sections(config: PnConfig, snr_db: float, level_dbchz: float, count: int, seed: int) -> List[PnSection]:
    """The first `count` sections of the evaluation blocks for one (SNR, level) point."""
    noise_var = float(10.0 ** (-snr_db / 10.0))
    sections: List[PnSection] = []
    block = 0
    while len(sections) < count:
        sections.extend(simulate_block(config, noise_var, section_rng(seed, snr_db, level_dbchz, block), level_dbchz))
        block += 1
    return sections[:count]


def psam_estimator(sections: Sequence[PnSection], rng: Optional[RngStream] = None) -> List[np.ndarray]:
    return [section.phi_psam for section in sections]


def evaluate_estimators(
    estimators: Mapping[str, Estimator],
    config: PnConfig,
    snr_grid: Sequence[float],
    sections: int,
    seed: int,
    levels: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> pd.DataFrame:
    """PN MSE per (SNR, PN level, method), averaged over `sections` sections."""
    if sections < 1:
        raise ConfigError(f"eval.sections: must be positive, got {sections}")
    levels = list(levels) if levels else [config.level_dbchz]
    points = [(snr, level) for snr in snr_grid for level in levels]

    def run(point) -> List[Dict[str, object]]:
        snr, level = point
        batch = simulate_sections(config, snr, level, sections, seed)
        rows = []
        for name, estimate in estimators.items():
            outputs = estimate(batch, derive_rng(seed, ("pn_estimate", float(snr), float(level))))
            mse = float(np.mean([pn_mse(e, s.phi) for e, s in zip(outputs, batch)]))
            logger.info(f"SNR {snr:g} dB, PN {level:g} dBc/Hz {name}: MSE {mse:.4e}")
            rows.append({"snr_db": float(snr), "pn_level_dbchz": float(level), "method": name, "mse": mse})
        return rows

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, points))
    else:
        results = [run(point) for point in points]
    table = pd.DataFrame([row for rows in results for row in rows], columns=PN_COLUMNS)
    return table.sort_values(["snr_db", "pn_level_dbchz", "method"], kind="mergesort").reset_index(drop=True)
