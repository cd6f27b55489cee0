"""
Experiment configuration.

A run is described by one TOML file: top-level `scenario`, `seed`,
`ground_truth` and `output_dir`, then `[schedule]`, `[sampler]`,
`[network]`, `[training]`, `[eval]` and the scenario block (`[ofdm]` or
`[pn]`). Anything left out takes the full-scale default. Validation failures
surface as ConfigError naming the dotted key.
"""
import hashlib
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import List, Literal, Optional, Tuple

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from modules.errors import ConfigError
from modules.phy_ofdm import OfdmConfig
from modules.phy_pn import PnConfig

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = "runs"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleConfig(_Section):
    T: int = Field(500, ge=1)
    beta_min: float = 5e-4
    beta_max: float = 1e-2

    @model_validator(mode="after")
    def _check(self) -> "ScheduleConfig":
        if not 0.0 < self.beta_min < self.beta_max < 1.0:
            raise ValueError(f"need 0 < beta_min < beta_max < 1, got {self.beta_min} and {self.beta_max}")
        return self


class SamplerConfig(_Section):
    steps: int = Field(15, ge=1)
    eta: float = Field(1.0, ge=0.0, le=1.0)


class NetworkConfig(_Section):
    q_c1: int = Field(64, ge=1)
    q_c2: int = Field(64, ge=1)
    q_cl: int = Field(128, ge=1)
    kernel: Tuple[int, int] = (3, 3)
    q_t: int = Field(16, ge=2)
    max_period: float = Field(1e4, gt=0.0)
    base_width: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "NetworkConfig":
        if self.kernel[0] % 2 == 0 or self.kernel[1] % 2 == 0 or min(self.kernel) < 1:
            raise ValueError(f"kernel extents must be positive and odd, got {self.kernel}")
        if self.q_t % 2:
            raise ValueError(f"q_t must be even, got {self.q_t}")
        return self


class TrainingConfig(_Section):
    learning_rate: float = Field(8e-5, gt=0.0)
    steps: int = Field(10000, ge=0)
    batch_size: int = Field(32, ge=1)
    # Training examples draw their SNR uniformly from this range.
    snr_db_min: float = -4.0
    snr_db_max: float = 5.0
    workers: int = Field(1, ge=1)
    log_every: int = Field(100, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "TrainingConfig":
        if self.snr_db_min > self.snr_db_max:
            raise ValueError(f"snr_db_min {self.snr_db_min} exceeds snr_db_max {self.snr_db_max}")
        return self


class EvalConfig(_Section):
    snr_db: List[float] = Field(default_factory=lambda: [float(s) for s in range(-4, 6)])
    frames: int = Field(500, ge=1)
    sections: int = Field(1000, ge=1)
    pn_levels_dbchz: List[float] = Field(default_factory=list)
    batch_size: int = Field(32, ge=1)
    workers: int = Field(1, ge=1)
    # Frames (or sections) per SNR point recorded in the reverse-step trace.
    trace_count: int = Field(8, ge=1)
    residual_snr_db: Optional[float] = None

    @model_validator(mode="after")
    def _check(self) -> "EvalConfig":
        if not self.snr_db:
            raise ValueError("snr_db must list at least one SNR")
        return self


class ExperimentConfig(_Section):
    scenario: Literal["ofdm_detect", "pn_estimate"] = "ofdm_detect"
    seed: int = Field(0, ge=0)
    ground_truth: Literal["gt1", "gt2"] = "gt1"
    output_dir: Optional[str] = None
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ofdm: OfdmConfig = Field(default_factory=OfdmConfig)
    pn: PnConfig = Field(default_factory=PnConfig)

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.sampler.steps > self.schedule.T:
            raise ValueError(f"sampler.steps {self.sampler.steps} exceeds schedule.T {self.schedule.T}")
        if self.network.q_cl <= self.condition_channels:
            raise ValueError(
                f"network.q_cl {self.network.q_cl} must exceed the {self.condition_channels} condition channels"
            )
        return self

    @property
    def condition_channels(self) -> int:
        return 2 * self.ofdm.n_rx + 2 if self.scenario == "ofdm_detect" else 3

    @property
    def scenario_block(self) -> BaseModel:
        return self.ofdm if self.scenario == "ofdm_detect" else self.pn


def _dotted(loc: Tuple) -> str:
    return ".".join(str(part) for part in loc) or "config"


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        message = first["msg"].removeprefix("Value error, ")
        raise ConfigError(f"{_dotted(first['loc'])}: {message}") from e


def load_config(path: str) -> ExperimentConfig:
    """Parse a TOML run description, fill defaults and validate every section."""
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")
    config = validate_config(data)
    logger.debug(f"Loaded config {path} (scenario {config.scenario}, digest {config_digest(config)[:12]})")
    return config


def config_to_dict(config: ExperimentConfig) -> dict:
    return config.model_dump(mode="json", exclude_none=True)


def save_config(config: ExperimentConfig, path: str) -> None:
    with open(path, "wb") as f:
        tomli_w.dump(config_to_dict(config), f)


def with_overrides(config: ExperimentConfig, seed: Optional[int] = None, output_dir: Optional[str] = None) -> ExperimentConfig:
    """Apply command-line overrides and revalidate."""
    data = config_to_dict(config)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    return validate_config(data)


def resolve_output_dir(config: ExperimentConfig) -> str:
    return config.output_dir or os.getenv("PHYDIFF_OUTPUT_DIR") or DEFAULT_OUTPUT_DIR


def config_digest(config: ExperimentConfig) -> str:
    """
    SHA-256 of the settings that fix parameter shapes and the meaning of the
    data. Evaluation grids, training length and paths stay out, so a
    checkpoint can be evaluated under a new eval block.
    """
    data = config_to_dict(config)
    scoped = {
        "scenario": data["scenario"],
        "schedule": data["schedule"],
        "network": data["network"],
        "block": data["ofdm"] if config.scenario == "ofdm_detect" else data["pn"],
        "ground_truth": data["ground_truth"],
    }
    canonical = json.dumps(scoped, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
