"""
Scenario adaptation: what x_p and x_0 are for each problem, how training
batches are generated, and how a trained predictor becomes a receiver or an
estimator next to the classical baselines.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from modules.config import ExperimentConfig
from modules.diffusion import Schedule, TauSet, make_sigmoid_schedule, make_tau, sample
from modules.errors import ConfigError
from modules.npnn import EncoderSpec, NoisePredictor, NoisePredictorSpec, TimeEmbedSpec
from modules.phy_ofdm import (
    OfdmFrame,
    ReceiverOutput,
    assemble_x0,
    assemble_xp,
    evaluate_receiver,
    frame_rng,
    grid_from_x0,
    lmmse_equalize,
    lmmse_icsi_for,
    lmmse_pcsi,
    load_profile,
    ls_estimate,
    noise_variance,
    pilot_sequence,
    simulate_frame,
    unbias_pcsi,
)
from modules.phy_pn import (
    PnSection,
    assemble_x0_pn,
    assemble_xp_pn,
    evaluate_estimators,
    pn_mse,
    psam_estimator,
    simulate_block,
    simulate_sections,
)
from modules.rng import RngStream, derive_rng

logger = logging.getLogger(__name__)

OFDM_TRACE_COLUMNS = ["snr_db", "frame", "step", "tau", "mse"]
PN_TRACE_COLUMNS = ["snr_db", "section", "step", "tau", "mse", "psam_mse"]


def make_schedule(config: ExperimentConfig) -> Schedule:
    return make_sigmoid_schedule(config.schedule.T, config.schedule.beta_min, config.schedule.beta_max)


def make_tau_set(config: ExperimentConfig) -> TauSet:
    return make_tau(config.sampler.steps, config.schedule.T, config.sampler.eta)


def sample_batched(
    model: NoisePredictor,
    xp: np.ndarray,
    schedule: Schedule,
    tau_set: TauSet,
    rng: RngStream,
    batch_size: int,
    trace: bool = False,
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Run the reverse pass chunk by chunk; the trace holds one N×H×W×C array per step."""
    outputs, traces = [], []
    for start in range(0, xp.shape[0], batch_size):
        result = sample(model, xp[start:start + batch_size], tau_set, schedule, rng, trace=trace)
        outputs.append(result.x0)
        traces.append(result.x0_trace)
    x0 = np.concatenate(outputs, axis=0)
    steps = [np.concatenate([chunk[i] for chunk in traces], axis=0) for i in range(len(traces[0]))] if trace else []
    return x0, steps


class ScenarioTask:
    """Shared plumbing; subclasses supply geometry, batches and evaluation."""

    xp_shape: Tuple[int, int, int]
    x0_shape: Tuple[int, int, int]

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.seed = config.seed
        self.schedule = make_schedule(config)
        self.tau_set = make_tau_set(config)

    def model_spec(self) -> NoisePredictorSpec:
        net = self.config.network
        h, w, d_ch = self.xp_shape
        encoder = EncoderSpec(d_h=h, d_w=w, d_ch=d_ch, q_c1=net.q_c1, q_c2=net.q_c2, q_cl=net.q_cl, kernel=tuple(net.kernel))
        return NoisePredictorSpec(
            encoder=encoder,
            time=TimeEmbedSpec(q_t=net.q_t, max_period=net.max_period),
            c_x=self.x0_shape[2],
            base_width=net.base_width,
            T=self.config.schedule.T,
        )

    def build_model(self, params: Optional[Dict[str, np.ndarray]] = None) -> NoisePredictor:
        return NoisePredictor(self.model_spec(), params=params, seed=self.seed)

    def _training_snr(self, rng: RngStream, size: int) -> np.ndarray:
        low, high = self.config.training.snr_db_min, self.config.training.snr_db_max
        return low + (high - low) * rng.uniform(size)

    def batch(self, index: int, size: int) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def evaluate(self, model: Optional[NoisePredictor]) -> pd.DataFrame:
        raise NotImplementedError

    def trace(self, model: NoisePredictor) -> Tuple[pd.DataFrame, Dict[str, np.ndarray]]:
        raise NotImplementedError


class OfdmTask(ScenarioTask):
    """Signal detection: x_p is the received grid plus the pilot-only grid, x_0 the GT1 or GT2 grid."""

    def __init__(self, config: ExperimentConfig):
        super().__init__(config)
        self.ofdm = config.ofdm
        self.profile = load_profile(self.ofdm.profile, self.ofdm.max_delay_spread)
        self.pilots = pilot_sequence(self.ofdm)
        self.xp_shape = (self.ofdm.n_fft, self.ofdm.n_sym, 2 * self.ofdm.n_rx + 2)
        self.x0_shape = (self.ofdm.n_fft, self.ofdm.n_sym, 2)

    def tensors(self, frame: OfdmFrame) -> Tuple[np.ndarray, np.ndarray]:
        xp, _ = assemble_xp(frame.received, frame.tx.pilot_grid)
        x0 = assemble_x0(self.config.ground_truth, frame.tx.grid, frame.received, frame.channel.H, frame.noise_var)
        return xp, x0

    def batch(self, index: int, size: int) -> Tuple[np.ndarray, np.ndarray]:
        rng = derive_rng(self.seed, ("train_batch", index))
        pairs = [
            self.tensors(simulate_frame(self.ofdm, self.profile, float(snr), rng, self.pilots))
            for snr in self._training_snr(rng, size)
        ]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def detect(self, frames: Sequence[OfdmFrame], grids: Sequence[np.ndarray]) -> List[ReceiverOutput]:
        """
        Receiver outputs for sampled x̂0 grids. A GT1 predictor reproduces the
        shrunk perfect-CSI LMMSE output, so its decisions are unbiased with the
        same per-subcarrier gain as `lmmse_pcsi`; GT2 grids are sliced as they are.
        """
        if self.config.ground_truth == "gt1":
            return [ReceiverOutput(estimate=g, decisions=unbias_pcsi(f, g)) for f, g in zip(frames, grids)]
        return [ReceiverOutput(estimate=g, decisions=g) for g in grids]

    def diffusion_receiver(self, model: NoisePredictor):
        batch_size = self.config.eval.batch_size

        def receive(frames: Sequence[OfdmFrame], rng: RngStream) -> List[ReceiverOutput]:
            xp = np.stack([assemble_xp(f.received, f.tx.pilot_grid)[0] for f in frames])
            x0, _ = sample_batched(model, xp, self.schedule, self.tau_set, rng, batch_size)
            return self.detect(frames, list(grid_from_x0(x0)))

        return receive

    def evaluate(self, model: Optional[NoisePredictor]) -> pd.DataFrame:
        receivers = {"lmmse_pcsi": lmmse_pcsi, "lmmse_icsi": lmmse_icsi_for(self.ofdm)}
        if model is not None:
            receivers["diffusion"] = self.diffusion_receiver(model)
        ev = self.config.eval
        return evaluate_receiver(
            receivers, self.ofdm, ev.snr_db, ev.frames, self.seed,
            profile=self.profile, batch_size=ev.batch_size, workers=ev.workers,
        )

    def trace(self, model: NoisePredictor) -> Tuple[pd.DataFrame, Dict[str, np.ndarray]]:
        """
        Per reverse step, the MSE of x̂0 against the transmitted grid for the
        first `trace_count` frames at every SNR, plus residual maps |x̂0 − X|²
        averaged over those frames at `residual_snr_db` with the PCSI and ICSI
        maps beside them.
        """
        ev = self.config.eval
        residual_snr = ev.residual_snr_db if ev.residual_snr_db is not None else ev.snr_db[-1]
        rows = []
        maps: Dict[str, np.ndarray] = {}
        for snr in sorted(set(ev.snr_db) | {residual_snr}):
            frames = [simulate_frame(self.ofdm, self.profile, snr, frame_rng(self.seed, snr, i), self.pilots)
                      for i in range(ev.trace_count)]
            xp = np.stack([assemble_xp(f.received, f.tx.pilot_grid)[0] for f in frames])
            rng = derive_rng(self.seed, ("ofdm_trace", float(snr)))
            _, steps = sample_batched(model, xp, self.schedule, self.tau_set, rng, ev.batch_size, trace=True)
            truth = np.stack([f.tx.grid for f in frames])
            residuals = [np.abs(grid_from_x0(step) - truth) ** 2 for step in steps]
            if snr in ev.snr_db:
                for j, (tau, residual) in enumerate(zip(reversed(self.tau_set.tau), residuals), start=1):
                    for i in range(len(frames)):
                        rows.append({"snr_db": float(snr), "frame": i, "step": j, "tau": tau, "mse": float(residual[i].mean())})
            if snr == residual_snr:
                maps["diffusion_steps"] = np.stack([r.mean(axis=0) for r in residuals])
                maps["taus"] = np.array(list(reversed(self.tau_set.tau)))
                maps["lmmse_pcsi"] = np.mean(
                    [np.abs(lmmse_equalize(f.received, f.channel.H, f.noise_var) - f.tx.grid) ** 2 for f in frames], axis=0)
                maps["lmmse_icsi"] = np.mean(
                    [np.abs(lmmse_equalize(f.received, ls_estimate(f.received, f.tx.pilot_grid, self.ofdm.pilot_symbols),
                                           f.noise_var) - f.tx.grid) ** 2 for f in frames], axis=0)
                maps["snr_db"] = np.array(float(snr))
        table = pd.DataFrame(rows, columns=OFDM_TRACE_COLUMNS)
        return table.sort_values(["snr_db", "frame", "step"], kind="mergesort").reset_index(drop=True), maps


class PnTask(ScenarioTask):
    """Phase-noise estimation: x_p is y/s_PSAM with σ², x_0 the true (cos φ, sin φ) per section."""

    def __init__(self, config: ExperimentConfig):
        super().__init__(config)
        self.pn = config.pn
        P = self.pn.pilot_spacing
        self.xp_shape = (1, P, 3)
        self.x0_shape = (1, P, 2)

    def batch(self, index: int, size: int) -> Tuple[np.ndarray, np.ndarray]:
        rng = derive_rng(self.seed, ("train_batch", index))
        sections: List[PnSection] = []
        while len(sections) < size:
            snr = float(self._training_snr(rng, 1)[0])
            sections.extend(simulate_block(self.pn, noise_variance(snr), rng))
        sections = sections[:size]
        return (np.stack([assemble_xp_pn(s) for s in sections]),
                np.stack([assemble_x0_pn(s) for s in sections]))

    def diffusion_estimator(self, model: NoisePredictor):
        batch_size = self.config.eval.batch_size

        def estimate(sections: Sequence[PnSection], rng: RngStream) -> List[np.ndarray]:
            xp = np.stack([assemble_xp_pn(s) for s in sections])
            x0, _ = sample_batched(model, xp, self.schedule, self.tau_set, rng, batch_size)
            return [x[0] for x in x0]

        return estimate

    def evaluate(self, model: Optional[NoisePredictor]) -> pd.DataFrame:
        estimators = {"psam": psam_estimator}
        if model is not None:
            estimators["diffusion"] = self.diffusion_estimator(model)
        ev = self.config.eval
        levels = ev.pn_levels_dbchz or [self.pn.level_dbchz]
        return evaluate_estimators(estimators, self.pn, ev.snr_db, ev.sections, self.seed, levels=levels, workers=ev.workers)

    def trace(self, model: NoisePredictor) -> Tuple[pd.DataFrame, Dict[str, np.ndarray]]:
        """
        Per reverse step, the PN MSE of x̂0 for the first `trace_count`
        sections at every SNR, next to the PSAM MSE of the same section. The
        arrays hold every step's x̂0 and the truth for section 0 at
        `residual_snr_db`.
        """
        ev = self.config.eval
        focus_snr = ev.residual_snr_db if ev.residual_snr_db is not None else ev.snr_db[-1]
        rows = []
        arrays: Dict[str, np.ndarray] = {}
        for snr in sorted(set(ev.snr_db) | {focus_snr}):
            sections = simulate_sections(self.pn, snr, self.pn.level_dbchz, ev.trace_count, self.seed)
            xp = np.stack([assemble_xp_pn(s) for s in sections])
            rng = derive_rng(self.seed, ("pn_trace", float(snr)))
            _, steps = sample_batched(model, xp, self.schedule, self.tau_set, rng, ev.batch_size, trace=True)
            if snr in ev.snr_db:
                for i, section in enumerate(sections):
                    psam = pn_mse(section.phi_psam, section.phi)
                    for j, (tau, step) in enumerate(zip(reversed(self.tau_set.tau), steps), start=1):
                        rows.append({
                            "snr_db": float(snr), "section": i, "step": j, "tau": tau,
                            "mse": pn_mse(step[i, 0], section.phi), "psam_mse": psam,
                        })
            if snr == focus_snr:
                arrays["x0_steps"] = np.stack([step[0, 0] for step in steps])
                arrays["taus"] = np.array(list(reversed(self.tau_set.tau)))
                arrays["phi"] = sections[0].phi
                arrays["phi_psam"] = sections[0].phi_psam
                arrays["snr_db"] = np.array(float(snr))
        table = pd.DataFrame(rows, columns=PN_TRACE_COLUMNS)
        return table.sort_values(["snr_db", "section", "step"], kind="mergesort").reset_index(drop=True), arrays


def make_task(config: ExperimentConfig) -> ScenarioTask:
    if config.scenario == "ofdm_detect":
        return OfdmTask(config)
    if config.scenario == "pn_estimate":
        return PnTask(config)
    raise ConfigError(f"scenario: unknown scenario {config.scenario!r}")
