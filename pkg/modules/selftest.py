"""Quick invariant checks behind the `selftest` command, plus the Gray tables for audit."""
import logging
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from modules import diffusion, phy_ofdm, phy_pn, qam
from modules.gradcore import gradcheck
from modules.npnn import EncoderSpec, NoisePredictor, NoisePredictorSpec, TimeEmbedSpec
from modules.rng import derive_rng

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def miniature_spec() -> NoisePredictorSpec:
    """An 8×8 two-channel predictor small enough for finite differences."""
    return NoisePredictorSpec(
        encoder=EncoderSpec(d_h=8, d_w=8, d_ch=2, q_c1=4, q_c2=4, q_cl=8),
        time=TimeEmbedSpec(q_t=4),
        c_x=2,
        base_width=4,
        T=50,
    )


def _alpha_bar_product() -> Tuple[bool, str]:
    schedule = diffusion.make_sigmoid_schedule(500, 5e-4, 1e-2)
    worst = 0.0
    for t in (1, 10, 100, 500):
        brute = 1.0
        for s in range(t):
            brute *= 1.0 - schedule.beta[s]
        worst = max(worst, abs(diffusion.alpha_bar_at(schedule, t) - brute) / brute)
    return worst <= 1e-12, f"max relative deviation {worst:.2e}"


def _marginal_closure() -> Tuple[bool, str]:
    schedule = diffusion.make_sigmoid_schedule(500, 5e-4, 1e-2)
    rng = derive_rng(0, ("selftest", 1))
    n, t = 20000, 100
    x = np.full(n, 0.7)
    for step in range(1, t + 1):
        x = diffusion.forward_step(x, step, rng.normal(n), schedule)
    abar = diffusion.alpha_bar_at(schedule, t)
    mean_err = abs(x.mean() - np.sqrt(abar) * 0.7) / (np.sqrt(abar) * 0.7)
    var_err = abs(x.var() - (1.0 - abar)) / (1.0 - abar)
    return mean_err < 0.02 and var_err < 0.03, f"mean error {mean_err:.3%}, variance error {var_err:.3%}"


def _ddim_matches_ddpm() -> Tuple[bool, str]:
    schedule = diffusion.make_sigmoid_schedule(200, 5e-4, 1e-2)
    rng = derive_rng(0, ("selftest", 2))
    x_t, eps = rng.normal((4, 3)), rng.normal((4, 3))
    worst = 0.0
    for t in (2, 50, 200):
        sigma = diffusion.sigma_for_step(t, t - 1, 1.0, schedule)
        step = diffusion.ddim_step(x_t, eps, t, t - 1, sigma, np.zeros_like(x_t), schedule)
        mean = diffusion.ddpm_mean(x_t, eps, t, schedule)
        worst = max(worst, float(np.max(np.abs(step - mean) / np.maximum(np.abs(mean), 1e-12))))
    return worst <= 1e-10, f"max relative deviation {worst:.2e}"


def _npnn_gradients() -> Tuple[bool, str]:
    spec = miniature_spec()
    model = NoisePredictor(spec, seed=3)
    rng = derive_rng(0, ("selftest", 3))
    x_t, x_c = rng.normal((2, 8, 8, 2)), rng.normal((2, 8, 8, 2))
    target = rng.normal((2, 8, 8, 2))
    t = np.array([3, 40])

    def build(params):
        g, out = model.graph(params, x_t, x_c, t)
        return g, g.mse(out, g.constant(target))

    report = gradcheck(build, dict(model.params), max_coords=3)
    return report.max_error <= 1e-4, f"max relative error {report.max_error:.2e} over {report.checked} coordinates"


def _qam_tables() -> Tuple[bool, str]:
    ok = True
    for order in qam.SUPPORTED_ORDERS:
        points = qam.constellation(order)
        ok &= abs(np.mean(np.abs(points) ** 2) - 1.0) < 1e-12
        bits = derive_rng(0, ("selftest", order)).bits(64 * qam.bits_per_symbol(order))
        ok &= bool(np.array_equal(qam.qam_demap(qam.qam_map(bits, order), order), bits))
    return ok, "unit power and noiseless round trip for orders " + ", ".join(map(str, qam.SUPPORTED_ORDERS))


def _channel_equivalence() -> Tuple[bool, str]:
    config = phy_ofdm.OfdmConfig(n_fft=16, n_sym=4, cp_len=4, n_rx=2, data_order=4, pilot_symbols=(1,))
    rng = derive_rng(0, ("selftest", 4))
    frame = phy_ofdm.build_tx_grid(config, rng)
    delays = np.array([0, 1, 3]) / config.sample_rate
    gains = rng.complex_normal((2, 3))
    freq = phy_ofdm.apply_channel(frame.grid, phy_ofdm.freq_response(delays, gains, config), 0.0)
    time = phy_ofdm.apply_channel_time_domain(frame.grid, delays, gains, config)
    deviation = float(np.linalg.norm(time - freq) / np.linalg.norm(freq))
    return deviation <= 1e-9, f"relative deviation {deviation:.2e}"


def _psam_exact() -> Tuple[bool, str]:
    n, P = 201, 50
    rng = derive_rng(0, ("selftest", 5))
    s = qam.qam_map(rng.bits(2 * n), 4)
    phi = 0.3 + 0.01 * np.arange(n)
    y = phy_pn.apply_pn(s, phi, 0.0)
    estimate = phy_pn.psam_estimate(y, s[::P], P)
    mse = phy_pn.pn_mse(estimate, phi)
    return mse < 1e-20, f"linear-phase MSE {mse:.2e}"


def _pn_variance() -> Tuple[bool, str]:
    value = phy_pn.pn_step_variance(-88.0, 1e5, 1e8)
    return abs(value - 6.257e-6) / 6.257e-6 < 1e-4, f"σ²_Δ = {value:.6e} rad²"


def _rng_reproducible() -> Tuple[bool, str]:
    a = derive_rng(42, ("selftest", 6)).normal(1000)
    b = derive_rng(42, ("selftest", 6)).normal(1000)
    c = derive_rng(42, ("selftest", 7)).normal(1000)
    return bool(np.array_equal(a, b) and not np.array_equal(a, c)), "same key repeats, distinct keys differ"


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("alpha_bar product", _alpha_bar_product),
    ("forward marginal closure", _marginal_closure),
    ("DDIM eta=1 matches DDPM mean", _ddim_matches_ddpm),
    ("predictor gradients", _npnn_gradients),
    ("QAM tables", _qam_tables),
    ("time/frequency channel equivalence", _channel_equivalence),
    ("PSAM exact on linear phase", _psam_exact),
    ("PN step variance", _pn_variance),
    ("random streams", _rng_reproducible),
]


def run_selftest() -> List[CheckResult]:
    results = []
    for name, check in CHECKS:
        try:
            passed, detail = check()
        except Exception as e:
            passed, detail = False, f"raised {type(e).__name__}: {e}"
        level = logging.INFO if passed else logging.ERROR
        logger.log(level, f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        results.append(CheckResult(name, bool(passed), detail))
    for order in (4, 16):
        logger.info(f"Gray table, {order}-QAM:")
        for bits, point in qam.gray_table(order):
            logger.info(f"  {bits} -> {point.real:+.6f}{point.imag:+.6f}j")
    return results
