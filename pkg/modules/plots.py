"""SVG charts of run outputs. Files are byte-stable: fixed hash salt, no date stamp."""
import logging
import os
from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "phydiff"


def _save(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Wrote {path}")


def plot_loss(losses: pd.DataFrame, path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.semilogy(losses["step"], losses["loss"], lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(True, which="both", alpha=0.3)
    _save(fig, path)


def plot_ber(table: pd.DataFrame, out_dir: str) -> None:
    for column, label in (("ber", "uncoded BER"), ("grid_mse", "grid MSE")):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for receiver, rows in table.groupby("receiver", sort=True):
            values = rows[column].to_numpy()
            ax.semilogy(rows["snr_db"], np.where(values > 0, values, np.nan), "o-", label=receiver)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(label)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        _save(fig, os.path.join(out_dir, f"{column}.svg"))


def plot_pn(table: pd.DataFrame, out_dir: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (method, level), rows in table.groupby(["method", "pn_level_dbchz"], sort=True):
        ax.semilogy(rows["snr_db"], rows["mse"], "o-", label=f"{method} ({level:g} dBc/Hz)")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("PN MSE")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    _save(fig, os.path.join(out_dir, "pn_mse.svg"))


def plot_residual_maps(maps: Dict[str, np.ndarray], path: str, panels: int = 6) -> None:
    """Residual-error maps for a spread of reverse steps next to the LMMSE maps."""
    steps = maps["diffusion_steps"]
    picks = np.unique(np.linspace(0, steps.shape[0] - 1, min(panels, steps.shape[0])).round().astype(int))
    images = [(f"step τ={int(maps['taus'][i])}", steps[i]) for i in picks]
    images += [("LMMSE-PCSI", maps["lmmse_pcsi"]), ("LMMSE-ICSI", maps["lmmse_icsi"])]
    vmax = max(float(img.max()) for _, img in images) or 1.0
    fig, axes = plt.subplots(1, len(images), figsize=(2.2 * len(images), 3.2), squeeze=False)
    for ax, (title, img) in zip(axes[0], images):
        ax.imshow(img, aspect="auto", origin="lower", vmin=0.0, vmax=vmax)
        ax.set_title(f"{title}\nMSE {10 * np.log10(max(img.mean(), 1e-300)):.1f} dB", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    _save(fig, path)


def plot_pn_steps(arrays: Dict[str, np.ndarray], path: str) -> None:
    """Re{e^{jφ}} of one section at every reverse step, with the truth and PSAM."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    steps = arrays["x0_steps"]
    for i, tau in enumerate(arrays["taus"]):
        projected = np.cos(np.arctan2(steps[i][:, 1], steps[i][:, 0]))
        ax.plot(projected, lw=0.6, alpha=0.3 + 0.7 * (i + 1) / len(steps), label=f"τ={int(tau)}" if i in (0, len(steps) - 1) else None)
    ax.plot(np.cos(arrays["phi"]), "k", lw=1.5, label="true")
    ax.plot(np.cos(arrays["phi_psam"]), "r--", lw=1.0, label="PSAM")
    ax.set_xlabel("symbol in section")
    ax.set_ylabel("Re{e^{jφ}}")
    ax.legend()
    _save(fig, path)
