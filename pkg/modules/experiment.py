"""
Run orchestration: train a predictor for a scenario, evaluate it next to the
classical baselines, or evaluate the baselines alone. Every file a run
writes is a pure function of the config and seed.
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import pandas as pd

from modules.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from modules.config import ExperimentConfig, config_digest, resolve_output_dir, save_config
from modules.diffusion import TrainResult, train
from modules.errors import TrainingDiverged
from modules.gradcore import OptimizerState
from modules.scenarios import make_task

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.bin"
LOSS_FILE = "loss.csv"
FAILED_FILE = "FAILED"
TRACE_FILE = "trace.csv"
TRACE_ARRAYS_DIR = "trace_arrays"


@dataclass
class RunOutputs:
    output_dir: str
    files: Dict[str, str]


def write_csv(table: pd.DataFrame, path: str) -> str:
    table.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Wrote {path} ({len(table)} rows)")
    return path


def _prepare(config: ExperimentConfig) -> str:
    out = resolve_output_dir(config)
    os.makedirs(out, exist_ok=True)
    return out


def _metrics_file(config: ExperimentConfig) -> str:
    return "ber.csv" if config.scenario == "ofdm_detect" else "pn_mse.csv"


def _loss_table(result: TrainResult) -> pd.DataFrame:
    return pd.DataFrame({"step": np.arange(1, len(result.losses) + 1), "loss": result.losses})


def _plot_metrics(config: ExperimentConfig, table: pd.DataFrame, out: str) -> None:
    from modules import plots

    if config.scenario == "ofdm_detect":
        plots.plot_ber(table, out)
    else:
        plots.plot_pn(table, out)


def run_train(config: ExperimentConfig, plot: bool = False) -> RunOutputs:
    """
    Train the scenario's noise predictor for `training.steps` steps and write
    the checkpoint and the loss trace. On a non-finite loss the parameters of
    the last finite step are saved with a FAILED marker and the error is
    re-raised.
    """
    out = _prepare(config)
    save_config(config, os.path.join(out, "config.toml"))
    task = make_task(config)
    model = task.build_model()
    optimizer = OptimizerState.zeros_like(model.params, learning_rate=config.training.learning_rate)
    digest = config_digest(config)
    logger.info(
        f"Training {config.scenario} for {config.training.steps} steps "
        f"({model.parameter_count()} parameters, digest {digest[:12]})"
    )
    files = {}
    checkpoint_path = os.path.join(out, CHECKPOINT_FILE)
    failed_path = os.path.join(out, FAILED_FILE)
    if os.path.exists(failed_path):
        os.remove(failed_path)

    try:
        result = train(
            model, task, task.schedule, config.training.steps, optimizer, config.seed,
            batch_size=config.training.batch_size, workers=config.training.workers,
            log_every=config.training.log_every,
        )
    except TrainingDiverged as e:
        logger.error(f"Error in training: {e}")
        partial = e.partial or TrainResult([], 0)
        save_checkpoint(Checkpoint(digest, partial.steps, model.params, optimizer), checkpoint_path)
        write_csv(_loss_table(partial), os.path.join(out, LOSS_FILE))
        with open(failed_path, "w") as f:
            f.write(f"{e}\n")
        raise

    save_checkpoint(Checkpoint(digest, result.steps, model.params, optimizer), checkpoint_path)
    files["checkpoint"] = checkpoint_path
    losses = _loss_table(result)
    files["loss"] = write_csv(losses, os.path.join(out, LOSS_FILE))
    if plot and len(losses):
        from modules import plots

        files["loss_plot"] = os.path.join(out, "loss.svg")
        plots.plot_loss(losses, files["loss_plot"])
    return RunOutputs(output_dir=out, files=files)


def run_eval(config: ExperimentConfig, checkpoint_path: str, trace: bool = False, plot: bool = False) -> RunOutputs:
    """Evaluate a trained predictor against the baselines; the checkpoint must match the config digest."""
    ckpt = load_checkpoint(checkpoint_path, expected_digest=config_digest(config))
    out = _prepare(config)
    task = make_task(config)
    model = task.build_model(ckpt.params)
    logger.info(f"Evaluating {config.scenario} at {len(config.eval.snr_db)} SNR points (checkpoint step {ckpt.step})")

    files = {}
    table = task.evaluate(model)
    files["metrics"] = write_csv(table, os.path.join(out, _metrics_file(config)))
    if plot:
        _plot_metrics(config, table, out)

    if trace:
        trace_table, arrays = task.trace(model)
        files["trace"] = write_csv(trace_table, os.path.join(out, TRACE_FILE))
        arrays_dir = os.path.join(out, TRACE_ARRAYS_DIR)
        os.makedirs(arrays_dir, exist_ok=True)
        for name, value in sorted(arrays.items()):
            np.save(os.path.join(arrays_dir, f"{name}.npy"), value)
        files["trace_arrays"] = arrays_dir
        if plot:
            from modules import plots

            if config.scenario == "ofdm_detect":
                plots.plot_residual_maps(arrays, os.path.join(out, "residual_maps.svg"))
            else:
                plots.plot_pn_steps(arrays, os.path.join(out, "pn_steps.svg"))
    return RunOutputs(output_dir=out, files=files)


def run_baseline(config: ExperimentConfig, plot: bool = False) -> RunOutputs:
    """The classical receivers (or PSAM) alone; no checkpoint involved."""
    out = _prepare(config)
    task = make_task(config)
    logger.info(f"Baselines for {config.scenario} at {len(config.eval.snr_db)} SNR points")
    table = task.evaluate(None)
    files = {"metrics": write_csv(table, os.path.join(out, _metrics_file(config)))}
    if plot:
        _plot_metrics(config, table, out)
    return RunOutputs(output_dir=out, files=files)


def load_model_for(config: ExperimentConfig, checkpoint_path: Optional[str] = None):
    """A predictor for `config`: from a checkpoint if given, else freshly initialised."""
    task = make_task(config)
    if checkpoint_path is None:
        return task, task.build_model()
    ckpt = load_checkpoint(checkpoint_path, expected_digest=config_digest(config))
    return task, task.build_model(ckpt.params)
