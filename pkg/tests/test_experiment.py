"""End-to-end tests for the train / eval / baseline runs and the command line."""

import json
import logging
import struct
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import phydiff
from modules import experiment
from modules.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint
from modules.config import config_digest, load_config, save_config, validate_config, with_overrides
from modules.diffusion import TrainResult
from modules.errors import CheckpointError, TrainingDiverged
from modules.experiment import load_model_for, run_baseline, run_eval, run_train
from modules.phy_ofdm import data_bits_of, frame_rng, lmmse_equalize, lmmse_pcsi, simulate_frame
from modules.rng import derive_rng
from modules.scenarios import OfdmTask, PnTask, make_task, sample_batched

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY_NETWORK = {"q_c1": 4, "q_c2": 4, "q_cl": 8, "q_t": 4, "base_width": 4}


def _ofdm(tmp_path, **overrides):
    data = {
        "scenario": "ofdm_detect",
        "seed": 1,
        "output_dir": str(tmp_path / "ofdm"),
        "schedule": {"T": 20},
        "sampler": {"steps": 4},
        "network": TINY_NETWORK,
        "training": {"steps": 2, "batch_size": 2, "learning_rate": 1e-3, "log_every": 1},
        "ofdm": {"n_fft": 8, "n_sym": 4, "cp_len": 4, "n_rx": 1, "data_order": 4, "pilot_symbols": [1]},
        "eval": {"snr_db": [0.0, 10.0], "frames": 3, "batch_size": 2, "trace_count": 2},
    }
    data.update(overrides)
    return validate_config(data)


def _pn(tmp_path, **overrides):
    data = {
        "scenario": "pn_estimate",
        "seed": 2,
        "output_dir": str(tmp_path / "pn"),
        "schedule": {"T": 20},
        "sampler": {"steps": 4},
        "network": TINY_NETWORK,
        "training": {"steps": 2, "batch_size": 3, "snr_db_min": 10.0, "snr_db_max": 30.0, "log_every": 0},
        "pn": {"pilot_spacing": 8, "order": 16, "block_sections": 2},
        "eval": {"snr_db": [10.0, 20.0], "sections": 3, "batch_size": 2, "trace_count": 2},
    }
    data.update(overrides)
    return validate_config(data)


def _write_header_only(path, header):
    body = json.dumps(header).encode("utf-8")
    path.write_bytes(struct.pack("<8sIQ", MAGIC, FORMAT_VERSION, len(body)) + body)
    return path


# ============================================================================
# SCENARIOS
# ============================================================================


class TestScenarioTasks:
    """Tensor geometry and batch generation per scenario."""

    def test_ofdm_shapes(self, tmp_path):
        task = make_task(_ofdm(tmp_path))
        assert isinstance(task, OfdmTask)
        assert task.xp_shape == (8, 4, 4)
        assert task.x0_shape == (8, 4, 2)
        xp, x0 = task.batch(1, 3)
        assert xp.shape == (3, 8, 4, 4) and x0.shape == (3, 8, 4, 2)

    def test_pn_shapes(self, tmp_path):
        task = make_task(_pn(tmp_path))
        assert isinstance(task, PnTask)
        xp, x0 = task.batch(1, 3)
        assert xp.shape == (3, 1, 8, 3) and x0.shape == (3, 1, 8, 2)
        np.testing.assert_allclose(x0[..., 0] ** 2 + x0[..., 1] ** 2, 1.0)

    def test_batches_are_pure_functions_of_index(self, tmp_path):
        task = make_task(_ofdm(tmp_path))
        a, b = task.batch(5, 2), task.batch(5, 2)
        np.testing.assert_array_equal(a[0], b[0])
        assert not np.array_equal(a[0], task.batch(6, 2)[0])

    def test_gt2_target_is_transmitted_grid(self, tmp_path):
        task = make_task(_ofdm(tmp_path, ground_truth="gt2"))
        _, x0 = task.batch(1, 2)
        # QPSK targets sit on the unit circle.
        np.testing.assert_allclose(x0[..., 0] ** 2 + x0[..., 1] ** 2, 1.0)

    def test_model_matches_task(self, tmp_path):
        task = make_task(_ofdm(tmp_path))
        model = task.build_model()
        assert model.x_shape == task.x0_shape
        assert model.xp_shape == task.xp_shape


class ExactTargetModel:
    """Predicts the noise that leads back to each frame's training target."""

    def __init__(self, task, frames):
        self.schedule = task.schedule
        self.x_shape = task.x0_shape
        self.params = {}
        self.targets = {}
        for frame in frames:
            xp, x0 = task.tensors(frame)
            self.targets[xp.tobytes()] = x0

    def predict(self, x_t, x_c, t):
        x0 = np.stack([self.targets[c.tobytes()] for c in x_c])
        abar = self.schedule.abar(t).reshape(-1, 1, 1, 1)
        return (x_t - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)


def _low_snr_16qam(tmp_path, ground_truth="gt1"):
    return _ofdm(
        tmp_path,
        ground_truth=ground_truth,
        ofdm={"n_fft": 8, "n_sym": 4, "cp_len": 4, "n_rx": 1, "data_order": 16, "pilot_symbols": [1]},
        eval={"snr_db": [-4.0, 0.0], "frames": 6, "batch_size": 4},
    )


def _eval_frames(task):
    ev = task.config.eval
    return [simulate_frame(task.ofdm, task.profile, snr, frame_rng(task.seed, snr, i), task.pilots)
            for snr in ev.snr_db for i in range(ev.frames)]


class TestDiffusionReceiver:
    """Decisions of the sampled grids against the classical receivers."""

    def test_gt1_output_equal_to_pcsi_gives_pcsi_ber(self, tmp_path):
        task = make_task(_low_snr_16qam(tmp_path))
        table = task.evaluate(ExactTargetModel(task, _eval_frames(task)))
        for snr in (-4.0, 0.0):
            rows = table[table["snr_db"] == snr].set_index("receiver")
            assert rows.loc["diffusion", "ber"] == rows.loc["lmmse_pcsi", "ber"]
            assert rows.loc["diffusion", "grid_mse"] == pytest.approx(rows.loc["lmmse_pcsi", "grid_mse"], rel=1e-9)

    def test_gt1_decisions_are_unbiased(self, tmp_path):
        task = make_task(_low_snr_16qam(tmp_path))
        frames = _eval_frames(task)
        grids = [lmmse_equalize(f.received, f.channel.H, f.noise_var) for f in frames]
        outputs = task.detect(frames, grids)
        for frame, grid, output, reference in zip(frames, grids, outputs, lmmse_pcsi(frames)):
            np.testing.assert_array_equal(output.estimate, grid)
            np.testing.assert_allclose(output.decisions, reference.decisions, rtol=1e-12)
        # Slicing the shrunk grid directly pulls outer 16-QAM points inward.
        raw = sum(np.count_nonzero(data_bits_of(g, task.ofdm) != f.tx.bits) for f, g in zip(frames, grids))
        fixed = sum(np.count_nonzero(data_bits_of(o.decisions, task.ofdm) != f.tx.bits) for f, o in zip(frames, outputs))
        assert fixed < raw

    def test_gt2_grids_are_sliced_as_sampled(self, tmp_path):
        task = make_task(_low_snr_16qam(tmp_path, ground_truth="gt2"))
        frames = _eval_frames(task)[:2]
        grids = [f.tx.grid * 0.5 for f in frames]
        for grid, output in zip(grids, task.detect(frames, grids)):
            np.testing.assert_array_equal(output.decisions, grid)


# ============================================================================
# RUNS
# ============================================================================


class TestBaseline:
    """Classical receivers alone."""

    def test_ofdm_rows(self, tmp_path):
        outputs = run_baseline(_ofdm(tmp_path))
        table = pd.read_csv(outputs.files["metrics"])
        assert Path(outputs.files["metrics"]).name == "ber.csv"
        assert len(table) == 2 * 2
        assert set(table["receiver"]) == {"lmmse_pcsi", "lmmse_icsi"}

    def test_pn_rows(self, tmp_path):
        outputs = run_baseline(_pn(tmp_path))
        table = pd.read_csv(outputs.files["metrics"])
        assert Path(outputs.files["metrics"]).name == "pn_mse.csv"
        assert list(table["method"]) == ["psam", "psam"]

    def test_plots(self, tmp_path):
        outputs = run_baseline(_ofdm(tmp_path), plot=True)
        out = Path(outputs.output_dir)
        assert (out / "ber.svg").exists() and (out / "grid_mse.svg").exists()

    def test_repeatable(self, tmp_path):
        a = run_baseline(_ofdm(tmp_path, output_dir=str(tmp_path / "a")))
        b = run_baseline(_ofdm(tmp_path, output_dir=str(tmp_path / "b")))
        assert Path(a.files["metrics"]).read_bytes() == Path(b.files["metrics"]).read_bytes()


class TestTrainAndEval:
    """Training runs, checkpoints and evaluation of trained predictors."""

    def test_zero_steps_writes_initial_checkpoint(self, tmp_path):
        config = _ofdm(tmp_path, training={"steps": 0})
        outputs = run_train(config)
        ckpt = load_checkpoint(outputs.files["checkpoint"], expected_digest=config_digest(config))
        assert ckpt.step == 0
        assert ckpt.optimizer.step == 0
        assert pd.read_csv(outputs.files["loss"]).empty
        assert (Path(outputs.output_dir) / "config.toml").exists()

    def test_train_writes_loss_trace(self, tmp_path):
        outputs = run_train(_ofdm(tmp_path), plot=True)
        losses = pd.read_csv(outputs.files["loss"])
        assert list(losses.columns) == ["step", "loss"]
        assert list(losses["step"]) == [1, 2]
        assert np.all(np.isfinite(losses["loss"]))
        assert Path(outputs.files["loss_plot"]).exists()

    def test_saved_config_reloads(self, tmp_path):
        config = _ofdm(tmp_path)
        outputs = run_train(config)
        assert load_config(str(Path(outputs.output_dir) / "config.toml")) == config

    def test_train_then_eval(self, tmp_path):
        config = _ofdm(tmp_path)
        trained = run_train(config)
        outputs = run_eval(config, trained.files["checkpoint"])
        table = pd.read_csv(outputs.files["metrics"])
        assert len(table) == 2 * 3
        assert set(table["receiver"]) == {"diffusion", "lmmse_icsi", "lmmse_pcsi"}
        assert table["ber"].between(0.0, 1.0).all()

    def test_runs_are_byte_identical(self, tmp_path):
        files = []
        for name in ("a", "b"):
            config = _ofdm(tmp_path, output_dir=str(tmp_path / name))
            trained = run_train(config)
            evaluated = run_eval(config, trained.files["checkpoint"])
            files.append([Path(trained.files["checkpoint"]).read_bytes(),
                          Path(trained.files["loss"]).read_bytes(),
                          Path(evaluated.files["metrics"]).read_bytes()])
        assert files[0] == files[1]

    def test_eval_workers_do_not_change_results(self, tmp_path):
        config = _ofdm(tmp_path)
        checkpoint = run_train(config).files["checkpoint"]
        serial = run_eval(config, checkpoint)
        serial_bytes = Path(serial.files["metrics"]).read_bytes()
        threaded = _ofdm(tmp_path, output_dir=str(tmp_path / "threaded"),
                         eval={"snr_db": [0.0, 10.0], "frames": 3, "batch_size": 2, "trace_count": 2, "workers": 2})
        assert Path(run_eval(threaded, checkpoint).files["metrics"]).read_bytes() == serial_bytes

    def test_ofdm_trace(self, tmp_path):
        config = _ofdm(tmp_path)
        checkpoint = run_train(config).files["checkpoint"]
        outputs = run_eval(config, checkpoint, trace=True, plot=True)
        trace = pd.read_csv(outputs.files["trace"])
        assert len(trace) == 2 * 2 * 4
        assert list(trace.columns) == ["snr_db", "frame", "step", "tau", "mse"]
        assert list(trace[(trace["snr_db"] == 0.0) & (trace["frame"] == 0)]["tau"]) == [20, 15, 10, 5]
        arrays = Path(outputs.files["trace_arrays"])
        assert np.load(arrays / "diffusion_steps.npy").shape == (4, 8, 4)
        assert np.load(arrays / "lmmse_pcsi.npy").shape == (8, 4)
        assert (Path(outputs.output_dir) / "residual_maps.svg").exists()

    def test_pn_train_eval_and_trace(self, tmp_path):
        config = _pn(tmp_path)
        checkpoint = run_train(config).files["checkpoint"]
        outputs = run_eval(config, checkpoint, trace=True, plot=True)
        table = pd.read_csv(outputs.files["metrics"])
        assert list(table["method"]) == ["diffusion", "psam", "diffusion", "psam"]
        trace = pd.read_csv(outputs.files["trace"])
        assert len(trace) == 2 * 2 * 4
        assert (trace["psam_mse"] >= 0).all()
        assert np.load(Path(outputs.files["trace_arrays"]) / "x0_steps.npy").shape == (4, 8, 2)
        assert (Path(outputs.output_dir) / "pn_steps.svg").exists()

    def test_eval_refuses_other_network(self, tmp_path):
        checkpoint = run_train(_ofdm(tmp_path)).files["checkpoint"]
        wider = _ofdm(tmp_path, network={**TINY_NETWORK, "q_cl": 12})
        with pytest.raises(CheckpointError, match="digest"):
            run_eval(wider, checkpoint)

    def test_eval_accepts_new_eval_block(self, tmp_path):
        checkpoint = run_train(_ofdm(tmp_path)).files["checkpoint"]
        regrid = _ofdm(tmp_path, eval={"snr_db": [5.0], "frames": 2, "batch_size": 2})
        assert len(pd.read_csv(run_eval(regrid, checkpoint).files["metrics"])) == 3

    def test_load_model_for(self, tmp_path):
        config = _ofdm(tmp_path)
        checkpoint = run_train(config).files["checkpoint"]
        _, fresh = load_model_for(config)
        _, trained = load_model_for(config, checkpoint)
        assert fresh.parameter_count() == trained.parameter_count()
        assert not np.array_equal(fresh.params["unet.out.kernel"], trained.params["unet.out.kernel"])

    def test_divergence_leaves_partial_outputs(self, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingDiverged(3, float("nan"), partial=TrainResult([0.9, 0.8], 2))

        monkeypatch.setattr(experiment, "train", diverge)
        config = _ofdm(tmp_path)
        with pytest.raises(TrainingDiverged):
            run_train(config)
        out = Path(config.output_dir)
        assert (out / "FAILED").exists()
        assert list(pd.read_csv(out / "loss.csv")["loss"]) == [0.9, 0.8]
        assert load_checkpoint(str(out / "checkpoint.bin")).step == 2

    def test_successful_run_clears_failure_marker(self, tmp_path):
        config = _ofdm(tmp_path)
        out = Path(config.output_dir)
        out.mkdir(parents=True)
        (out / "FAILED").write_text("old\n")
        run_train(config)
        assert not (out / "FAILED").exists()


# ============================================================================
# COMMAND LINE
# ============================================================================


class TestCommandLine:
    """Exit codes and overrides of the phydiff command."""

    def test_baseline(self, tmp_path):
        path = tmp_path / "run.toml"
        save_config(_ofdm(tmp_path), str(path))
        out = tmp_path / "cli"
        assert phydiff.main(["baseline", "--config", str(path), "--out", str(out)]) == 0
        assert (out / "ber.csv").exists()

    def test_seed_override(self, tmp_path):
        path = tmp_path / "run.toml"
        save_config(_ofdm(tmp_path), str(path))
        phydiff.main(["baseline", "--config", str(path), "--out", str(tmp_path / "s1"), "--seed", "1"])
        phydiff.main(["baseline", "--config", str(path), "--out", str(tmp_path / "s2"), "--seed", "2"])
        assert (tmp_path / "s1" / "ber.csv").read_bytes() != (tmp_path / "s2" / "ber.csv").read_bytes()

    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[sampler]\nsteps = 0\n")
        assert phydiff.main(["baseline", "--config", str(path)]) == 1

    def test_missing_config_exit_code(self, tmp_path):
        assert phydiff.main(["train", "--config", str(tmp_path / "absent.toml")]) == 1

    def test_checkpoint_mismatch_exit_code(self, tmp_path):
        config = _ofdm(tmp_path)
        checkpoint = run_train(config).files["checkpoint"]
        path = tmp_path / "other.toml"
        save_config(_ofdm(tmp_path, network={**TINY_NETWORK, "q_cl": 12}), str(path))
        assert phydiff.main(["eval", "--config", str(path), "--checkpoint", checkpoint]) == 2

    def test_checkpoint_without_header_fields_exit_code(self, tmp_path, caplog):
        path = tmp_path / "run.toml"
        save_config(_ofdm(tmp_path), str(path))
        broken = _write_header_only(tmp_path / "broken.bin", {"step": 0})
        with caplog.at_level(logging.ERROR):
            assert phydiff.main(["eval", "--config", str(path), "--checkpoint", str(broken)]) == 2
        errors = [r for r in caplog.records if r.levelno >= logging.ERROR]
        assert any("missing 'config_digest'" in r.getMessage() for r in errors)
        assert all(r.exc_info is None for r in errors)

    def test_selftest(self):
        assert phydiff.main(["selftest"]) == 0


# ============================================================================
# DESK-SCALE RUNS
# ============================================================================


def _gt1_grid_mse(task, model, frames):
    """Mean |x̂0 − GT1|² per resource element over the sampled grids of `frames`."""
    pairs = [task.tensors(f) for f in frames]
    xp, x0 = np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
    rng = derive_rng(task.seed, ("gt1_grid_mse", frames[0].snr_db))
    sampled, _ = sample_batched(model, xp, task.schedule, task.tau_set, rng, task.config.eval.batch_size)
    return float(np.mean(np.sum((sampled - x0) ** 2, axis=-1)))


@pytest.mark.slow
class TestToyRuns:
    """The shipped desk-scale configurations, trained from scratch."""

    def test_ofdm_toy(self, tmp_path):
        config = with_overrides(load_config(str(CONFIGS / "ofdm_toy.toml")), output_dir=str(tmp_path / "ofdm"))
        assert config.ground_truth == "gt1"
        trained = run_train(config)
        losses = pd.read_csv(trained.files["loss"])["loss"].to_numpy()
        assert losses[-100:].mean() <= 0.4 * losses[:50].mean()
        table = pd.read_csv(run_eval(config, trained.files["checkpoint"]).files["metrics"])
        assert len(table) == 3 * 3

        task, untrained = load_model_for(config)
        _, learned = load_model_for(config, trained.files["checkpoint"])
        frames = [simulate_frame(task.ofdm, task.profile, 5.0, frame_rng(task.seed, 5.0, i), task.pilots)
                  for i in range(200)]
        assert _gt1_grid_mse(task, learned, frames) <= 0.5 * _gt1_grid_mse(task, untrained, frames)

    def test_pn_toy(self, tmp_path):
        config = with_overrides(load_config(str(CONFIGS / "pn_toy.toml")), output_dir=str(tmp_path / "pn"))
        assert config.eval.trace_count >= 100
        trained = run_train(config)
        losses = pd.read_csv(trained.files["loss"])["loss"].to_numpy()
        assert losses[-100:].mean() <= 0.4 * losses[:50].mean()
        outputs = run_eval(config, trained.files["checkpoint"], trace=True)
        assert len(pd.read_csv(outputs.files["metrics"])) == 4 * 3 * 2

        trace = pd.read_csv(outputs.files["trace"])
        assert trace["section"].nunique() >= 100
        by_step = trace.groupby("step")["mse"].mean()
        assert by_step.index[0] == 1
        assert by_step.iloc[-1] <= 0.5 * by_step.iloc[0]
