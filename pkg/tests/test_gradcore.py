"""Tests for the layer ops, reverse-mode gradients and the optimizer."""

import numpy as np
import pytest

from modules.errors import ContractError, ShapeError
from modules.gradcore import (
    Graph,
    OptimizerState,
    adam_step,
    backward,
    channel_offsets,
    concat_channels,
    conv2d,
    dense,
    glorot_uniform,
    gradcheck,
    layer_norm,
    relu,
)
from modules.rng import derive_rng

TOLERANCE = 1e-4
SEEDS = range(100)


def _rng(seed, tag):
    return derive_rng(seed, ("test_gradcore", tag))


def _assert_gradients(build, params):
    report = gradcheck(build, params)
    assert report.checked > 0
    assert report.max_error <= TOLERANCE, report.errors


# ============================================================================
# FORWARD OPS
# ============================================================================


class TestForwardOps:
    """Plain forward kernels on single examples and batches."""

    def test_identity_kernel_preserves_input(self):
        x = _rng(0, "id").normal((5, 6, 3))
        kernels = np.zeros((3, 3, 3, 3))
        kernels[1, 1] = np.eye(3)
        np.testing.assert_allclose(conv2d(x, kernels, np.zeros(3)), x, rtol=0, atol=1e-15)

    def test_same_padding_keeps_extents(self):
        x = _rng(0, "same").normal((2, 7, 5, 4))
        out = conv2d(x, np.ones((3, 5, 4, 6)), np.zeros(6))
        assert out.shape == (2, 7, 5, 6)

    def test_stride_two_halves_extents_rounding_up(self):
        out = conv2d(np.ones((5, 8, 1)), np.ones((3, 3, 1, 2)), np.zeros(2), stride=2)
        assert out.shape == (3, 4, 2)

    def test_conv_against_direct_sum(self):
        rng = _rng(1, "direct")
        x, k, b = rng.normal((4, 4, 2)), rng.normal((3, 3, 2, 1)), rng.normal(1)
        padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        expected = np.empty((4, 4, 1))
        for i in range(4):
            for j in range(4):
                expected[i, j, 0] = np.sum(padded[i:i + 3, j:j + 3, :] * k[:, :, :, 0]) + b[0]
        np.testing.assert_allclose(conv2d(x, k, b), expected, rtol=1e-12)

    def test_conv_rejects_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(np.ones((4, 4, 2)), np.ones((3, 3, 3, 1)), np.zeros(1))

    def test_conv_rejects_even_kernel(self):
        with pytest.raises(ShapeError, match="odd"):
            conv2d(np.ones((4, 4, 1)), np.ones((2, 2, 1, 1)), np.zeros(1))

    def test_dense(self):
        out = dense(np.array([1.0, 2.0]), np.array([[1.0, 0.0], [1.0, 1.0], [0.0, -1.0]]), np.array([0.5, 0.0, 1.0]))
        np.testing.assert_allclose(out, [1.5, 3.0, -1.0])

    def test_dense_shape_error(self):
        with pytest.raises(ShapeError):
            dense(np.ones(3), np.ones((2, 2)), np.zeros(2))

    def test_layer_norm_normalises_channels(self):
        x = _rng(2, "ln").normal((3, 4, 16)) * 5.0 + 2.0
        out = layer_norm(x, np.ones(16), np.zeros(16))
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-3)

    def test_relu(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_concat_and_offsets(self):
        a, b = np.ones((2, 2, 3)), np.zeros((2, 2, 1))
        assert concat_channels([a, b]).shape == (2, 2, 4)
        assert channel_offsets([a, b]) == [(0, 3), (3, 4)]

    def test_concat_rejects_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels([np.ones((2, 2, 1)), np.ones((2, 3, 1))])

    def test_glorot_bounds(self):
        w = glorot_uniform((3, 3, 4, 8), 36, 72, _rng(3, "glorot").uniform)
        assert np.max(np.abs(w)) <= np.sqrt(6.0 / 108.0)


# ============================================================================
# GRADIENTS
# ============================================================================


class TestBackward:
    """Analytic gradients against central finite differences."""

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d(self, seed, stride):
        rng = _rng(seed, f"conv{stride}")
        params = {"x": rng.normal((2, 5, 6, 3)), "k": rng.normal((3, 3, 3, 4)), "b": rng.normal(4)}
        target = rng.normal((2, 5 if stride == 1 else 3, 6 if stride == 1 else 3, 4))

        def build(p):
            g = Graph()
            out = g.conv2d(g.param("x", p["x"]), g.param("k", p["k"]), g.param("b", p["b"]), stride=stride)
            return g, g.mse(out, g.constant(target))

        _assert_gradients(build, params)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_dense(self, seed):
        rng = _rng(seed, "dense")
        params = {"x": rng.normal((3, 5)), "w": rng.normal((4, 5)), "b": rng.normal(4)}
        target = rng.normal((3, 4))

        def build(p):
            g = Graph()
            out = g.dense(g.param("x", p["x"]), g.param("w", p["w"]), g.param("b", p["b"]))
            return g, g.mse(out, g.constant(target))

        _assert_gradients(build, params)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_layer_norm(self, seed):
        rng = _rng(seed, "ln")
        params = {"x": rng.normal((2, 3, 3, 6)), "gain": 1.0 + rng.normal(6), "shift": rng.normal(6)}
        target = rng.normal((2, 3, 3, 6))

        def build(p):
            g = Graph()
            out = g.layer_norm(g.param("x", p["x"]), g.param("gain", p["gain"]), g.param("shift", p["shift"]))
            return g, g.mse(out, g.constant(target))

        _assert_gradients(build, params)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu_concat_slice(self, seed):
        rng = _rng(seed, "relu")
        params = {"a": rng.normal((2, 3, 3, 2)), "b": rng.normal((2, 3, 3, 3))}
        target = rng.normal((2, 3, 3, 3))

        def build(p):
            g = Graph()
            joined = g.concat_channels([g.relu(g.param("a", p["a"])), g.param("b", p["b"])])
            return g, g.mse(g.slice_channels(joined, 1, 4), g.constant(target))

        _assert_gradients(build, params)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_upsample_pad_crop(self, seed):
        rng = _rng(seed, "resample")
        params = {"x": rng.normal((1, 3, 2, 2))}
        target = rng.normal((1, 5, 3, 2))

        def build(p):
            g = Graph()
            up = g.upsample2x(g.pad_spatial(g.param("x", p["x"]), 1, 0))
            return g, g.mse(g.crop_spatial(up, 5, 3), g.constant(target))

        _assert_gradients(build, params)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_broadcast_square_sum(self, seed):
        rng = _rng(seed, "broadcast")
        params = {"v": rng.normal((2, 3))}

        def build(p):
            g = Graph()
            grid = g.broadcast_spatial(g.param("v", p["v"]), 2, 4)
            return g, g.sum(g.square(grid))

        _assert_gradients(build, params)

    def test_parameter_used_twice_accumulates(self):
        g = Graph()
        x = g.param("x", np.array([[1.0, 2.0]]))
        loss = g.sum(g.concat_channels([x, x]))
        np.testing.assert_array_equal(backward(g, loss)["x"], [[2.0, 2.0]])

    def test_unused_parameter_gets_zero_gradient(self):
        g = Graph()
        x = g.param("x", np.ones((1, 2)))
        g.param("unused", np.ones(3))
        grads = backward(g, g.sum(g.square(x)))
        np.testing.assert_array_equal(grads["unused"], np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.param("x", np.ones((1, 2)))
        with pytest.raises(ContractError, match="scalar"):
            backward(g, g.square(x))

    def test_mse_shape_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.mse(g.constant(np.ones(3)), g.constant(np.ones(4)))


# ============================================================================
# OPTIMIZER
# ============================================================================


class TestAdam:
    """Adaptive-moment updates."""

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0, -2.0, 0.5])}
        grads = {"w": np.array([0.3, -4.0, 1e-3])}
        state = OptimizerState.zeros_like(params, learning_rate=0.01)
        adam_step(state, params, grads)
        # With bias correction the first update is lr·g/(|g| + eps).
        np.testing.assert_allclose(params["w"], [0.99, -1.99, 0.49], rtol=0, atol=1e-6)
        assert state.step == 1

    def test_zero_gradient_leaves_parameters(self):
        params = {"w": np.array([1.0, 2.0])}
        state = OptimizerState.zeros_like(params)
        adam_step(state, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])

    def test_shape_mismatch(self):
        params = {"w": np.ones(3)}
        state = OptimizerState.zeros_like(params)
        with pytest.raises(ShapeError):
            adam_step(state, params, {"w": np.ones(4)})

    def test_minimises_quadratic(self):
        params = {"w": np.array([3.0, -2.0])}
        state = OptimizerState.zeros_like(params, learning_rate=0.1)
        for _ in range(500):
            adam_step(state, params, {"w": 2.0 * params["w"]})
        assert np.all(np.abs(params["w"]) < 0.1)
