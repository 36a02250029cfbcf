"""
Unit tests for activations, convolution and pooling kernels.
Convolution and pooling are checked against naive loop oracles.
"""

import numpy as np
import pytest

from config import HARD_SIGMOID, SHIFTED_SIGMOID
from errors import ShapeError
from tensor_ops import (activate, activate_prime, avg_pool, avg_unpool, conv2d,
                        conv2d_kernel_grad, conv2d_transpose, inner)


def naive_conv2d(x, kernels):
    channels, height, width = x.shape
    features, _, k, _ = kernels.shape
    out = np.zeros((features, height - k + 1, width - k + 1))
    for f in range(features):
        for i in range(height - k + 1):
            for j in range(width - k + 1):
                out[f, i, j] = np.sum(x[:, i:i + k, j:j + k] * kernels[f])
    return out


def naive_avg_pool(x, window):
    channels, height, width = x.shape
    out = np.zeros((channels, height // window, width // window))
    for c in range(channels):
        for i in range(height // window):
            for j in range(width // window):
                out[c, i, j] = x[c, i * window:(i + 1) * window, j * window:(j + 1) * window].mean()
    return out


class TestActivations:
    """Test cases for activate and activate_prime."""

    @pytest.mark.parametrize("u,expected", [(-0.5, 0.0), (0.3, 0.3), (1.7, 1.0)])
    def test_hard_sigmoid_values(self, u, expected):
        assert activate(np.array([u]), HARD_SIGMOID)[0] == expected

    @pytest.mark.parametrize("u,expected", [(0.5, 1.0), (-2.0, 0.0), (0.0, 0.0), (1.0, 0.0)])
    def test_hard_sigmoid_derivative(self, u, expected):
        assert activate_prime(np.array([u]), HARD_SIGMOID)[0] == expected

    def test_hard_sigmoid_range(self, rng):
        u = rng.normal(0.0, 3.0, size=1000)
        out = activate(u, HARD_SIGMOID)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert set(np.unique(activate_prime(u, HARD_SIGMOID))) <= {0.0, 1.0}

    def test_shifted_sigmoid_derivative_at_half(self):
        h = 1e-6
        numeric = (activate(np.array([0.5 + h]), SHIFTED_SIGMOID)
                   - activate(np.array([0.5 - h]), SHIFTED_SIGMOID)) / (2 * h)
        assert activate_prime(np.array([0.5]), SHIFTED_SIGMOID)[0] == pytest.approx(1.0)
        assert numeric[0] == pytest.approx(1.0, rel=1e-8)

    def test_shifted_sigmoid_derivative_matches_finite_differences(self, rng):
        u = rng.normal(0.0, 2.0, size=50)
        h = 1e-6
        numeric = (activate(u + h, SHIFTED_SIGMOID) - activate(u - h, SHIFTED_SIGMOID)) / (2 * h)
        np.testing.assert_allclose(activate_prime(u, SHIFTED_SIGMOID), numeric, rtol=1e-6, atol=1e-10)

    def test_shape_preserved(self):
        u = np.zeros((2, 3, 4))
        assert activate(u, SHIFTED_SIGMOID).shape == (2, 3, 4)

    def test_unknown_activation(self):
        with pytest.raises(ValueError, match="Unknown activation"):
            activate(np.zeros(2), 'relu')


class TestConv2d:
    """Test cases for conv2d and its adjoints."""

    def test_window_sum(self):
        out = conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(out, np.full((1, 2, 2), 4.0))

    def test_zero_kernel(self, rng):
        out = conv2d(rng.normal(size=(2, 5, 5)), np.zeros((3, 2, 3, 3)))
        assert out.shape == (3, 3, 3)
        assert not out.any()

    def test_matches_naive_loops(self, rng):
        x = rng.normal(size=(2, 5, 5))
        kernels = rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(conv2d(x, kernels), naive_conv2d(x, kernels), rtol=0, atol=1e-12)

    def test_batched_matches_per_sample(self, rng):
        x = rng.normal(size=(4, 2, 6, 6))
        kernels = rng.normal(size=(3, 2, 3, 3))
        batched = conv2d(x, kernels)
        for b in range(4):
            np.testing.assert_allclose(batched[b], naive_conv2d(x[b], kernels), atol=1e-12)

    def test_linear_in_both_arguments(self, rng):
        a, b = rng.normal(size=(2, 2, 6, 6))
        k1, k2 = rng.normal(size=(2, 3, 2, 3, 3))
        alpha = 1.7
        np.testing.assert_allclose(conv2d(alpha * a + b, k1),
                                   alpha * conv2d(a, k1) + conv2d(b, k1), atol=1e-12)
        np.testing.assert_allclose(conv2d(a, alpha * k1 + k2),
                                   alpha * conv2d(a, k1) + conv2d(a, k2), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel axis mismatch"):
            conv2d(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="larger than input"):
            conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))

    def test_transpose_is_adjoint(self, rng):
        x = rng.normal(size=(2, 7, 6))
        kernels = rng.normal(size=(3, 2, 3, 3))
        y = rng.normal(size=(3, 5, 4))
        assert inner(conv2d(x, kernels), y) == pytest.approx(inner(x, conv2d_transpose(y, kernels)), rel=1e-12)

    def test_kernel_grad_is_adjoint(self, rng):
        x = rng.normal(size=(3, 2, 6, 6))
        kernels = rng.normal(size=(4, 2, 3, 3))
        y = rng.normal(size=(3, 4, 4, 4))
        lhs = inner(conv2d(x, kernels), y)
        rhs = inner(kernels, conv2d_kernel_grad(y, x))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestPooling:
    """Test cases for avg_pool and avg_unpool."""

    def test_mean_of_window(self):
        out = avg_pool(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2)
        np.testing.assert_array_equal(out, [[[2.5]]])

    def test_constant_input(self):
        np.testing.assert_array_equal(avg_pool(np.full((2, 4, 4), 3.0), 2), np.full((2, 2, 2), 3.0))

    def test_matches_naive_loops(self, rng):
        x = rng.normal(size=(1, 4, 4))
        np.testing.assert_allclose(avg_pool(x, 2), naive_avg_pool(x, 2), atol=1e-15)

    def test_indivisible(self):
        with pytest.raises(ShapeError, match="not divisible"):
            avg_pool(np.zeros((1, 5, 4)), 2)

    def test_unpool_spreads_value(self):
        np.testing.assert_array_equal(avg_unpool(np.array([[[4.0]]]), 2), np.ones((1, 2, 2)))

    def test_unpool_zero(self):
        assert not avg_unpool(np.zeros((2, 3, 3)), 2).any()

    def test_adjoint_identity(self, rng):
        a = rng.normal(size=(3, 6, 8))
        b = rng.normal(size=(3, 3, 4))
        assert abs(inner(avg_pool(a, 2), b) - inner(a, avg_unpool(b, 2))) < 1e-12


class TestInner:

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            inner(np.zeros(3), np.zeros(4))
