"""
Unit tests for the BPTT gradient oracle and its finite-difference check.
"""

import csv
from dataclasses import replace

import numpy as np
import pytest

from bptt_oracle import (FiniteDiffReport, bptt_gradients, emit_gradcheck_csv, finite_diff_check,
                         relative_error, sum_gradients, total_gradient, unrolled_loss)
from config import HARD_SIGMOID, SHIFTED_SIGMOID
from dynamics import PhaseConfig, run_free_phase
from energy_models import LayeredDenseParams, output
from errors import ConfigError


def fixed_length_phase(T):
    """Free phase that runs exactly T steps (the tolerance is never met)."""
    return PhaseConfig(T=T, K=T, tol=1e-300, activation=SHIFTED_SIGMOID)


class TestBpttGradients:
    """Test cases for bptt_gradients."""

    def test_k_larger_than_trajectory(self, small_dense, sample):
        x, y = sample
        trajectory = run_free_phase(small_dense, x, fixed_length_phase(3))
        with pytest.raises(ConfigError, match="exceeds"):
            bptt_gradients(small_dense, x, y, trajectory, 5, SHIFTED_SIGMOID)

    def test_negative_k(self, small_dense, sample):
        x, y = sample
        trajectory = run_free_phase(small_dense, x, fixed_length_phase(3))
        with pytest.raises(ConfigError):
            bptt_gradients(small_dense, x, y, trajectory, -1, SHIFTED_SIGMOID)

    def test_zero_loss_gives_zero_gradients(self, flagship_dense, rng, smooth_phase):
        x = rng.uniform(size=10)
        trajectory = run_free_phase(flagship_dense, x, smooth_phase)
        y = output(trajectory.final).copy()
        grads = bptt_gradients(flagship_dense, x, y, trajectory, 5, SHIFTED_SIGMOID)
        assert grads.loss == 0.0
        for step in grads.grad_theta:
            assert all(not value.any() for value in step.tensors.values())
        for step in grads.grad_s:
            assert all(not layer.any() for layer in step)

    def test_k_zero(self, small_dense, sample):
        x, y = sample
        trajectory = run_free_phase(small_dense, x, fixed_length_phase(4))
        grads = bptt_gradients(small_dense, x, y, trajectory, 0, SHIFTED_SIGMOID)
        assert grads.grad_theta == []
        assert len(grads.grad_s) == 1
        total = sum_gradients(small_dense, grads.grad_theta)
        assert all(not value.any() for value in total.tensors.values())

    def test_lengths(self, small_dense, sample):
        x, y = sample
        trajectory = run_free_phase(small_dense, x, fixed_length_phase(8))
        grads = bptt_gradients(small_dense, x, y, trajectory, 6, SHIFTED_SIGMOID)
        assert len(grads.grad_s) == 7
        assert len(grads.grad_u) == 6
        assert len(grads.grad_theta) == 6

    def test_single_synapse_by_hand(self):
        # s = sigma(0.5 * 1.0) = 0.5 where the shifted sigmoid has slope 1
        params = LayeredDenseParams(tensors={'W1': np.array([[0.5]]), 'b1': np.zeros(1)})
        x, y = np.array([1.0]), np.array([1.0])
        trajectory = run_free_phase(params, x, PhaseConfig(T=10, tol=1e-12, activation=SHIFTED_SIGMOID))
        assert trajectory.steps == 2
        grads = bptt_gradients(params, x, y, trajectory, 2, SHIFTED_SIGMOID)
        assert grads.loss == pytest.approx(0.125)
        assert grads.grad_s[0][0][0] == pytest.approx(-0.5)
        assert grads.grad_u[0][0][0] == pytest.approx(-0.5)
        assert grads.grad_theta[0].tensors['W1'][0, 0] == pytest.approx(-0.5)
        assert grads.grad_theta[0].tensors['b1'][0] == pytest.approx(-0.5)
        assert not grads.grad_theta[1].tensors['W1'].any()
        assert not grads.grad_s[1][0].any()

    def test_first_layer_untouched_early(self, deep_dense, sample):
        x, _ = sample
        y = np.array([1.0, 0.0])
        trajectory = run_free_phase(deep_dense, x, fixed_length_phase(10))
        grads = bptt_gradients(deep_dense, x, y, trajectory, 4, SHIFTED_SIGMOID)
        assert not grads.grad_s[0][0].any() and not grads.grad_s[0][1].any()
        for t in (0, 1):
            assert not grads.grad_theta[t].tensors['W1'].any()
            assert not grads.grad_theta[t].tensors['b1'].any()
        assert grads.grad_theta[2].tensors['W1'].any()
        assert not grads.grad_theta[0].tensors['W2'].any()

    def test_warning_when_not_converged(self, small_dense, sample):
        x, y = sample
        trajectory = run_free_phase(small_dense, x, fixed_length_phase(2))
        grads = bptt_gradients(small_dense, x, y, trajectory, 2, SHIFTED_SIGMOID)
        assert not grads.converged
        assert "did not converge" in grads.warning

    def test_no_warning_when_converged(self, small_dense, sample, smooth_phase):
        x, y = sample
        trajectory = run_free_phase(small_dense, x, replace(smooth_phase, T=500))
        grads = bptt_gradients(small_dense, x, y, trajectory, 5, SHIFTED_SIGMOID)
        assert grads.warning is None


class TestTotalGradient:
    """Test cases for total_gradient and unrolled_loss."""

    def test_matches_finite_differences_of_unrolled_loss(self, small_dense, sample):
        x, y = sample
        cfg = fixed_length_phase(20)
        total = total_gradient(small_dense, x, y, cfg)
        h = 1e-6
        for name, value in small_dense.tensors.items():
            for coord in range(min(value.size, 6)):
                def shifted(step):
                    perturbed = value.copy()
                    perturbed.ravel()[coord] += step
                    params = replace(small_dense, tensors={**small_dense.tensors, name: perturbed})
                    return unrolled_loss(params, x, y, 20, SHIFTED_SIGMOID)
                numeric = (shifted(h) - shifted(-h)) / (2 * h)
                assert total.tensors[name].ravel()[coord] == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    def test_batch_is_sum_of_samples(self, small_dense, rng):
        x = rng.uniform(size=(3, 4))
        y = np.eye(2)[[1, 0, 1]]
        cfg = fixed_length_phase(15)
        batched = total_gradient(small_dense, x, y, cfg)
        singles = [total_gradient(small_dense, x[b], y[b], cfg) for b in range(3)]
        for name in small_dense.tensors:
            np.testing.assert_allclose(batched.tensors[name], sum(g.tensors[name] for g in singles),
                                       rtol=0, atol=1e-12)

    def test_unrolled_loss_zero_steps(self, small_dense, sample):
        x, y = sample
        assert unrolled_loss(small_dense, x, y, 0, SHIFTED_SIGMOID) == pytest.approx(0.5)


class TestRelativeError:

    @pytest.mark.parametrize("a,n,expected", [
        (0.0, 0.0, 0.0),
        (1.0, 1.0, 0.0),
        (2.0, 1.0, 0.5),
        (1e-6, 0.0, 1e-2),
    ])
    def test_values(self, a, n, expected):
        assert relative_error(a, n) == pytest.approx(expected)


class TestFiniteDiffCheck:
    """Test cases for finite_diff_check and emit_gradcheck_csv."""

    def test_small_model(self, small_dense, sample, smooth_phase):
        x, y = sample
        report = finite_diff_check(small_dense, x, y, smooth_phase, K=10, h=1e-5)
        assert report.rows
        assert not report.skipped
        assert report.max_rel_err < 1e-5
        tensors = {row['tensor'] for row in report.rows}
        assert {'W1', 'W2', 'b1', 'b2', 's1', 's2'} <= tensors

    def test_flagship_model(self, flagship_dense, rng, smooth_phase):
        x = rng.uniform(size=10)
        y = np.eye(5)[2]
        report = finite_diff_check(flagship_dense, x, y, smooth_phase, K=10, h=1e-5, coords=5)
        assert report.max_rel_err < 1e-5

    def test_zero_params_hard_sigmoid_skips_kinks(self, small_dense, sample, hard_phase):
        x, y = sample
        report = finite_diff_check(small_dense.zeros_like(), x, y, hard_phase, K=3, h=1e-5)
        assert report.converged
        assert report.skipped
        assert any(entry['tensor'] == 'b1' for entry in report.skipped)
        assert report.max_rel_err < 1e-8

    def test_deterministic_sampling(self, flagship_dense, rng, smooth_phase):
        x = rng.uniform(size=10)
        y = np.eye(5)[0]
        a = finite_diff_check(flagship_dense, x, y, smooth_phase, K=2, h=1e-5, coords=3, seed=4)
        b = finite_diff_check(flagship_dense, x, y, smooth_phase, K=2, h=1e-5, coords=3, seed=4)
        assert [(r['tensor'], r['t'], r['coordinate']) for r in a.rows] == \
            [(r['tensor'], r['t'], r['coordinate']) for r in b.rows]

    @pytest.mark.parametrize("h", [1e-3, 1e-9])
    def test_step_outside_range(self, small_dense, sample, smooth_phase, h):
        x, y = sample
        with pytest.raises(ConfigError, match="outside"):
            finite_diff_check(small_dense, x, y, smooth_phase, K=2, h=h)

    def test_empty_report(self):
        report = FiniteDiffReport()
        assert report.max_rel_err == 0.0
        assert report.mean_rel_err == 0.0

    def test_csv(self, small_dense, sample, smooth_phase, tmp_path):
        x, y = sample
        report = finite_diff_check(small_dense, x, y, smooth_phase, K=2, h=1e-5, coords=2)
        path = tmp_path / "reports" / "gradcheck.csv"
        emit_gradcheck_csv(report, str(path))
        with open(path, newline='') as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(report.rows)
        assert list(rows[0]) == ['tensor', 't', 'coordinate', 'analytic', 'numeric', 'rel_err']
        assert float(rows[0]['rel_err']) == pytest.approx(report.rows[0]['rel_err'])
