"""
Unit tests for the free, nudged, relaxation and continual phases, the EP
update rules and the trajectory dump.
"""

import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from config import HARD_SIGMOID, SHIFTED_SIGMOID
from dynamics import (PhaseConfig, Trajectory, dump_trajectory_csv, ep_update, hold_steady_state,
                      run_continual_phase, run_free_phase, run_nudged_phase, run_relaxation_phase,
                      vector_field_update)
from energy_models import (LayeredDenseParams, VectorFieldParams, d_phi_d_theta, free_step,
                           init_conv, nudged_step)
from errors import ConfigError


class TestFreePhase:
    """Test cases for run_free_phase and run_relaxation_phase."""

    def test_zero_params_converge_in_one_step(self, small_dense, sample, hard_phase):
        x, _ = sample
        trajectory = run_free_phase(small_dense.zeros_like(), x, hard_phase)
        assert trajectory.steps == 1
        assert trajectory.converged
        assert trajectory.residual == 0.0

    def test_infinite_tolerance_stops_after_one_step(self, small_dense, sample):
        x, _ = sample
        trajectory = run_free_phase(small_dense, x, PhaseConfig(T=10, tol=math.inf))
        assert len(trajectory.states) == 2

    def test_initial_state_is_zero(self, small_dense, sample, hard_phase):
        x, _ = sample
        first = run_free_phase(small_dense, x, hard_phase).states[0]
        assert all(not layer.any() for layer in first)

    def test_small_model_converges(self, small_dense, sample):
        x, _ = sample
        trajectory = run_free_phase(small_dense, x, PhaseConfig(T=100, tol=1e-8, activation=HARD_SIGMOID))
        assert trajectory.converged
        assert trajectory.residual <= 1e-8

    def test_cap_reports_non_convergence(self, small_dense, sample):
        x, _ = sample
        trajectory = run_free_phase(small_dense, x, PhaseConfig(T=1, tol=1e-12, activation=SHIFTED_SIGMOID))
        assert trajectory.steps == 1
        assert not trajectory.converged

    def test_steady_state_independent_of_start(self, deep_dense, sample, rng):
        x, _ = sample
        cfg = PhaseConfig(T=500, tol=1e-10, activation=SHIFTED_SIGMOID)
        a = run_free_phase(deep_dense, x, cfg)
        start = [rng.uniform(0.0, 1.0, size=layer.shape) for layer in a.final]
        b = run_free_phase(deep_dense, x, cfg, s_init=start)
        assert a.converged and b.converged
        for la, lb in zip(a.final, b.final):
            assert np.max(np.abs(la - lb)) <= 10 * cfg.tol

    def test_batched_tracks_each_sample(self, small_dense, rng, hard_phase):
        x = rng.uniform(size=(5, 4))
        trajectory = run_free_phase(small_dense, x, hard_phase)
        assert trajectory.sample_residuals.shape == (5,)
        assert trajectory.final[-1].shape == (5, 2)

    def test_conv_model_runs(self, rng):
        params = init_conv([1, 10, 10], [2], 3, 2, [3], rng)
        trajectory = run_free_phase(params, rng.uniform(size=(2, 1, 10, 10)),
                                    PhaseConfig(T=30, tol=1e-6, activation=HARD_SIGMOID))
        assert [layer.shape for layer in trajectory.final] == [(2, 2, 4, 4), (2, 3)]
        assert all(layer.min() >= 0.0 and layer.max() <= 1.0 for layer in trajectory.final)

    def test_invalid_config(self, small_dense, sample):
        x, _ = sample
        with pytest.raises(ConfigError, match="T must be >= 1"):
            run_free_phase(small_dense, x, PhaseConfig(T=0))
        with pytest.raises(ConfigError, match="tol must be > 0"):
            run_free_phase(small_dense, x, PhaseConfig(tol=0.0))

    def test_relaxation_epsilon_one_is_discrete(self, small_dense, sample, hard_phase):
        x, _ = sample
        discrete = run_free_phase(small_dense, x, hard_phase)
        relaxed = run_relaxation_phase(small_dense, x, hard_phase, 1.0)
        assert relaxed.steps == discrete.steps
        for a, b in zip(relaxed.final, discrete.final):
            np.testing.assert_array_equal(a, b)

    def test_relaxation_small_epsilon_is_slower(self, flagship_dense, rng):
        x = rng.uniform(size=10)
        cfg = PhaseConfig(T=5000, tol=1e-8, activation=SHIFTED_SIGMOID)
        discrete = run_free_phase(flagship_dense, x, cfg)
        relaxed = run_relaxation_phase(flagship_dense, x, cfg, 0.1)
        assert discrete.converged and relaxed.converged
        assert relaxed.steps > discrete.steps
        for a, b in zip(relaxed.final, discrete.final):
            np.testing.assert_allclose(a, b, atol=1e-6)

    def test_free_step_fixed_point(self, small_dense, sample):
        x, _ = sample
        cfg = PhaseConfig(T=500, tol=1e-14, activation=SHIFTED_SIGMOID)
        s = run_free_phase(small_dense, x, cfg).final
        again = free_step(x, s, small_dense, SHIFTED_SIGMOID)
        for a, b in zip(again, s):
            np.testing.assert_allclose(a, b, atol=1e-13)

    def test_hold_steady_state(self, small_dense, sample, hard_phase):
        x, _ = sample
        trajectory = run_free_phase(small_dense.zeros_like(), x, hard_phase)
        held = hold_steady_state(small_dense.zeros_like(), x, trajectory, 5, HARD_SIGMOID)
        assert held.steps == 5
        assert held.converged
        assert hold_steady_state(small_dense, x, held, 3, HARD_SIGMOID) is held


class TestNudgedPhase:
    """Test cases for run_nudged_phase."""

    def test_beta_zero_at_fixed_point_is_constant(self, small_dense, sample, hard_phase):
        x, y = sample
        zero = small_dense.zeros_like()
        s_star = run_free_phase(zero, x, hard_phase).final
        trajectory = run_nudged_phase(zero, x, y, s_star, replace(hard_phase, beta=0.0, K=4))
        for state in trajectory.states:
            for a, b in zip(state, s_star):
                np.testing.assert_array_equal(a, b)

    def test_target_equals_output_is_steady(self, small_dense, sample):
        x, _ = sample
        cfg = PhaseConfig(T=500, K=6, beta=0.5, tol=1e-13, activation=SHIFTED_SIGMOID)
        s_star = run_free_phase(small_dense, x, cfg).final
        trajectory = run_nudged_phase(small_dense, x, s_star[-1].copy(), s_star, cfg)
        for state in trajectory.states:
            for a, b in zip(state, s_star):
                np.testing.assert_allclose(a, b, atol=1e-12)

    def test_matches_naive_resimulation(self, small_dense, sample):
        x, y = sample
        cfg = PhaseConfig(T=200, K=20, beta=0.1, tol=1e-10, activation=SHIFTED_SIGMOID)
        s = run_free_phase(small_dense, x, cfg).final
        trajectory = run_nudged_phase(small_dense, x, y, s, cfg)
        assert len(trajectory.states) == 21
        for t in range(cfg.K):
            s = nudged_step(x, s, small_dense, y, 0.1, SHIFTED_SIGMOID)
            for a, b in zip(trajectory.states[t + 1], s):
                np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestEpUpdate:
    """Test cases for ep_update and vector_field_update."""

    def test_single_synapse(self):
        params = LayeredDenseParams(tensors={'W1': np.array([[0.3]]), 'b1': np.zeros(1)})
        update = ep_update(params, [np.array([1.0])], [np.array([1.1])], np.array([0.5]), 0.1)
        assert update.tensors['W1'][0, 0] == pytest.approx(0.5)
        assert update.tensors['b1'][0] == pytest.approx(1.0)

    def test_same_states_zero_update(self, small_dense, sample, hard_phase):
        x, _ = sample
        s = run_free_phase(small_dense, x, hard_phase).final
        update = ep_update(small_dense, s, s, x, 0.5)
        assert all(not value.any() for value in update.tensors.values())

    def test_beta_zero(self, small_dense, sample, hard_phase):
        x, _ = sample
        s = run_free_phase(small_dense, x, hard_phase).final
        with pytest.raises(ConfigError, match="beta"):
            ep_update(small_dense, s, s, x, 0.0)

    def test_conv_update_matches_phi_difference(self, tiny_conv, rng):
        x = rng.uniform(size=(1, 10, 10))
        cfg = PhaseConfig(T=40, K=5, beta=0.2, tol=1e-8, activation=HARD_SIGMOID)
        s_star = run_free_phase(tiny_conv, x, cfg).final
        s_beta = run_nudged_phase(tiny_conv, x, np.array([1.0, 0.0]), s_star, cfg).final
        update = ep_update(tiny_conv, s_star, s_beta, x, cfg.beta)
        nudged = d_phi_d_theta(x, s_beta, tiny_conv)
        free = d_phi_d_theta(x, s_star, tiny_conv)
        for name in tiny_conv.tensors:
            np.testing.assert_allclose(update.tensors[name],
                                       (nudged.tensors[name] - free.tensors[name]) / cfg.beta, atol=1e-12)

    def test_batch_mean(self, small_dense, rng, hard_phase):
        x = rng.uniform(size=(3, 4))
        y = np.eye(2)[[0, 1, 0]]
        s_star = run_free_phase(small_dense, x, hard_phase).final
        s_beta = run_nudged_phase(small_dense, x, y, s_star, hard_phase).final
        batched = ep_update(small_dense, s_star, s_beta, x, 0.5)
        singles = [ep_update(small_dense, [l[b] for l in s_star], [l[b] for l in s_beta], x[b], 0.5)
                   for b in range(3)]
        for name in small_dense.tensors:
            mean = sum(u.tensors[name] for u in singles) / 3
            np.testing.assert_allclose(batched.tensors[name], mean, atol=1e-12)

    def test_vector_field_update_leaves_backward(self, small_dense, sample, hard_phase):
        x, y = sample
        tensors = dict(small_dense.tensors, B2=small_dense.tensors['W2'].T.copy())
        vf = VectorFieldParams(tensors=tensors)
        s_t = run_free_phase(vf, x, hard_phase).final
        s_next = nudged_step(x, s_t, vf, y, 0.5, HARD_SIGMOID)
        update = vector_field_update(vf, x, s_t, s_next, 0.5)
        assert 'B2' not in update.tensors
        np.testing.assert_allclose(update.tensors['W2'], np.outer(s_next[1] - s_t[1], s_t[0]) / 0.5)
        np.testing.assert_allclose(update.tensors['W1'], np.outer(s_next[0] - s_t[0], x) / 0.5)
        np.testing.assert_allclose(update.tensors['b2'], (s_next[1] - s_t[1]) / 0.5)


class TestContinualPhase:
    """Test cases for run_continual_phase."""

    def test_eta_zero_matches_nudged(self, small_dense, sample, hard_phase):
        x, y = sample
        s_star = run_free_phase(small_dense, x, hard_phase).final
        nudged = run_nudged_phase(small_dense, x, y, s_star, hard_phase)
        continual = run_continual_phase(small_dense, x, y, s_star, hard_phase)
        for a_state, b_state in zip(nudged.states, continual.states):
            for a, b in zip(a_state, b_state):
                np.testing.assert_array_equal(a, b)
        for theta in continual.params_over_time:
            for name in small_dense.tensors:
                np.testing.assert_array_equal(theta.tensors[name], small_dense.tensors[name])

    def test_fixed_point_with_matching_target_is_constant(self, small_dense, sample, hard_phase):
        x, _ = sample
        zero = small_dense.zeros_like()
        s_star = run_free_phase(zero, x, hard_phase).final
        trajectory = run_continual_phase(zero, x, s_star[-1].copy(), s_star, replace(hard_phase, eta=0.1))
        for theta in trajectory.params_over_time:
            assert all(not value.any() for value in theta.tensors.values())
        for state in trajectory.states:
            assert all(not layer.any() for layer in state)

    def test_telescoping(self, small_dense, sample):
        x, y = sample
        cfg = PhaseConfig(T=100, K=8, beta=0.1, eta=0.01, tol=1e-8, activation=SHIFTED_SIGMOID)
        s_star = run_free_phase(small_dense, x, cfg).final
        trajectory = run_continual_phase(small_dense, x, y, s_star, cfg)
        first = d_phi_d_theta(x, trajectory.states[0], small_dense)
        last = d_phi_d_theta(x, trajectory.states[-1], small_dense)
        final = trajectory.params_over_time[-1]
        for name in small_dense.tensors:
            expected = small_dense.tensors[name] + (cfg.eta / cfg.beta) * (last.tensors[name] - first.tensors[name])
            np.testing.assert_allclose(final.tensors[name], expected, rtol=0, atol=1e-12)

    def test_parameters_evolve(self, small_dense, sample, smooth_phase):
        x, y = sample
        s_star = run_free_phase(small_dense, x, smooth_phase).final
        trajectory = run_continual_phase(small_dense, x, y, s_star, replace(smooth_phase, eta=0.05))
        assert len(trajectory.params_over_time) == smooth_phase.K + 1
        assert not np.array_equal(trajectory.params_over_time[-1].tensors['W2'], small_dense.tensors['W2'])

    def test_per_tensor_scale(self, small_dense, sample, hard_phase):
        x, y = sample
        s_star = run_free_phase(small_dense, x, hard_phase).final
        cfg = replace(hard_phase, eta=0.05, eta_scale={'W1': 0.0, 'b1': 0.0})
        final = run_continual_phase(small_dense, x, y, s_star, cfg).params_over_time[-1]
        np.testing.assert_array_equal(final.tensors['W1'], small_dense.tensors['W1'])

    def test_beta_zero(self, small_dense, sample, hard_phase):
        x, y = sample
        s_star = run_free_phase(small_dense, x, hard_phase).final
        with pytest.raises(ConfigError, match="beta"):
            run_continual_phase(small_dense, x, y, s_star, replace(hard_phase, beta=0.0))


class TestTrajectoryDump:
    """Test cases for dump_trajectory_csv."""

    def test_rows(self, tmp_path):
        trajectory = Trajectory(states=[[np.zeros(2), np.zeros(1)], [np.array([0.5, 0.25]), np.array([1.0])]])
        path = tmp_path / "out" / "trajectory.csv"
        assert dump_trajectory_csv(trajectory, str(path)) == 6
        with open(path, newline='') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['step', 'layer', 'neuron_index', 'value']
        assert rows[4] == ['1', '1', '0', '0.5']
        assert rows[6] == ['1', '2', '0', '1.0']
