"""Free, nudged and continual phases, recorded as trajectories."""

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from config import HARD_SIGMOID, TRAJECTORY_CSV_COLUMNS
from energy_models import (VectorFieldParams, batch_size, copy_state, d_phi_d_theta,
                           free_step, max_abs_diff, nudged_step, pre_activations,
                           sample_max_abs_diff, zero_state)
from errors import ConfigError
from tensor_ops import activate


@dataclass
class PhaseConfig:
    """Settings shared by the three phases.

    T is the free-phase step cap, K the second-phase length, tol the max-norm
    steady-state tolerance. eta_scale optionally multiplies eta per tensor name.
    """

    T: int = 100
    K: int = 12
    beta: float = 0.5
    eta: float = 0.0
    tol: float = 1e-4
    activation: str = HARD_SIGMOID
    eta_scale: dict = field(default_factory=dict)

    def validate(self, need_beta=False):
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.K < 0:
            raise ConfigError(f"K must be >= 0, got {self.K}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if need_beta and self.beta == 0:
            raise ConfigError("beta must be non-zero for an EP update (division by beta)")

    @classmethod
    def from_config(cls, config):
        return cls(T=int(config['phase.T']), K=int(config['phase.K']),
                   beta=float(config['phase.beta']), eta=float(config['phase.eta']),
                   tol=float(config['phase.tol']), activation=config['model.activation'])


@dataclass
class Trajectory:
    """Time-indexed states of one phase (plus parameters for the continual phase)."""

    states: list
    params_over_time: list = None
    converged: bool = False
    residual: float = math.inf
    sample_residuals: np.ndarray = None

    @property
    def steps(self):
        return len(self.states) - 1

    @property
    def final(self):
        return self.states[-1]


def _settle(params, x, cfg, step_fn, s_init):
    s = zero_state(params, x) if s_init is None else copy_state(s_init)
    states = [s]
    residual = math.inf
    sample_residuals = None
    for _ in range(cfg.T):
        s_next = step_fn(s)
        residual = max_abs_diff(s_next, s)
        sample_residuals = sample_max_abs_diff(params, x, s_next, s)
        states.append(s_next)
        s = s_next
        if residual <= cfg.tol:
            break
    return Trajectory(states=states, converged=residual <= cfg.tol, residual=residual,
                      sample_residuals=np.asarray(sample_residuals))


def run_free_phase(params, x, cfg, s_init=None):
    """Iterate free_step from the all-zero state until the max-norm change <= tol or T steps.

    Non-convergence is reported through Trajectory.converged, never raised.
    """
    cfg.validate()
    return _settle(params, x, cfg, lambda s: free_step(x, s, params, cfg.activation), s_init)


def run_relaxation_phase(params, x, cfg, epsilon, s_init=None):
    """Euler-discretised relaxation s <- s + epsilon * (sigma(dPhi/ds) - s).

    epsilon = 1 takes exactly the discrete free step.
    """
    cfg.validate()
    if epsilon == 1.0:
        return run_free_phase(params, x, cfg, s_init=s_init)

    def relax(s):
        target = [activate(u, cfg.activation) for u in pre_activations(x, s, params)]
        return [layer + epsilon * (goal - layer) for layer, goal in zip(s, target)]

    return _settle(params, x, cfg, relax, s_init)


def hold_steady_state(params, x, free, K, kind):
    """Extend a free phase shorter than K by further free steps from its last state.

    BPTT over K steps needs K recorded transitions; a phase that settled early
    is continued at its steady state. Convergence flags are kept as recorded.
    """
    if free.steps >= K:
        return free
    states = list(free.states)
    while len(states) - 1 < K:
        states.append(free_step(x, states[-1], params, kind))
    return replace(free, states=states)


def run_nudged_phase(params, x, y, s_init, cfg):
    """K nudged steps with fixed theta from s_init (the free steady state)."""
    cfg.validate()
    s = copy_state(s_init)
    states = [s]
    residual = 0.0
    for _ in range(cfg.K):
        s_next = nudged_step(x, s, params, y, cfg.beta, cfg.activation)
        residual = max_abs_diff(s_next, s)
        states.append(s_next)
        s = s_next
    return Trajectory(states=states, converged=residual <= cfg.tol, residual=residual)


def ep_update(params, s_star, s_star_beta, x, beta):
    """(1/beta) * (dPhi/dtheta(s_star_beta) - dPhi/dtheta(s_star)), averaged over the batch.

    Raises:
        ConfigError: If beta is zero.
        UnsupportedModelError: For VectorFieldParams.
    """
    if beta == 0:
        raise ConfigError("beta must be non-zero for an EP update (division by beta)")
    nudged = d_phi_d_theta(x, s_star_beta, params)
    free = d_phi_d_theta(x, s_star, params)
    n = batch_size(params, x)
    return replace(params, tensors={name: (nudged.tensors[name] - free.tensors[name]) / beta / n
                                    for name in params.tensors})


def vector_field_update(params, x, s_t, s_next, beta):
    """Forward-only update direction for vector-field models, averaged over the batch.

    dW_k = (1/beta) (s^k_{t+1} - s^k_t) s^{k-1,T}_t with s^0 = x, db_k = (1/beta)(s^k_{t+1} - s^k_t).
    Backward weights receive no update.
    """
    if beta == 0:
        raise ConfigError("beta must be non-zero for an EP update (division by beta)")
    n = batch_size(params, x)
    tensors = {}
    pre = [np.asarray(x, dtype=np.float64)] + list(s_t[:-1])
    for k in range(1, len(s_t) + 1):
        change = np.atleast_2d(s_next[k - 1] - s_t[k - 1])
        tensors[f'W{k}'] = change.T @ np.atleast_2d(pre[k - 1]) / beta / n
        tensors[f'b{k}'] = change.sum(axis=0) / beta / n
    return replace(params, tensors=tensors)


def continual_update(params, x, s_t, s_next, beta):
    """Per-step update direction of the continual phase for any family."""
    if isinstance(params, VectorFieldParams):
        return vector_field_update(params, x, s_t, s_next, beta)
    return ep_update(params, s_t, s_next, x, beta)


def eta_rates(params, cfg):
    """Per-tensor intra-phase learning rates: eta times the optional per-tensor scale."""
    return {name: cfg.eta * cfg.eta_scale.get(name, 1.0) for name in params.tensors}


def run_continual_phase(params, x, y, s_init, cfg):
    """Second phase where neurons and synapses evolve together.

    s_{t+1} = nudged_step(s_t, theta_t); theta_{t+1} = theta_t + eta * update(s_t, s_{t+1}),
    with the update evaluated at theta_t. With eta = 0 the states match
    run_nudged_phase exactly and theta stays constant.

    Raises:
        ConfigError: If beta is zero.
    """
    cfg.validate(need_beta=True)
    rates = eta_rates(params, cfg)
    s = copy_state(s_init)
    theta = params
    states = [s]
    params_over_time = [theta]
    residual = 0.0
    for _ in range(cfg.K):
        s_next = nudged_step(x, s, theta, y, cfg.beta, cfg.activation)
        theta = theta.add_scaled(continual_update(theta, x, s, s_next, cfg.beta), rates)
        residual = max_abs_diff(s_next, s)
        states.append(s_next)
        params_over_time.append(theta)
        s = s_next
    return Trajectory(states=states, params_over_time=params_over_time,
                      converged=residual <= cfg.tol, residual=residual)


def dump_trajectory_csv(trajectory, path):
    """Write a trajectory as CSV rows (step, layer, neuron_index, value).

    Layers are numbered from 1; neuron_index is the row-major flat index.
    """
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    rows = 0
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_CSV_COLUMNS)
        for step, state in enumerate(trajectory.states):
            for layer_number, layer in enumerate(state, start=1):
                for index, value in enumerate(layer.ravel()):
                    writer.writerow([step, layer_number, index, repr(float(value))])
                    rows += 1
    print(f"✓ Trajectory saved: {path} ({rows} rows)")
    return rows
