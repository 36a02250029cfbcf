"""Backpropagation through time over a recorded free phase, and its finite-difference check.

Time indexing: grad_s[t] = dL/ds_{T-t} for t = 0..K, and grad_theta[t] is the
partial derivative with respect to the parameter copy used by the transition
s_{T-t-1} -> s_{T-t}, for t = 0..K-1. grad_u[t] = sigma'(u_{T-t}) * grad_s[t]
is the same adjoint taken with respect to the pre-activation that produced
s_{T-t}.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from config import GRADCHECK_CSV_COLUMNS, GRADCHECK_H_RANGE, GRADCHECK_REL_ERR_FLOOR, HARD_SIGMOID
from dynamics import hold_steady_state, run_free_phase
from energy_models import (copy_state, free_step, loss, output, param_vjp,
                           pre_activations, state_vjp, zero_state)
from errors import ConfigError
from tensor_ops import activate_prime


@dataclass
class BpttGradients:
    grad_s: list
    grad_u: list
    grad_theta: list
    loss: float
    converged: bool = True
    warning: str = None


def bptt_gradients(params, x, y, trajectory, K, kind):
    """Back-propagate L = 0.5 * ||y_hat_T - y||^2 through the last K steps of a free phase.

    Args:
        params (ModelParams): The tied parameters used by every step.
        x (np.ndarray): Clamped input.
        y (np.ndarray): Target for the output layer.
        trajectory (Trajectory): Recorded free phase s_0..s_T.
        K (int): Number of steps to go back.
        kind (str): Activation used by the free phase.

    Returns:
        BpttGradients: With a warning when the trajectory did not converge.

    Raises:
        ConfigError: If K exceeds the number of recorded steps.
    """
    T = trajectory.steps
    if K > T:
        raise ConfigError(f"K={K} exceeds the {T} recorded free-phase steps")
    if K < 0:
        raise ConfigError(f"K must be >= 0, got {K}")

    states = trajectory.states
    s_final = states[T]
    adjoint = [np.zeros_like(layer) for layer in s_final]
    adjoint[-1] = output(s_final) - np.asarray(y, dtype=np.float64)

    grad_s = [adjoint]
    grad_u = []
    grad_theta = []
    for t in range(K):
        s_prev = states[T - t - 1]
        drive = pre_activations(x, s_prev, params)
        delta = [activate_prime(u, kind) * a for u, a in zip(drive, adjoint)]
        grad_u.append(delta)
        grad_theta.append(param_vjp(x, s_prev, params, delta))
        adjoint = state_vjp(x, s_prev, params, delta)
        grad_s.append(adjoint)

    warning = None
    if not trajectory.converged:
        warning = (f"free phase did not converge (residual {trajectory.residual:.3e}); "
                   "the steady-state premise of the EP/BPTT equivalence is violated")
    return BpttGradients(grad_s=grad_s, grad_u=grad_u, grad_theta=grad_theta,
                         loss=loss(s_final, y), converged=trajectory.converged, warning=warning)


def sum_gradients(params, gradients):
    """Sum a list of params-shaped gradients; zeros when the list is empty."""
    total = params.zeros_like()
    for grad in gradients:
        total = total.add_scaled(grad, 1.0)
    return total


def total_gradient(params, x, y, cfg, trajectory=None):
    """Tied-weight gradient dL/dtheta: free phase, then BPTT over all of it.

    Args:
        params (ModelParams): Model parameters.
        x (np.ndarray): Input (optionally batched; the loss is summed over the batch).
        y (np.ndarray): Target.
        cfg (PhaseConfig): Free-phase settings (T, tol, activation).
        trajectory (Trajectory | None): Reuse an already recorded free phase.

    Returns:
        ModelParams: Sum over steps of the per-step partials.
    """
    if trajectory is None:
        trajectory = run_free_phase(params, x, cfg)
    grads = bptt_gradients(params, x, y, trajectory, trajectory.steps, cfg.activation)
    return sum_gradients(params, grads.grad_theta)


def _region_code(drive):
    return np.concatenate([np.digitize(u.ravel(), [0.0, 1.0]) for u in drive])


def _unroll(params, x, y, s_start, first_params, n_steps, kind):
    """Run n_steps free steps (the first with first_params) and return (loss, region signature)."""
    s = copy_state(s_start)
    signature = []
    for step in range(n_steps):
        theta = first_params if step == 0 else params
        if kind == HARD_SIGMOID:
            signature.append(_region_code(pre_activations(x, s, theta)))
        s = free_step(x, s, theta, kind)
    code = np.concatenate(signature) if signature else np.zeros(0)
    return loss(s, y), code


def unrolled_loss(params, x, y, n_steps, kind):
    """Loss after exactly n_steps free steps from the zero state (no early stop)."""
    value, _ = _unroll(params, x, y, zero_state(params, x), params, n_steps, kind)
    return value


def relative_error(analytic, numeric, floor=GRADCHECK_REL_ERR_FLOOR):
    """|a - n| / max(|a|, |n|, floor); exactly 0 when both are 0."""
    diff = abs(analytic - numeric)
    if diff == 0.0:
        return 0.0
    return diff / max(abs(analytic), abs(numeric), floor)


@dataclass
class FiniteDiffReport:
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    converged: bool = True

    @property
    def max_rel_err(self):
        return max((row['rel_err'] for row in self.rows), default=0.0)

    @property
    def mean_rel_err(self):
        if not self.rows:
            return 0.0
        return float(np.mean([row['rel_err'] for row in self.rows]))


def _sample_coords(rng, size, count):
    if size <= count:
        return list(range(size))
    return sorted(int(i) for i in rng.choice(size, size=count, replace=False))


def _central_difference(evaluate, h):
    loss_plus, code_plus = evaluate(+h)
    loss_minus, code_minus = evaluate(-h)
    kink = code_plus.shape != code_minus.shape or not np.array_equal(code_plus, code_minus)
    return (loss_plus - loss_minus) / (2.0 * h), kink


def finite_diff_check(params, x, y, cfg, K, h, coords=20, seed=0):
    """Compare bptt_gradients against central differences on sampled coordinates.

    Parameter coordinates are perturbed at one step only (the transition that
    produces s_{T-t}); state coordinates perturb s_{T-t} and re-run forward.
    With HardSigmoid, coordinates whose +h / -h runs cross a kink are skipped.

    Args:
        params (ModelParams): Model parameters.
        x (np.ndarray): Single input sample.
        y (np.ndarray): Target.
        cfg (PhaseConfig): Free-phase settings.
        K (int): Steps of BPTT to validate.
        h (float): Finite-difference step.
        coords (int): Coordinates sampled per tensor and time step.
        seed (int): Seed for coordinate sampling.

    Returns:
        FiniteDiffReport: Rows with analytic, numeric, and relative error.

    Raises:
        ConfigError: If h is outside GRADCHECK_H_RANGE.
    """
    h_low, h_high = GRADCHECK_H_RANGE
    if not h_low <= h <= h_high:
        raise ConfigError(f"finite-difference step h={h:g} outside [{h_low:g}, {h_high:g}]")
    trajectory = hold_steady_state(params, x, run_free_phase(params, x, cfg), K, cfg.activation)
    grads = bptt_gradients(params, x, y, trajectory, K, cfg.activation)
    T = trajectory.steps
    kind = cfg.activation
    rng = np.random.default_rng(seed)
    report = FiniteDiffReport(converged=trajectory.converged)

    def record(tensor, t, coord, analytic, numeric, kink):
        if kink:
            report.skipped.append({'tensor': tensor, 't': t, 'coordinate': coord})
            return
        report.rows.append({'tensor': tensor, 't': t, 'coordinate': coord,
                            'analytic': float(analytic), 'numeric': float(numeric),
                            'rel_err': relative_error(float(analytic), float(numeric))})

    for t in range(K):
        s_start = trajectory.states[T - t - 1]
        for name, value in params.tensors.items():
            analytic_flat = grads.grad_theta[t].tensors[name].ravel()
            for coord in _sample_coords(rng, value.size, coords):
                def evaluate(step, name=name, coord=coord):
                    perturbed = value.copy()
                    perturbed.ravel()[coord] += step
                    first = replace(params, tensors={**params.tensors, name: perturbed})
                    return _unroll(params, x, y, s_start, first, t + 1, kind)
                numeric, kink = _central_difference(evaluate, h)
                record(name, t, coord, analytic_flat[coord], numeric, kink)

    for t in range(K + 1):
        s_at = trajectory.states[T - t]
        for index, layer in enumerate(s_at):
            analytic_flat = grads.grad_s[t][index].ravel()
            for coord in _sample_coords(rng, layer.size, coords):
                def evaluate(step, index=index, coord=coord):
                    shifted = copy_state(s_at)
                    shifted[index].ravel()[coord] += step
                    return _unroll(params, x, y, shifted, params, t, kind)
                numeric, kink = _central_difference(evaluate, h)
                record(f's{index + 1}', t, coord, analytic_flat[coord], numeric, kink)

    return report


def emit_gradcheck_csv(report, path):
    """Write gradcheck rows (tensor, t, coordinate, analytic, numeric, rel_err) to CSV."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=GRADCHECK_CSV_COLUMNS)
            writer.writeheader()
            for row in report.rows:
                writer.writerow({key: row[key] for key in GRADCHECK_CSV_COLUMNS})
    except OSError as e:
        raise OSError(f"Cannot write gradcheck report {path}: {e}") from e
    print(f"✓ Gradcheck report saved: {path} ({len(report.rows)} rows, {len(report.skipped)} skipped)")
