"""Step-by-step comparison of EP update processes with BPTT gradient processes.

The EP processes of a second phase of length K are
    delta_s[t]     = (s_{t+1} - s_t) / beta
    delta_theta[t] = update direction between s_t and s_{t+1} (the Hebbian
                     difference of dPhi/dtheta, or the forward-only rule for
                     vector-field models)
and are expected to match -grad_u[t] and -grad_theta[t] of the BPTT oracle
when the free phase has converged and beta, eta are small.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from bptt_oracle import bptt_gradients
from config import (GDU_CSV_COLUMNS, GDU_CSV_COORDS_PER_TENSOR, GDU_CSV_SEED, GDU_EPS0,
                    GDU_RESIDUAL_FACTOR, GDU_ZERO_TOL)
from dynamics import continual_update, hold_steady_state, run_continual_phase, run_free_phase
from errors import InvalidInputError


@dataclass
class EpProcesses:
    delta_s: list
    delta_theta: list
    beta: float
    eta: float
    trajectory: object = None


def compute_ep_processes(params, x, y, s_star, cfg):
    """Run the continual phase from s_star and map it to EP update processes.

    eta = 0 gives standard EP; eta > 0 gives continual EP, where each
    delta_theta[t] is evaluated with the parameters theta_t in force at step t.

    Args:
        params (ModelParams): Parameters at the start of the second phase.
        x (np.ndarray): Single input sample.
        y (np.ndarray): Target.
        s_star (list): Free-phase steady state.
        cfg (PhaseConfig): beta must be non-zero.

    Returns:
        EpProcesses: Both lists have length cfg.K.
    """
    trajectory = run_continual_phase(params, x, y, s_star, cfg)
    states = trajectory.states
    delta_s = []
    delta_theta = []
    for t in range(cfg.K):
        delta_s.append([(after - before) / cfg.beta for after, before in zip(states[t + 1], states[t])])
        delta_theta.append(continual_update(trajectory.params_over_time[t], x, states[t],
                                            states[t + 1], cfg.beta))
    return EpProcesses(delta_s=delta_s, delta_theta=delta_theta, beta=cfg.beta,
                       eta=cfg.eta, trajectory=trajectory)


@dataclass
class GduEntry:
    tensor: str
    kind: str
    t: int
    rel_mse: float
    cosine: float
    exact: bool


def compare_vectors(a, b, zero_tol=GDU_ZERO_TOL, residual_tol=0.0):
    """rel_mse and cosine between a and a reference b.

    rel_mse = ||a - b||^2 / (||a||^2 + ||b||^2 + eps0). Two zero vectors (norm
    <= zero_tol) are an exact match; the cosine of a one-sided zero is nan.
    When b is zero, a also counts as zero up to residual_tol.

    Returns:
        tuple[float, float, bool]: rel_mse, cosine, exact.
    """
    a = np.ravel(a)
    b = np.ravel(b)
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_b <= zero_tol and norm_a <= max(zero_tol, residual_tol):
        return 0.0, 1.0, True
    diff = a - b
    rel_mse = float(diff @ diff) / (norm_a ** 2 + norm_b ** 2 + GDU_EPS0)
    if norm_a <= zero_tol or norm_b <= zero_tol:
        return rel_mse, math.nan, False
    cosine = float(np.clip((a @ b) / (norm_a * norm_b), -1.0, 1.0))
    return rel_mse, cosine, False


def _aggregate(entries):
    cosines = [e.cosine for e in entries if not math.isnan(e.cosine)]
    rel = [e.rel_mse for e in entries]
    return {
        'count': len(entries),
        'exact': sum(1 for e in entries if e.exact),
        'mean_rel_mse': float(np.mean(rel)) if rel else 0.0,
        'max_rel_mse': float(np.max(rel)) if rel else 0.0,
        'mean_cosine': float(np.mean(cosines)) if cosines else math.nan,
        'min_cosine': float(np.min(cosines)) if cosines else math.nan,
        'undefined_cosines': len(entries) - len(cosines),
    }


@dataclass
class GduReport:
    """Per (tensor, t) metrics plus aggregates per tensor and over everything."""

    entries: list = field(default_factory=list)
    warning: str = None

    def select(self, kind=None):
        return [e for e in self.entries if kind is None or e.kind == kind]

    @property
    def tensors(self):
        return list(dict.fromkeys(e.tensor for e in self.entries))

    @property
    def per_tensor(self):
        return {name: _aggregate([e for e in self.entries if e.tensor == name]) for name in self.tensors}

    def aggregate(self, kind=None):
        return _aggregate(self.select(kind))

    def aggregate_rel_mse(self, kind=None):
        return self.aggregate(kind)['mean_rel_mse']

    def mean_cosine(self, kind=None):
        return self.aggregate(kind)['mean_cosine']

    def min_cosine(self, kind=None):
        return self.aggregate(kind)['min_cosine']

    def passes(self, cosine_threshold, rel_mse_threshold):
        """True when every defined cosine and the state/param aggregate rel_mse meet the thresholds.

        Worst-case cosine per tensor is compared to cosine_threshold; a report
        with a warning never passes.
        """
        if self.warning:
            return False
        for kind in ('state', 'param'):
            stats = self.aggregate(kind)
            if stats['count'] == 0:
                continue
            if stats['mean_rel_mse'] > rel_mse_threshold:
                return False
            if stats['undefined_cosines']:
                return False
            if not math.isnan(stats['min_cosine']) and stats['min_cosine'] < cosine_threshold:
                return False
        return True

    def to_dict(self):
        return {
            'global': self.aggregate(),
            'state': self.aggregate('state'),
            'param': self.aggregate('param'),
            'per_tensor': self.per_tensor,
            'warning': self.warning,
        }


def _process_pairs(ep, reference_s, reference_theta):
    """Yield (tensor, kind, t, ep_value, reference_value) for every compared quantity."""
    for t, (delta_s, delta_theta) in enumerate(zip(ep.delta_s, ep.delta_theta)):
        for index, layer in enumerate(delta_s):
            yield f's{index + 1}', 'state', t, layer, reference_s[t][index]
        for name, value in delta_theta.tensors.items():
            yield name, 'param', t, value, reference_theta[t].tensors[name]


def _negated_bptt(bptt):
    minus_s = [[-layer for layer in grad] for grad in bptt.grad_u]
    minus_theta = [grad.map(np.negative) for grad in bptt.grad_theta]
    return minus_s, minus_theta


def process_scales(ep):
    """Largest norm over t of every EP process, keyed by tensor name."""
    scales = {}
    for tensor, _, _, value, _ in _process_pairs(ep, ep.delta_s, ep.delta_theta):
        scales[tensor] = max(scales.get(tensor, 0.0), float(np.linalg.norm(value)))
    return scales


def compare_to_bptt(ep, bptt, zero_tol=GDU_ZERO_TOL, residual_factor=GDU_RESIDUAL_FACTOR):
    """Compare delta_s[t] with -grad_u[t] and delta_theta[t] with -grad_theta[t].

    In a layered chain the BPTT adjoint is exactly zero on alternate layers at
    alternate steps, while the nudged phase leaves an O(beta) remainder there.
    Such a slot is an exact match when the EP norm stays within
    residual_factor * |beta| * (largest norm of that tensor's process).
    Vector-field backward weights have no EP process and are not compared.

    Raises:
        InvalidInputError: If the process lengths differ.
    """
    if len(ep.delta_s) != len(bptt.grad_theta):
        raise InvalidInputError(
            f"EP processes have length {len(ep.delta_s)}, BPTT processes {len(bptt.grad_theta)}")
    minus_s, minus_theta = _negated_bptt(bptt)
    scales = process_scales(ep)
    report = GduReport(warning=bptt.warning)
    for tensor, kind, t, value, reference in _process_pairs(ep, minus_s, minus_theta):
        residual_tol = residual_factor * abs(ep.beta) * scales[tensor]
        rel_mse, cosine, exact = compare_vectors(value, reference, zero_tol, residual_tol)
        report.entries.append(GduEntry(tensor, kind, t, rel_mse, cosine, exact))
    return report


def compare_ep_processes(ep, reference, zero_tol=GDU_ZERO_TOL):
    """Compare two EP processes (e.g. eta > 0 against eta = 0) with the same metrics.

    Raises:
        InvalidInputError: If the process lengths differ.
    """
    if len(ep.delta_s) != len(reference.delta_s):
        raise InvalidInputError(
            f"EP processes have lengths {len(ep.delta_s)} and {len(reference.delta_s)}")
    report = GduReport()
    for tensor, kind, t, value, other in _process_pairs(ep, reference.delta_s, reference.delta_theta):
        rel_mse, cosine, exact = compare_vectors(value, other, zero_tol)
        report.entries.append(GduEntry(tensor, kind, t, rel_mse, cosine, exact))
    return report


@dataclass
class GduRun:
    ep: EpProcesses
    bptt: object
    report: GduReport


def run_gdu(params, x, y, cfg, free=None):
    """Free phase, BPTT over its last K steps, EP processes from its steady state, comparison.

    Args:
        free (Trajectory | None): Reuse a recorded free phase.
    """
    if free is None:
        free = run_free_phase(params, x, cfg)
    free = hold_steady_state(params, x, free, cfg.K, cfg.activation)
    bptt = bptt_gradients(params, x, y, free, cfg.K, cfg.activation)
    ep = compute_ep_processes(params, x, y, free.final, cfg)
    return GduRun(ep=ep, bptt=bptt, report=compare_to_bptt(ep, bptt))


def sweep(params, x, y, cfg, betas, etas):
    """GDU comparison for every (beta, eta) pair over one shared free phase.

    Returns:
        list[dict]: One row per pair with beta, eta, rel_mse, rel_err
            (square root of rel_mse), mean_cosine, min_cosine, and the
            GduRun under key 'run'.
    """
    free = run_free_phase(params, x, cfg)
    rows = []
    for eta in etas:
        for beta in betas:
            run = run_gdu(params, x, y, replace(cfg, beta=float(beta), eta=float(eta)), free=free)
            rel_mse = run.report.aggregate_rel_mse()
            rows.append({
                'beta': float(beta),
                'eta': float(eta),
                'rel_mse': rel_mse,
                'rel_err': math.sqrt(rel_mse),
                'mean_cosine': run.report.mean_cosine(),
                'min_cosine': run.report.min_cosine(),
                'run': run,
            })
    return rows


def beta_sweep(params, x, y, cfg, betas):
    """Aggregate rel_mse per beta at the eta of cfg."""
    return sweep(params, x, y, cfg, betas, [cfg.eta])


def initial_gdu_cosine(params, samples, cfg):
    """Mean GDU cosine over all tensors, time steps, and the given (x, y) samples.

    Used as the degree to which a model satisfies the step-by-step equivalence
    before training; computed with eta = 0.
    """
    cfg = replace(cfg, eta=0.0)
    cosines = []
    for x, y in samples:
        value = run_gdu(params, x, y, cfg).report.mean_cosine()
        if not math.isnan(value):
            cosines.append(value)
    return float(np.mean(cosines)) if cosines else math.nan


def _sample_coords(size, rng):
    if size <= GDU_CSV_COORDS_PER_TENSOR:
        return list(range(size))
    return sorted(int(i) for i in rng.choice(size, size=GDU_CSV_COORDS_PER_TENSOR, replace=False))


def emit_gdu_csv(report, ep, bptt, path):
    """Write sampled coordinates of both processes over time.

    Columns: tensor, coord_index, t, ep_value, minus_bptt_value. At most
    GDU_CSV_COORDS_PER_TENSOR coordinates per tensor, drawn with a fixed seed
    and shared by all t. Only tensors present in report are written.
    """
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    wanted = set(report.tensors)
    minus_s, minus_theta = _negated_bptt(bptt) if wanted else ([], [])
    rng = np.random.default_rng(GDU_CSV_SEED)
    coords = {}
    rows = 0
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(GDU_CSV_COLUMNS)
            if wanted:
                for tensor, _, t, value, reference in _process_pairs(ep, minus_s, minus_theta):
                    if tensor not in wanted:
                        continue
                    if tensor not in coords:
                        coords[tensor] = _sample_coords(np.size(value), rng)
                    flat_value = np.ravel(value)
                    flat_reference = np.ravel(reference)
                    for coord in coords[tensor]:
                        writer.writerow([tensor, coord, t, repr(float(flat_value[coord])),
                                         repr(float(flat_reference[coord]))])
                        rows += 1
    except OSError as e:
        raise OSError(f"Cannot write GDU curves {path}: {e}") from e
    print(f"✓ GDU curves saved: {path} ({rows} rows)")
    return rows


def write_gdu_summary(report, path, extra=None):
    """Write per-tensor and global aggregates (plus optional extra fields) as JSON."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    summary = report.to_dict()
    if extra:
        summary.update(extra)
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(_json_safe(summary), f, indent=2)
    except OSError as e:
        raise OSError(f"Cannot write GDU summary {path}: {e}") from e
    print(f"✓ GDU summary saved: {path}")


def _json_safe(value):
    """Replace nan/inf (not valid JSON) with None, recursively."""
    if isinstance(value, dict):
        return {key: _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value
