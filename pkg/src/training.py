"""Training loops for EP, continual EP, continual vector-field EP and the BPTT baseline."""

import csv
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from bptt_oracle import total_gradient
from checkpoint import save_checkpoint
from config import (CHANCE_FRACTION_FOR_ABORT, EPOCH_CHECKPOINT_PATTERN, FAMILY_VECTOR_FIELD,
                    METRICS_CSV_COLUMNS)
from dynamics import (PhaseConfig, ep_update, run_continual_phase, run_free_phase,
                      run_nudged_phase)
from energy_models import VectorFieldParams, init_from_config, layer_index, predict
from errors import ConfigError, NumericalAbort, UnsupportedModelError
from gdu_analysis import initial_gdu_cosine


@dataclass
class TrainConfig:
    """Everything a training run needs besides the data.

    lr applies to EP and BPTT, eta to the continual variants (None falls back
    to lr). Either may be a list ordered from the input-side layer to the
    output layer, or a single base rate that doubles for every layer closer
    to the input.
    """

    algo: str = 'ep'
    model: dict = field(default_factory=dict)
    phase: PhaseConfig = field(default_factory=PhaseConfig)
    epochs: int = 30
    batch_size: int = 20
    lr: object = 0.05
    eta: object = None
    seed: int = 0
    max_unconverged_fraction: float = 0.5
    early_abort_epochs: int = 5
    checkpoint_every: int = 0
    angle: float = 0.0
    gdu_samples: int = 4
    gdu_beta: float = 1e-3
    output_dir: str = None

    @classmethod
    def from_config(cls, config, algo, output_dir=None):
        return cls(
            algo=algo,
            model={key: value for key, value in config.items() if key.startswith('model.')},
            phase=PhaseConfig.from_config(config),
            epochs=int(config['train.epochs']),
            batch_size=int(config['train.batch_size']),
            lr=config['train.lr'],
            eta=config['train.eta'],
            seed=int(config['seed']),
            max_unconverged_fraction=float(config['train.max_unconverged_fraction']),
            early_abort_epochs=int(config['train.early_abort_epochs']),
            checkpoint_every=int(config['train.checkpoint_every']),
            angle=float(config['cvf.angle']),
            gdu_samples=int(config['cvf.gdu_samples']),
            gdu_beta=float(config['cvf.gdu_beta']),
            output_dir=output_dir,
        )


@dataclass
class EpochMetrics:
    epoch: int
    train_err: float
    test_err: float
    mean_free_steps: float
    wall_ms: float

    def as_row(self):
        return [self.epoch, self.train_err, self.test_err, self.mean_free_steps, self.wall_ms]


@dataclass
class TrainResult:
    params: object
    metrics: list = field(default_factory=list)
    initial_gdu_cosine: float = None
    checkpoints: list = field(default_factory=list)

    @property
    def final_test_err(self):
        return self.metrics[-1].test_err if self.metrics else math.nan


def layer_rates(params, rates):
    """Map a rate setting onto every tensor name.

    Args:
        params (ModelParams): Model whose tensors get a rate.
        rates (float | list[float]): Per layer (input side first), or a base
            rate for the output layer that doubles toward the input.

    Raises:
        ConfigError: If a list does not have one rate per layer, or a rate is negative.
    """
    n_layers = params.num_layers
    if isinstance(rates, (list, tuple)):
        if len(rates) != n_layers:
            raise ConfigError(f"expected {n_layers} per-layer rates, got {len(rates)}")
        per_layer = [float(r) for r in rates]
    else:
        per_layer = [float(rates) * 2.0 ** (n_layers - k) for k in range(1, n_layers + 1)]
    if any(r < 0 for r in per_layer):
        raise ConfigError(f"learning rates must be >= 0, got {rates!r}")
    return {name: per_layer[layer_index(name) - 1] for name in params.tensors}


def init_vector_field_angle(params, angle, rng):
    """Set every backward weight B_k at a given angle from W_k^T.

    B_k = cos(a) W_k^T + sin(a) R, where R is a random direction orthogonal to
    W_k^T (as flattened vectors) with the same norm. Angle 0 gives B_k = W_k^T
    exactly; angle 90 gives an orthogonal B_k.

    Raises:
        ConfigError: If angle is outside [0, 90] degrees.
        UnsupportedModelError: If params is not a vector-field model.
    """
    if not 0.0 <= angle <= 90.0:
        raise ConfigError(f"weight angle must be within [0, 90] degrees, got {angle}")
    if not isinstance(params, VectorFieldParams):
        raise UnsupportedModelError("weight angles only apply to vector-field models")
    radians = math.radians(angle)
    cos_a = 0.0 if angle == 90.0 else math.cos(radians)
    sin_a = math.sin(radians)
    tensors = dict(params.tensors)
    for k in range(2, params.num_layers + 1):
        transposed = params.tensors[f'W{k}'].T
        scale = np.linalg.norm(transposed)
        random = rng.standard_normal(transposed.shape)
        if scale > 0:
            random = random - (np.sum(random * transposed) / scale ** 2) * transposed
            random = random * (scale / np.linalg.norm(random))
        else:
            random = np.zeros_like(transposed)
        tensors[f'B{k}'] = cos_a * transposed + sin_a * random
    return replace(params, tensors=tensors)


def weight_angle(params, k):
    """Angle in degrees between vec(B_k) and vec(W_k^T)."""
    backward = params.tensors[f'B{k}'].ravel()
    forward = params.tensors[f'W{k}'].T.ravel()
    cosine = backward @ forward / (np.linalg.norm(backward) * np.linalg.norm(forward))
    return math.degrees(math.acos(float(np.clip(cosine, -1.0, 1.0))))


def evaluate(params, dataset, phase, batch_size=100):
    """Fraction of samples whose free-phase argmax prediction differs from the label argmax."""
    n = len(dataset)
    if n == 0:
        return 0.0
    wrong = 0
    for start in range(0, n, batch_size):
        x = dataset.inputs[start:start + batch_size]
        free = run_free_phase(params, x, phase)
        wrong += int(np.sum(predict(free.final) != dataset.classes[start:start + batch_size]))
    return wrong / n


def _ep_step(rates):
    def step(params, x, y, free, phase):
        nudged = run_nudged_phase(params, x, y, free.final, phase)
        return params.add_scaled(ep_update(params, free.final, nudged.final, x, phase.beta), rates)
    return step


def _continual_step(rates):
    def step(params, x, y, free, phase):
        continual = run_continual_phase(params, x, y, free.final, replace(phase, eta=1.0, eta_scale=rates))
        return continual.params_over_time[-1]
    return step


def _bptt_step(rates):
    def step(params, x, y, free, phase):
        grad = total_gradient(params, x, y, phase, trajectory=free)
        n = x.shape[0]
        return params.add_scaled(grad, {name: -rate / n for name, rate in rates.items()})
    return step


def _check_epoch(params, epoch, unconverged, n, train_err, num_classes, tcfg):
    if not params.is_finite():
        raise NumericalAbort(f"epoch {epoch}: a parameter became NaN or Inf")
    if n and unconverged / n > tcfg.max_unconverged_fraction:
        raise NumericalAbort(
            f"epoch {epoch}: {unconverged}/{n} free phases did not reach tol={tcfg.phase.tol} "
            f"within T={tcfg.phase.T} steps (limit {tcfg.max_unconverged_fraction:.0%})")
    chance_err = 1.0 - 1.0 / num_classes
    if 0 < tcfg.early_abort_epochs <= epoch and train_err > CHANCE_FRACTION_FOR_ABORT * chance_err:
        raise NumericalAbort(
            f"epoch {epoch}: train error {train_err:.3f} still above "
            f"{CHANCE_FRACTION_FOR_ABORT:.0%} of chance ({chance_err:.3f})")


def _run_epochs(params, train_set, test_set, tcfg, step, result):
    rng = np.random.default_rng(tcfg.seed)
    n = len(train_set)
    labels = train_set.classes
    for epoch in range(1, tcfg.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        wrong = 0
        unconverged = 0
        step_total = 0
        for start in range(0, n, tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            x = train_set.inputs[batch]
            y = train_set.labels[batch]
            free = run_free_phase(params, x, tcfg.phase)
            wrong += int(np.sum(predict(free.final) != labels[batch]))
            unconverged += int(np.sum(free.sample_residuals > tcfg.phase.tol))
            step_total += free.steps * len(batch)
            params = step(params, x, y, free, tcfg.phase)

        train_err = wrong / n if n else 0.0
        _check_epoch(params, epoch, unconverged, n, train_err, train_set.num_classes, tcfg)
        test_err = evaluate(params, test_set, tcfg.phase) if test_set is not None else math.nan
        metrics = EpochMetrics(epoch=epoch, train_err=train_err, test_err=test_err,
                               mean_free_steps=step_total / n if n else 0.0,
                               wall_ms=(time.perf_counter() - started) * 1000.0)
        result.metrics.append(metrics)
        print(f"✓ Epoch {epoch}/{tcfg.epochs} [{tcfg.algo}]: train_err={train_err:.4f} "
              f"test_err={test_err:.4f} free_steps={metrics.mean_free_steps:.1f} "
              f"({metrics.wall_ms:.0f} ms)")

        if tcfg.output_dir and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            path = os.path.join(tcfg.output_dir, EPOCH_CHECKPOINT_PATTERN.format(epoch=epoch))
            save_checkpoint(params, path)
            result.checkpoints.append(path)
    result.params = params
    return result


def _initial_params(tcfg, params):
    if params is not None:
        return params
    return init_from_config(tcfg.model, np.random.default_rng(tcfg.seed))


def _continual_rates(tcfg):
    return tcfg.lr if tcfg.eta is None else tcfg.eta


def train_ep(tcfg, train_set, test_set=None, params=None):
    """Two-phase EP: free phase, nudged phase, then theta += lr * ep_update per minibatch.

    Raises:
        UnsupportedModelError: For vector-field models.
        NumericalAbort: Per the epoch checks (NaN/Inf, non-convergence, stalled error).
    """
    params = _initial_params(tcfg, params)
    if isinstance(params, VectorFieldParams):
        raise UnsupportedModelError("EP needs a primitive function; use train_cvf for vector-field models")
    tcfg.phase.validate(need_beta=True)
    step = _ep_step(layer_rates(params, tcfg.lr))
    return _run_epochs(params, train_set, test_set, tcfg, step, TrainResult(params=params))


def train_cep(tcfg, train_set, test_set=None, params=None):
    """Continual EP: the parameters at the end of the continual phase are kept.

    With K = 1 and eta equal to the EP rate this matches train_ep exactly.
    """
    params = _initial_params(tcfg, params)
    if isinstance(params, VectorFieldParams):
        raise UnsupportedModelError("C-EP needs a primitive function; use train_cvf for vector-field models")
    tcfg.phase.validate(need_beta=True)
    step = _continual_step(layer_rates(params, _continual_rates(tcfg)))
    return _run_epochs(params, train_set, test_set, tcfg, step, TrainResult(params=params))


def train_cvf(tcfg, angle, train_set, test_set=None, params=None):
    """Continual vector-field EP from backward weights set at the given angle.

    Only forward weights and biases learn; backward weights stay at their
    initial values. The mean GDU cosine before training is recorded.

    Raises:
        ConfigError: If angle is outside [0, 90].
    """
    if not 0.0 <= angle <= 90.0:
        raise ConfigError(f"weight angle must be within [0, 90] degrees, got {angle}")
    rng = np.random.default_rng(tcfg.seed)
    if params is None:
        params = init_from_config({**tcfg.model, 'model.family': FAMILY_VECTOR_FIELD}, rng)
    params = init_vector_field_angle(params, angle, rng)
    tcfg.phase.validate(need_beta=True)

    count = min(tcfg.gdu_samples, len(train_set))
    samples = [(train_set.inputs[i], train_set.labels[i]) for i in range(count)]
    cosine = initial_gdu_cosine(params, samples, replace(tcfg.phase, beta=tcfg.gdu_beta))
    print(f"✓ Initial GDU cosine at {angle:g} degrees: {cosine:.4f}")

    step = _continual_step(layer_rates(params, _continual_rates(tcfg)))
    result = TrainResult(params=params, initial_gdu_cosine=cosine)
    return _run_epochs(params, train_set, test_set, tcfg, step, result)


def train_bptt(tcfg, train_set, test_set=None, params=None):
    """Baseline: theta -= lr * dL/dtheta by BPTT through each free phase (batch mean)."""
    params = _initial_params(tcfg, params)
    tcfg.phase.validate()
    step = _bptt_step(layer_rates(params, tcfg.lr))
    return _run_epochs(params, train_set, test_set, tcfg, step, TrainResult(params=params))


TRAINERS = {'ep': train_ep, 'cep': train_cep, 'bptt': train_bptt}


def angle_correlation(cosines, accuracies):
    """Spearman rank correlation between initial GDU cosines and final accuracies."""
    rho, _ = spearmanr(cosines, accuracies)
    return float(rho)


def write_metrics_csv(metrics, path):
    """Write one row per epoch: epoch, train_err, test_err, mean_free_steps, wall_ms."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(METRICS_CSV_COLUMNS)
            for row in metrics:
                writer.writerow(row.as_row())
    except OSError as e:
        raise OSError(f"Cannot write metrics {path}: {e}") from e
    print(f"✓ Metrics saved: {path} ({len(metrics)} epochs)")
