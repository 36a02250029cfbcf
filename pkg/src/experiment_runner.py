"""Pipeline orchestration: one run_*_pipeline per subcommand, each writing a run directory."""

import json
import math
import os
from datetime import datetime, timezone

import numpy as np

from bptt_oracle import emit_gradcheck_csv, finite_diff_check
from checkpoint import save_checkpoint
from config import (CHECKPOINT_FILE, GDU_CSV_FILE, GDU_SUMMARY_FILE, GRADCHECK_CSV_FILE,
                    MANIFEST_FILE, METRICS_FILE, RUN_DIR_TIME_FORMAT, SPEED_SUMMARY_FILE,
                    TEACHER_CHECKPOINT_FILE, VERSION_TAG)
from data_io import load_datasets
from dynamics import PhaseConfig, run_free_phase, run_relaxation_phase
from energy_models import init_from_config
from errors import ConfigError
from gdu_analysis import emit_gdu_csv, sweep, write_gdu_summary
from training import (TRAINERS, TrainConfig, angle_correlation, train_cvf,
                      write_metrics_csv)

ANGLES_SUMMARY_FILE = "angles.json"


def _utc_now():
    return datetime.now(timezone.utc)


def make_run_dir(root, name, seed, started):
    """Create <root>/<name>_<seed>_<timestamp>; a numeric suffix avoids collisions."""
    base = os.path.join(root, f"{name}_{seed}_{started.strftime(RUN_DIR_TIME_FORMAT)}")
    path = base
    suffix = 1
    while os.path.exists(path):
        suffix += 1
        path = f"{base}-{suffix}"
    os.makedirs(path)
    return path


def write_manifest(run_dir, config, command, started, artifacts, status='ok', error=None):
    """Write manifest.json with the exact resolved config and what the run produced."""
    manifest = {
        'command': command,
        'version': VERSION_TAG,
        'seed': config['seed'],
        'started_utc': started.isoformat(),
        'finished_utc': _utc_now().isoformat(),
        'status': status,
        'error': error,
        'output_dir': run_dir,
        'artifacts': sorted(artifacts),
        'config': config,
    }
    path = os.path.join(run_dir, MANIFEST_FILE)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"✓ Manifest saved: {path}")
    return path


class _Run:
    """Run directory plus artifact bookkeeping; the manifest is written on exit, even on failure."""

    def __init__(self, config, command):
        self.config = config
        self.command = command
        self.started = _utc_now()
        self.dir = make_run_dir(config['output.root'], command, config['seed'], self.started)
        self.artifacts = []

    def path(self, name):
        self.artifacts.append(name)
        return os.path.join(self.dir, name)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            write_manifest(self.dir, self.config, self.command, self.started, self.artifacts)
        else:
            write_manifest(self.dir, self.config, self.command, self.started, self.artifacts,
                           status='failed', error=f"{exc_type.__name__}: {exc}")
        return False


def _sample(config):
    """Model, one (x, y) sample and the phase settings for the analysis subcommands."""
    params = init_from_config(config, np.random.default_rng(int(config['seed'])))
    train, _ = load_datasets(config)
    index = int(config['gdu.sample_index'])
    if not 0 <= index < len(train):
        raise ConfigError(f"gdu.sample_index {index} is outside the {len(train)} training samples")
    return params, train, train.inputs[index], train.labels[index], PhaseConfig.from_config(config)


def _save_teacher(run, dataset):
    if dataset.teacher is not None:
        save_checkpoint(dataset.teacher, run.path(TEACHER_CHECKPOINT_FILE))


def _train_one(run, config, algo, angle, train_set, test_set, subdir=''):
    tcfg = TrainConfig.from_config(config, algo, output_dir=os.path.join(run.dir, subdir))
    if algo == 'cvf':
        result = train_cvf(tcfg, angle, train_set, test_set)
    else:
        result = TRAINERS[algo](tcfg, train_set, test_set)
    write_metrics_csv(result.metrics, run.path(os.path.join(subdir, METRICS_FILE)))
    save_checkpoint(result.params, run.path(os.path.join(subdir, CHECKPOINT_FILE)))
    run.artifacts.extend(os.path.relpath(p, run.dir) for p in result.checkpoints)
    return result


def run_train_pipeline(config, algo, angles=None):
    """Train with one algorithm and persist metrics, checkpoints, and the manifest.

    For 'cvf', several angles train one model each (in angle-<deg> folders)
    and the Spearman correlation between initial GDU cosine and final test
    accuracy is written to angles.json.

    Returns:
        dict: Summary with run_dir, epochs, final_test_err and, for cvf,
            initial_gdu_cosine (or the per-angle table).

    Raises:
        ConfigError: On invalid settings.
        NumericalAbort: If training is stopped by an epoch check.
    """
    angles = angles or [float(config['cvf.angle'])]
    with _Run(config, algo) as run:
        train_set, test_set = load_datasets(config)
        _save_teacher(run, train_set)

        if algo != 'cvf' or len(angles) == 1:
            result = _train_one(run, config, algo, angles[0], train_set, test_set)
            return {
                'run_dir': run.dir,
                'epochs': len(result.metrics),
                'final_test_err': result.final_test_err,
                'initial_gdu_cosine': result.initial_gdu_cosine,
                'success': True,
            }

        table = []
        for angle in angles:
            result = _train_one(run, config, algo, angle, train_set, test_set, subdir=f"angle-{angle:g}")
            table.append({'angle': angle, 'initial_gdu_cosine': result.initial_gdu_cosine,
                          'final_test_err': result.final_test_err,
                          'final_accuracy': 1.0 - result.final_test_err})
        rho = angle_correlation([row['initial_gdu_cosine'] for row in table],
                                [row['final_accuracy'] for row in table])
        with open(run.path(ANGLES_SUMMARY_FILE), 'w', encoding='utf-8') as f:
            json.dump({'angles': table, 'spearman': None if math.isnan(rho) else rho}, f, indent=2)
        print(f"✓ Spearman(initial GDU cosine, final accuracy) = {rho:.3f}")
        return {'run_dir': run.dir, 'angles': table, 'spearman': rho, 'success': True}


def run_gdu_pipeline(config, betas=None, etas=None):
    """Compare EP processes with BPTT on one sample over a beta/eta grid.

    The first (beta, eta) pair is the one checked against
    gdu.cosine_threshold and gdu.rel_mse_threshold and written as curves.

    Returns:
        dict: Summary with run_dir, passes, warning and one row per pair.
    """
    betas = betas or config['gdu.betas']
    etas = etas or config['gdu.etas']
    with _Run(config, 'gdu') as run:
        params, _, x, y, cfg = _sample(config)
        rows = sweep(params, x, y, cfg, betas, etas)
        primary = rows[0]['run']
        if primary.report.warning:
            print(f"Warning: {primary.report.warning}")
        passes = primary.report.passes(float(config['gdu.cosine_threshold']),
                                       float(config['gdu.rel_mse_threshold']))
        table = [{key: value for key, value in row.items() if key != 'run'} for row in rows]

        emit_gdu_csv(primary.report, primary.ep, primary.bptt, run.path(GDU_CSV_FILE))
        write_gdu_summary(primary.report, run.path(GDU_SUMMARY_FILE),
                          extra={'beta': rows[0]['beta'], 'eta': rows[0]['eta'],
                                 'passes': passes, 'sweep': table})
        status = '✓' if passes else '✗'
        print(f"{status} GDU check: min cosine {primary.report.min_cosine():.6f}, "
              f"rel_mse {primary.report.aggregate_rel_mse():.3e}")
        return {'run_dir': run.dir, 'passes': passes, 'warning': primary.report.warning,
                'rows': table}


def run_gradcheck_pipeline(config):
    """Finite-difference validation of the BPTT oracle on one sample.

    Returns:
        dict: Summary with run_dir, max_rel_err, mean_rel_err, checked,
            skipped and passes (max_rel_err strictly below gradcheck.threshold).
    """
    with _Run(config, 'gradcheck') as run:
        params, _, x, y, cfg = _sample(config)
        report = finite_diff_check(params, x, y, cfg, cfg.K, float(config['gradcheck.h']),
                                   coords=int(config['gradcheck.coords']), seed=int(config['seed']))
        emit_gradcheck_csv(report, run.path(GRADCHECK_CSV_FILE))
        if not report.converged:
            print("Warning: free phase did not converge before the gradient check")
        passes = report.max_rel_err < float(config['gradcheck.threshold'])
        status = '✓' if passes else '✗'
        print(f"{status} Gradcheck: max rel err {report.max_rel_err:.3e} over {len(report.rows)} "
              f"coordinates ({len(report.skipped)} skipped)")
        return {'run_dir': run.dir, 'max_rel_err': report.max_rel_err,
                'mean_rel_err': report.mean_rel_err, 'checked': len(report.rows),
                'skipped': len(report.skipped), 'passes': passes}


def run_speed_pipeline(config, epsilon=None):
    """Steps to tolerance for the discrete dynamics versus epsilon-relaxation on one sample.

    Returns:
        dict: Summary with discrete_steps, relaxed_steps, ratio and warning.
    """
    epsilon = float(config['speed.epsilon'] if epsilon is None else epsilon)
    with _Run(config, 'speed') as run:
        params, _, x, _, cfg = _sample(config)
        discrete = run_free_phase(params, x, cfg)
        relaxed = run_relaxation_phase(params, x, cfg, epsilon)
        warning = None
        if not discrete.converged and not relaxed.converged:
            ratio = 1.0
            warning = f"neither dynamics reached tol={cfg.tol} within T={cfg.T} steps"
        else:
            ratio = relaxed.steps / discrete.steps
            if not relaxed.converged or not discrete.converged:
                warning = f"one dynamics hit T={cfg.T} steps; the ratio is a bound"
        if warning:
            print(f"Warning: {warning}")
        summary = {'epsilon': epsilon, 'discrete_steps': discrete.steps,
                   'relaxed_steps': relaxed.steps, 'discrete_converged': discrete.converged,
                   'relaxed_converged': relaxed.converged, 'ratio': ratio, 'warning': warning}
        with open(run.path(SPEED_SUMMARY_FILE), 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2)
        print(f"✓ Speed: {discrete.steps} discrete vs {relaxed.steps} relaxed steps "
              f"(ratio {ratio:.2f}, epsilon={epsilon:g})")
        return {'run_dir': run.dir, **summary}
