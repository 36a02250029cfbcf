"""Shared pytest fixtures for all test modules."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src directory to path to import modules
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from config import DEFAULT_CONFIG, HARD_SIGMOID, SHIFTED_SIGMOID  # noqa: E402
from dynamics import PhaseConfig  # noqa: E402
from energy_models import init_conv, init_dense  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_dense(rng):
    """Contracting 4-6-2 layered model."""
    return init_dense([4, 6, 2], rng, max_coupling_norm=0.8)


@pytest.fixture
def deep_dense(rng):
    """Contracting 4-5-6-2 chain (three state layers)."""
    return init_dense([4, 5, 6, 2], rng, max_coupling_norm=0.8)


@pytest.fixture
def flagship_dense():
    """10-20-5 model used for the step-by-step EP/BPTT comparison (W2 spectral norm 0.9)."""
    return init_dense([10, 20, 5], np.random.default_rng(7), max_coupling_norm=1.8)


@pytest.fixture
def tiny_conv(rng):
    """1x10x10 input -> conv(2, 3x3) -> pool 2 -> conv(3, 3x3) -> pool 2 -> dense 2."""
    return init_conv([1, 10, 10], [2, 3], 3, 2, [2], rng)


@pytest.fixture
def sample(rng):
    """One input of size 4 and a target of size 2."""
    return rng.uniform(0.0, 1.0, size=4), np.array([0.0, 1.0])


@pytest.fixture
def smooth_phase():
    return PhaseConfig(T=50, K=10, beta=0.1, eta=0.0, tol=1e-12, activation=SHIFTED_SIGMOID)


@pytest.fixture
def hard_phase():
    return PhaseConfig(T=100, K=12, beta=0.5, eta=0.0, tol=1e-8, activation=HARD_SIGMOID)


@pytest.fixture
def synthetic_config(tmp_path):
    """Resolved config for fast runs on the synthetic task, writing under tmp_path."""
    config = dict(DEFAULT_CONFIG)
    config.update({
        'model.sizes': [4, 6, 3],
        'model.activation': SHIFTED_SIGMOID,
        'model.max_coupling_norm': 0.8,
        'phase.T': 200,
        'phase.K': 5,
        'phase.beta': 0.1,
        'phase.tol': 1e-10,
        'train.epochs': 1,
        'train.batch_size': 4,
        'train.lr': 0.05,
        'train.early_abort_epochs': 0,
        'train.max_unconverged_fraction': 1.0,
        'data.kind': 'synthetic',
        'data.synthetic.n_train': 12,
        'data.synthetic.n_test': 6,
        'gdu.betas': [0.001],
        'gdu.etas': [0.0],
        'gradcheck.coords': 5,
        'output.root': str(tmp_path / "runs"),
    })
    return config
