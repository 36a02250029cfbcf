"""Configuration loading from a local JSON file, plus shared constants."""

import json
import math

from errors import ConfigError

VERSION_TAG = "pyeqprop-1.0.0"

# --- Model families / activations ---
FAMILY_LAYERED_DENSE = 'layered_dense'
FAMILY_VECTOR_FIELD = 'vector_field'
FAMILY_CONV = 'conv'
FAMILIES = (FAMILY_LAYERED_DENSE, FAMILY_VECTOR_FIELD, FAMILY_CONV)

HARD_SIGMOID = 'hard_sigmoid'
SHIFTED_SIGMOID = 'shifted_sigmoid'
ACTIVATIONS = (HARD_SIGMOID, SHIFTED_SIGMOID)

ALGORITHMS = ('ep', 'cep', 'cvf', 'bptt')

# --- Output files ---
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "final.epck"
EPOCH_CHECKPOINT_PATTERN = "epoch-{epoch:03d}.epck"
GDU_CSV_FILE = "gdu.csv"
GDU_SUMMARY_FILE = "gdu-summary.json"
GRADCHECK_CSV_FILE = "gradcheck.csv"
SPEED_SUMMARY_FILE = "speed.json"
TEACHER_CHECKPOINT_FILE = "synthetic-teacher.epck"
RUN_DIR_TIME_FORMAT = '%Y%m%dT%H%M%S'

# --- CSV headers ---
METRICS_CSV_COLUMNS = ['epoch', 'train_err', 'test_err', 'mean_free_steps', 'wall_ms']
TRAJECTORY_CSV_COLUMNS = ['step', 'layer', 'neuron_index', 'value']
GDU_CSV_COLUMNS = ['tensor', 'coord_index', 't', 'ep_value', 'minus_bptt_value']
GRADCHECK_CSV_COLUMNS = ['tensor', 't', 'coordinate', 'analytic', 'numeric', 'rel_err']

# --- Numerical constants ---
GDU_EPS0 = 1e-30
GDU_ZERO_TOL = 1e-9
# EP remainder allowed where BPTT is exactly zero, in units of |beta| * process scale
GDU_RESIDUAL_FACTOR = 10.0
GRADCHECK_H_RANGE = (1e-7, 1e-4)
GDU_CSV_COORDS_PER_TENSOR = 8
GDU_CSV_SEED = 1234
GRADCHECK_REL_ERR_FLOOR = 1e-4
CHANCE_FRACTION_FOR_ABORT = 0.9

# --- Exit codes ---
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ABORT = 3
EXIT_THRESHOLD_FAILED = 4

DEFAULT_CONFIG = {
    'seed': 0,
    'model.family': FAMILY_LAYERED_DENSE,
    'model.sizes': [784, 512, 10],
    'model.activation': HARD_SIGMOID,
    'model.init_gain': 1.0,
    'model.max_coupling_norm': None,
    'model.conv.input_shape': [1, 28, 28],
    'model.conv.channels': [32, 64],
    'model.conv.kernel_size': 5,
    'model.conv.pool': 2,
    'model.conv.dense': [10],
    'phase.T': 100,
    'phase.K': 12,
    'phase.beta': 0.5,
    'phase.eta': 0.0,
    'phase.tol': 1e-4,
    'train.epochs': 30,
    'train.batch_size': 20,
    'train.lr': [0.08, 0.04],
    'train.eta': None,
    'train.max_unconverged_fraction': 0.5,
    'train.early_abort_epochs': 5,
    'train.checkpoint_every': 0,
    'data.kind': 'mnist',
    'data.train_images': 'data/train-images-idx3-ubyte',
    'data.train_labels': 'data/train-labels-idx1-ubyte',
    'data.test_images': 'data/t10k-images-idx3-ubyte',
    'data.test_labels': 'data/t10k-labels-idx1-ubyte',
    'data.n_train': 1000,
    'data.n_test': 1000,
    'data.synthetic.n_train': 64,
    'data.synthetic.n_test': 64,
    'gdu.betas': [0.001],
    'gdu.etas': [0.0],
    'gdu.sample_index': 0,
    'gdu.cosine_threshold': 0.999,
    'gdu.rel_mse_threshold': 1e-3,
    'gradcheck.h': 1e-5,
    'gradcheck.coords': 20,
    'gradcheck.threshold': 1e-5,
    'speed.epsilon': 0.1,
    'cvf.angle': 0.0,
    'cvf.gdu_samples': 4,
    'cvf.gdu_beta': 1e-3,
    'output.root': 'runs',
}


def flatten_config(data, prefix=''):
    """Flatten nested dicts into dotted keys; already-dotted keys pass through.

    Args:
        data (dict): Possibly nested configuration mapping.
        prefix (str): Key prefix used during recursion.

    Returns:
        dict: Flat mapping of dotted keys to leaf values.
    """
    flat = {}
    for key, value in data.items():
        full_key = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_config(value, prefix=f"{full_key}."))
        else:
            flat[full_key] = value
    return flat


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


def validate_config(config):
    """Check value ranges of a resolved configuration.

    Args:
        config (dict): Flat configuration with every DEFAULT_CONFIG key.

    Raises:
        ConfigError: On the first invalid value found.
    """
    _require(config['model.family'] in FAMILIES,
             f"model.family must be one of {FAMILIES}, got {config['model.family']!r}")
    _require(config['model.activation'] in ACTIVATIONS,
             f"model.activation must be one of {ACTIVATIONS}, got {config['model.activation']!r}")
    sizes = config['model.sizes']
    _require(isinstance(sizes, list) and len(sizes) >= 2 and all(int(n) >= 1 for n in sizes),
             f"model.sizes must list at least two positive layer sizes, got {sizes!r}")
    _require(int(config['phase.T']) >= 1, f"phase.T must be >= 1, got {config['phase.T']}")
    _require(int(config['phase.K']) >= 0, f"phase.K must be >= 0, got {config['phase.K']}")
    _require(float(config['phase.tol']) > 0, f"phase.tol must be > 0, got {config['phase.tol']}")
    _require(float(config['phase.beta']) != 0.0, "phase.beta must be non-zero")
    _require(float(config['phase.eta']) >= 0.0, f"phase.eta must be >= 0, got {config['phase.eta']}")
    _require(int(config['train.epochs']) >= 0, f"train.epochs must be >= 0, got {config['train.epochs']}")
    _require(int(config['train.batch_size']) >= 1,
             f"train.batch_size must be >= 1, got {config['train.batch_size']}")
    for key in ('train.lr', 'train.eta'):
        value = config[key]
        if value is None:
            continue
        rates = value if isinstance(value, list) else [value]
        _require(all(float(r) >= 0 for r in rates), f"{key} must be non-negative, got {value!r}")
    _require(0.0 <= float(config['cvf.angle']) <= 90.0,
             f"cvf.angle must be within [0, 90] degrees, got {config['cvf.angle']}")
    _require(config['data.kind'] in ('mnist', 'synthetic'),
             f"data.kind must be 'mnist' or 'synthetic', got {config['data.kind']!r}")
    betas = config['gdu.betas']
    _require(isinstance(betas, list) and betas and all(float(b) > 0 for b in betas),
             f"gdu.betas must be a non-empty list of positive values, got {betas!r}")
    h_low, h_high = GRADCHECK_H_RANGE
    _require(h_low <= float(config['gradcheck.h']) <= h_high,
             f"gradcheck.h must be within [{h_low:g}, {h_high:g}], got {config['gradcheck.h']}")
    _require(float(config['speed.epsilon']) > 0 and math.isfinite(float(config['speed.epsilon'])),
             "speed.epsilon must be a positive finite number")


def load_config_from_file(config_file='config.json'):
    """Load a flat (or nested) JSON config and merge it over DEFAULT_CONFIG.

    Args:
        config_file (str): Path to the JSON configuration file.

    Returns:
        dict: Resolved flat configuration.

    Raises:
        FileNotFoundError: If the file does not exist (includes a usage example).
        ConfigError: If the file is not valid JSON, has unknown keys, or invalid values.
    """
    try:
        with open(config_file, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except FileNotFoundError:
        sample_config = {
            'seed': 0,
            'model.sizes': [784, 512, 10],
            'phase.beta': 0.5,
            'train.epochs': 30,
            'data.train_images': 'data/train-images-idx3-ubyte',
        }
        error_msg = (
            f"File {config_file} does not exist.\n"
            "Create a JSON config with dotted keys, for example:\n"
            f"{json.dumps(sample_config, indent=2)}"
        )
        raise FileNotFoundError(error_msg)
    except json.JSONDecodeError as e:
        raise ConfigError(f"File {config_file} is not valid JSON: {e}") from e

    if not isinstance(raw, dict):
        raise ConfigError(f"File {config_file} must contain a JSON object")

    return resolve_config(flatten_config(raw), source=config_file)


def resolve_config(overrides, source='overrides'):
    """Merge flat overrides over DEFAULT_CONFIG and validate the result.

    Args:
        overrides (dict): Flat dotted-key values.
        source (str): Where the overrides came from, used in error messages.

    Returns:
        dict: Resolved flat configuration.

    Raises:
        ConfigError: On unknown keys or invalid values.
    """
    unknown = sorted(set(overrides) - set(DEFAULT_CONFIG))
    if unknown:
        raise ConfigError(f"Unknown config key(s) in {source}: {', '.join(unknown)}")
    config = dict(DEFAULT_CONFIG)
    config.update(overrides)
    validate_config(config)
    return config


def parse_override(pair):
    """Parse one ``key=value`` CLI override; the value is read as JSON when possible.

    Args:
        pair (str): Text of the form ``dotted.key=value``.

    Returns:
        tuple[str, object]: The key and its parsed value.

    Raises:
        ConfigError: If the text has no ``=``.
    """
    if '=' not in pair:
        raise ConfigError(f"Override {pair!r} must look like key=value")
    key, text = pair.split('=', 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key.strip(), value


def apply_overrides(config, overrides):
    """Return a copy of config with overrides applied in order (last wins).

    Args:
        config (dict): Resolved configuration.
        overrides (list[tuple[str, object]]): (key, value) pairs.

    Returns:
        dict: New resolved and validated configuration.
    """
    merged = {key: value for key, value in config.items() if key in DEFAULT_CONFIG}
    for key, value in overrides:
        merged[key] = value
    return resolve_config(merged, source='command line')
