"""Dataset loading: MNIST IDX files, stratified subsets, and a synthetic teacher task."""

import struct
from dataclasses import dataclass, replace

import numpy as np

from config import FAMILY_CONV, SHIFTED_SIGMOID
from energy_models import LayeredDenseParams
from errors import ConfigError, FileFormatError, IntegrityError
from tensor_ops import activate

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NUM_CLASSES = 10


@dataclass
class Dataset:
    """Inputs and targets of one split.

    For MNIST the targets are one-hot rows; for the synthetic task they are
    teacher outputs in [0, 1] and the class is their argmax.
    """

    inputs: np.ndarray
    labels: np.ndarray
    name: str = ''
    split: str = ''
    teacher: LayeredDenseParams = None

    def __len__(self):
        return int(self.inputs.shape[0])

    @property
    def classes(self):
        return np.argmax(self.labels, axis=-1)

    @property
    def num_classes(self):
        return int(self.labels.shape[-1])

    def take(self, indices):
        return replace(self, inputs=self.inputs[indices], labels=self.labels[indices])

    def as_images(self, shape):
        """Same data with every input reshaped to (C, H, W)."""
        shape = tuple(int(v) for v in shape)
        if int(np.prod(shape)) != self.inputs[0].size:
            raise ConfigError(f"cannot view {self.inputs[0].size} input values as image shape {shape}")
        return replace(self, inputs=self.inputs.reshape((len(self),) + shape))


def _read_header(data, path, magic, fields):
    """Unpack the big-endian u32 header; magic sits at offset 0."""
    size = 4 * (1 + fields)
    if len(data) < size:
        raise FileFormatError(f"{path}: header truncated at byte offset {len(data)} (need {size} bytes)")
    values = struct.unpack_from(f'>{1 + fields}I', data, 0)
    if values[0] != magic:
        raise FileFormatError(
            f"{path}: bad magic number 0x{values[0]:08x} at byte offset 0 (expected 0x{magic:08x})")
    return values[1:], size


def _read_body(data, path, offset, count):
    if len(data) < offset + count:
        raise FileFormatError(
            f"{path}: data truncated at byte offset {len(data)} (expected {offset + count} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)


def _read_file(path):
    with open(path, 'rb') as f:
        return f.read()


def load_idx(images_path, labels_path, name='mnist', split=''):
    """Parse an IDX image file and its IDX label file.

    Args:
        images_path (str): IDX3 file (magic 0x00000803).
        labels_path (str): IDX1 file (magic 0x00000801).

    Returns:
        Dataset: inputs N x (rows * cols) scaled by 1/255, one-hot labels N x 10.

    Raises:
        FileNotFoundError: If a file is missing.
        FileFormatError: Bad magic, truncation, or a label outside 0..9.
        IntegrityError: If the two files hold different counts.
    """
    image_bytes = _read_file(images_path)
    label_bytes = _read_file(labels_path)

    (n_images, rows, cols), offset = _read_header(image_bytes, images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), label_offset = _read_header(label_bytes, labels_path, IDX_LABELS_MAGIC, 1)
    if n_images != n_labels:
        raise IntegrityError(
            f"{images_path} holds {n_images} images but {labels_path} holds {n_labels} labels")

    pixels = _read_body(image_bytes, images_path, offset, n_images * rows * cols)
    labels = _read_body(label_bytes, labels_path, label_offset, n_labels)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise FileFormatError(
            f"{labels_path}: label {labels[bad[0]]} at byte offset {label_offset + int(bad[0])} is not a digit")

    inputs = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    one_hot = np.zeros((n_labels, NUM_CLASSES))
    one_hot[np.arange(n_labels), labels] = 1.0
    print(f"✓ Loaded {n_images} {split or name} samples from {images_path}")
    return Dataset(inputs=inputs, labels=one_hot, name=name, split=split)


def _quotas(counts, n, rng):
    """Per-class sample counts summing to n, as even as availability allows."""
    num = len(counts)
    quotas = np.full(num, n // num)
    for c in rng.permutation(num)[:n - quotas.sum()]:
        quotas[c] += 1
    quotas = np.minimum(quotas, counts)
    while quotas.sum() < n:
        spare = np.flatnonzero(quotas < counts)
        for c in spare[rng.permutation(spare.size)][:n - quotas.sum()]:
            quotas[c] += 1
    return quotas


def subset(dataset, n, seed):
    """Class-stratified sample of n items, deterministic under seed.

    n equal to the dataset size returns a permutation of everything.

    Raises:
        ConfigError: If n < 10 or n exceeds the dataset size.
    """
    total = len(dataset)
    if n < NUM_CLASSES:
        raise ConfigError(f"subset size {n} is too small to stratify over {NUM_CLASSES} classes")
    if n > total:
        raise ConfigError(f"subset size {n} exceeds the {total} available samples")
    rng = np.random.default_rng(seed)
    if n == total:
        return dataset.take(rng.permutation(total))

    classes = dataset.classes
    counts = np.bincount(classes, minlength=dataset.num_classes)
    quotas = _quotas(counts, n, rng)
    chosen = [rng.choice(np.flatnonzero(classes == c), size=int(q), replace=False)
              for c, q in enumerate(quotas) if q]
    return dataset.take(rng.permutation(np.concatenate(chosen)))


def synthetic_targets(teacher, inputs, kind=SHIFTED_SIGMOID):
    """Teacher outputs sigma(W x + b) for every input row."""
    return activate(inputs @ teacher.tensors['W1'].T + teacher.tensors['b1'], kind)


def synthetic_linked(n, in_dim, out_dim, seed, kind=SHIFTED_SIGMOID, teacher=None, split=''):
    """Random inputs in [0, 1] labelled by a fixed random one-layer teacher.

    Args:
        n (int): Number of samples.
        in_dim (int): Input size.
        out_dim (int): Target size.
        seed (int): Seed for the teacher (when drawn) and the inputs.
        kind (str): Activation applied to the teacher's output.
        teacher (LayeredDenseParams | None): Reuse a teacher (e.g. for the test split).

    Raises:
        ConfigError: If a dimension is < 1.
    """
    if n < 1 or in_dim < 1 or out_dim < 1:
        raise ConfigError(f"synthetic dims must be >= 1, got n={n}, in={in_dim}, out={out_dim}")
    rng = np.random.default_rng(seed)
    if teacher is None:
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        teacher = LayeredDenseParams(tensors={
            'W1': rng.uniform(-bound, bound, size=(out_dim, in_dim)),
            'b1': rng.uniform(-0.5, 0.5, size=out_dim),
        })
    inputs = rng.uniform(0.0, 1.0, size=(n, in_dim))
    return Dataset(inputs=inputs, labels=synthetic_targets(teacher, inputs, kind),
                   name='synthetic', split=split, teacher=teacher)


def load_datasets(config):
    """Build (train, test) from the data.* keys of a resolved config.

    MNIST subsets are drawn with the run seed; conv models get image-shaped inputs.
    """
    seed = int(config['seed'])
    if config['data.kind'] == 'synthetic':
        sizes = config['model.sizes']
        kind = config['model.activation']
        train = synthetic_linked(int(config['data.synthetic.n_train']), int(sizes[0]), int(sizes[-1]),
                                 seed, kind=kind, split='train')
        test = synthetic_linked(int(config['data.synthetic.n_test']), int(sizes[0]), int(sizes[-1]),
                                seed + 1, kind=kind, teacher=train.teacher, split='test')
    else:
        train = subset(load_idx(config['data.train_images'], config['data.train_labels'], split='train'),
                       int(config['data.n_train']), seed)
        test = subset(load_idx(config['data.test_images'], config['data.test_labels'], split='test'),
                      int(config['data.n_test']), seed)
    if config['model.family'] == FAMILY_CONV:
        shape = config['model.conv.input_shape']
        train, test = train.as_images(shape), test.as_images(shape)
    return train, test
