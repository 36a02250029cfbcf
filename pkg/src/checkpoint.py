"""Binary checkpoint container for model parameters.

Layout (all integers little-endian):
    b"EPCK" | u32 version | u8 family tag | u32 pool window | u32 tensor count
    per tensor: u8 name length | name (ASCII) | u8 ndim | ndim x u32 dims
    raw float64 (little-endian) data for every tensor, in declaration order
"""

import os
import struct

import numpy as np

from config import FAMILY_CONV, FAMILY_LAYERED_DENSE, FAMILY_VECTOR_FIELD
from energy_models import PARAMS_BY_FAMILY, ConvParams
from errors import FileFormatError

CHECKPOINT_MAGIC = b"EPCK"
CHECKPOINT_VERSION = 1
FAMILY_TAGS = {FAMILY_LAYERED_DENSE: 0, FAMILY_VECTOR_FIELD: 1, FAMILY_CONV: 2}
TAG_FAMILIES = {tag: family for family, tag in FAMILY_TAGS.items()}


def encode_checkpoint(params):
    """Serialise params to checkpoint bytes.

    Args:
        params (ModelParams): Parameters of any family.

    Returns:
        bytes: The encoded container.
    """
    pool = params.pool if isinstance(params, ConvParams) else 0
    header = [CHECKPOINT_MAGIC,
              struct.pack('<IBII', CHECKPOINT_VERSION, FAMILY_TAGS[params.family], pool,
                          len(params.tensors))]
    for name, value in params.tensors.items():
        encoded_name = name.encode('ascii')
        header.append(struct.pack('<B', len(encoded_name)) + encoded_name)
        header.append(struct.pack(f'<B{value.ndim}I', value.ndim, *value.shape))
    body = [np.ascontiguousarray(value, dtype='<f8').tobytes() for value in params.tensors.values()]
    return b''.join(header + body)


def _read(data, offset, fmt):
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise FileFormatError(f"checkpoint truncated at byte offset {offset}")
    return struct.unpack_from(fmt, data, offset), offset + size


def decode_checkpoint(data):
    """Parse checkpoint bytes back into params.

    Raises:
        FileFormatError: On a bad magic, unknown version/family, or truncation.
    """
    if data[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"bad checkpoint magic {data[:4]!r} at byte offset 0")
    (version, tag, pool, count), offset = _read(data, 4, '<IBII')
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"unsupported checkpoint version {version} at byte offset 4")
    if tag not in TAG_FAMILIES:
        raise FileFormatError(f"unknown model family tag {tag} at byte offset 8")

    table = []
    for _ in range(count):
        (name_len,), offset = _read(data, offset, '<B')
        if offset + name_len > len(data):
            raise FileFormatError(f"checkpoint truncated at byte offset {offset}")
        try:
            name = data[offset:offset + name_len].decode('ascii')
        except UnicodeDecodeError as e:
            raise FileFormatError(f"non-ASCII tensor name at byte offset {offset + e.start}") from e
        offset += name_len
        (ndim,), offset = _read(data, offset, '<B')
        dims, offset = _read(data, offset, f'<{ndim}I')
        table.append((name, tuple(dims)))

    tensors = {}
    for name, shape in table:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FileFormatError(f"checkpoint data for {name} truncated at byte offset {offset}")
        tensors[name] = np.frombuffer(data, dtype='<f8', count=nbytes // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes

    family = TAG_FAMILIES[tag]
    if family == FAMILY_CONV:
        return ConvParams(tensors=tensors, pool=pool)
    return PARAMS_BY_FAMILY[family](tensors=tensors)


def save_checkpoint(params, path):
    """Write params to path, creating parent directories.

    Returns:
        bool: True on success.

    Raises:
        OSError: With the path in the message if the file cannot be written.
    """
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    try:
        with open(path, 'wb') as f:
            f.write(encode_checkpoint(params))
    except OSError as e:
        raise OSError(f"Cannot write checkpoint {path}: {e}") from e
    print(f"✓ Checkpoint saved: {path} ({len(params.tensors)} tensors)")
    return True


def load_checkpoint(path):
    """Read params from a checkpoint file.

    Raises:
        FileNotFoundError: If path does not exist.
        FileFormatError: If the content is malformed.
    """
    with open(path, 'rb') as f:
        data = f.read()
    return decode_checkpoint(data)
