"""Activation functions and the valid-convolution / average-pooling kernels.

Tensors are float64 numpy arrays. Convolution and pooling take an optional
leading batch axis: ``(C, H, W)`` or ``(B, C, H, W)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import HARD_SIGMOID, SHIFTED_SIGMOID
from errors import ShapeError

SHIFTED_SIGMOID_GAIN = 4.0


def as_tensor(values):
    """Return values as a float64 numpy array (no copy when already float64)."""
    return np.asarray(values, dtype=np.float64)


def activate(u, kind):
    """Apply the activation elementwise.

    Args:
        u (np.ndarray): Pre-activations.
        kind (str): HARD_SIGMOID or SHIFTED_SIGMOID.

    Returns:
        np.ndarray: sigma(u), same shape as u.
    """
    u = as_tensor(u)
    if kind == HARD_SIGMOID:
        return np.clip(u, 0.0, 1.0)
    if kind == SHIFTED_SIGMOID:
        return 1.0 / (1.0 + np.exp(-SHIFTED_SIGMOID_GAIN * (u - 0.5)))
    raise ValueError(f"Unknown activation {kind!r}")


def activate_prime(u, kind):
    """Elementwise derivative of the activation.

    HardSigmoid's derivative is exactly 1 on the open interval (0, 1) and 0
    elsewhere, kinks included.
    """
    u = as_tensor(u)
    if kind == HARD_SIGMOID:
        return ((u > 0.0) & (u < 1.0)).astype(np.float64)
    if kind == SHIFTED_SIGMOID:
        s = activate(u, SHIFTED_SIGMOID)
        return SHIFTED_SIGMOID_GAIN * s * (1.0 - s)
    raise ValueError(f"Unknown activation {kind!r}")


def _check_conv_shapes(x, kernels):
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be F x C x k x k, got shape {kernels.shape}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"input must be C x H x W (optionally batched), got shape {x.shape}")
    _, channels, k_h, k_w = kernels.shape
    if k_h != k_w:
        raise ShapeError(f"kernels must be square, got axes 2 and 3 = ({k_h}, {k_w})")
    if x.shape[-3] != channels:
        raise ShapeError(
            f"channel axis mismatch: input axis -3 has {x.shape[-3]}, kernel axis 1 has {channels}")
    if k_h > x.shape[-2] or k_w > x.shape[-1]:
        raise ShapeError(
            f"kernel {k_h}x{k_w} larger than input spatial axes {x.shape[-2]}x{x.shape[-1]}")


def conv2d(x, kernels):
    """Valid (no padding), stride-1 cross-correlation.

    Args:
        x (np.ndarray): Input, C x H x W or B x C x H x W.
        kernels (np.ndarray): F x C x k x k.

    Returns:
        np.ndarray: F x (H-k+1) x (W-k+1), batched like x.

    Raises:
        ShapeError: On channel mismatch or a kernel larger than the input.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    _check_conv_shapes(x, kernels)
    k = kernels.shape[-1]
    windows = sliding_window_view(x, (k, k), axis=(-2, -1))
    return np.einsum('...chwij,fcij->...fhw', windows, kernels)


def conv2d_transpose(y, kernels):
    """Adjoint of conv2d with respect to its input.

    Satisfies <conv2d(x, K), y> == <x, conv2d_transpose(y, K)>.

    Args:
        y (np.ndarray): F x H' x W' (optionally batched).
        kernels (np.ndarray): F x C x k x k.

    Returns:
        np.ndarray: C x (H'+k-1) x (W'+k-1), batched like y.
    """
    y = as_tensor(y)
    kernels = as_tensor(kernels)
    if y.shape[-3] != kernels.shape[0]:
        raise ShapeError(
            f"feature axis mismatch: input axis -3 has {y.shape[-3]}, kernel axis 0 has {kernels.shape[0]}")
    k = kernels.shape[-1]
    pad = [(0, 0)] * (y.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
    padded = np.pad(y, pad)
    windows = sliding_window_view(padded, (k, k), axis=(-2, -1))
    return np.einsum('...fhwij,fcij->...chw', windows, kernels[:, :, ::-1, ::-1])


def conv2d_kernel_grad(y, x):
    """Gradient of <y, conv2d(x, K)> with respect to K, summed over the batch.

    Args:
        y (np.ndarray): F x H' x W' (optionally batched).
        x (np.ndarray): C x H x W, batched like y.

    Returns:
        np.ndarray: F x C x k x k with k = H - H' + 1.
    """
    y = as_tensor(y)
    x = as_tensor(x)
    if y.shape[:-3] != x.shape[:-3]:
        raise ShapeError(f"batch axes differ: {y.shape[:-3]} vs {x.shape[:-3]}")
    k = x.shape[-2] - y.shape[-2] + 1
    if k < 1 or x.shape[-1] - y.shape[-1] + 1 != k:
        raise ShapeError(
            f"spatial axes inconsistent: input {x.shape[-2:]} vs output {y.shape[-2:]}")
    windows = sliding_window_view(x, (k, k), axis=(-2, -1))
    if y.ndim == 4:
        return np.einsum('bfhw,bchwij->fcij', y, windows)
    return np.einsum('fhw,chwij->fcij', y, windows)


def avg_pool(x, window):
    """Non-overlapping average pooling over the last two axes.

    Raises:
        ShapeError: If H or W is not divisible by window.
    """
    x = as_tensor(x)
    height, width = x.shape[-2], x.shape[-1]
    if height % window or width % window:
        raise ShapeError(
            f"spatial axes ({height}, {width}) not divisible by pooling window {window}")
    blocks = x.reshape(x.shape[:-2] + (height // window, window, width // window, window))
    return blocks.mean(axis=(-3, -1))


def avg_unpool(y, window):
    """Adjoint of avg_pool: replicate each value into its window, divided by window**2."""
    y = as_tensor(y)
    expanded = np.repeat(np.repeat(y, window, axis=-2), window, axis=-1)
    return expanded / float(window * window)


def inner(a, b):
    """Frobenius inner product of two same-shape tensors."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"inner product of mismatched shapes {a.shape} and {b.shape}")
    return float(np.sum(a * b))
