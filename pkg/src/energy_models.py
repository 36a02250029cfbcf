"""Model families, their primitive function Phi, and the discrete dynamics built on it.

Three families share one parameter container (an ordered name -> ndarray map):

- LayeredDenseParams: W1..WN, b1..bN. W_k carries both the bottom-up
  (W_k s^{k-1}) and top-down (W_k^T s^k) signals.
- VectorFieldParams: forward W1..WN, backward B2..BN (B_k shaped like W_k^T),
  b1..bN. No primitive function exists for this family.
- ConvParams: conv stages K_k / c_k followed by dense layers W_k / b_k.

States are lists of arrays s^1..s^N; the input x is clamped and is not part of
the state. Every function accepts an optional leading batch axis.
"""

from dataclasses import dataclass, field, replace
from typing import ClassVar

import numpy as np

from config import FAMILY_CONV, FAMILY_LAYERED_DENSE, FAMILY_VECTOR_FIELD
from errors import ConfigError, ShapeError, UnsupportedModelError
from tensor_ops import (activate, as_tensor, avg_pool, avg_unpool, conv2d,
                        conv2d_kernel_grad, conv2d_transpose)


@dataclass
class ModelParams:
    """Ordered collection of named parameter tensors."""

    tensors: dict = field(default_factory=dict)
    family: ClassVar[str] = ''

    def names(self):
        return list(self.tensors)

    def copy(self):
        return replace(self, tensors={name: value.copy() for name, value in self.tensors.items()})

    def zeros_like(self):
        return replace(self, tensors={name: np.zeros_like(value) for name, value in self.tensors.items()})

    def map(self, fn):
        """Return params of the same family with fn applied to every tensor."""
        return replace(self, tensors={name: fn(value) for name, value in self.tensors.items()})

    def add_scaled(self, delta, scale):
        """Return self + scale * delta.

        Args:
            delta (ModelParams): Update of the same family; tensors missing from
                delta are left unchanged.
            scale (float | dict): One factor, or a factor per tensor name
                (names absent from the dict get 0).
        """
        updated = {}
        for name, value in self.tensors.items():
            if name not in delta.tensors:
                updated[name] = value
                continue
            factor = scale.get(name, 0.0) if isinstance(scale, dict) else scale
            updated[name] = value + factor * delta.tensors[name]
        return replace(self, tensors=updated)

    def is_finite(self):
        return all(np.all(np.isfinite(value)) for value in self.tensors.values())

    @property
    def num_layers(self):
        return sum(1 for name in self.tensors if name[0] in ('W', 'K'))


@dataclass
class LayeredDenseParams(ModelParams):
    family: ClassVar[str] = FAMILY_LAYERED_DENSE

    @property
    def weights(self):
        return [self.tensors[f'W{k}'] for k in range(1, self.num_layers + 1)]

    @property
    def biases(self):
        return [self.tensors[f'b{k}'] for k in range(1, self.num_layers + 1)]


@dataclass
class VectorFieldParams(ModelParams):
    family: ClassVar[str] = FAMILY_VECTOR_FIELD

    @property
    def forward(self):
        return [self.tensors[f'W{k}'] for k in range(1, self.num_layers + 1)]

    @property
    def backward(self):
        return [self.tensors[f'B{k}'] for k in range(2, self.num_layers + 1)]

    @property
    def biases(self):
        return [self.tensors[f'b{k}'] for k in range(1, self.num_layers + 1)]


@dataclass
class ConvParams(ModelParams):
    pool: int = 2
    family: ClassVar[str] = FAMILY_CONV

    @property
    def num_conv_stages(self):
        return sum(1 for name in self.tensors if name[0] == 'K')

    @property
    def kernels(self):
        return [self.tensors[f'K{k}'] for k in range(1, self.num_conv_stages + 1)]

    @property
    def dense_weights(self):
        return [self.tensors[f'W{k}'] for k in range(self.num_conv_stages + 1, self.num_layers + 1)]


PARAMS_BY_FAMILY = {
    FAMILY_LAYERED_DENSE: LayeredDenseParams,
    FAMILY_VECTOR_FIELD: VectorFieldParams,
    FAMILY_CONV: ConvParams,
}


def layer_index(name):
    """Layer number encoded in a tensor name ('W3' -> 3)."""
    return int(name[1:])


def _is_conv_layer(params, k):
    return isinstance(params, ConvParams) and 1 <= k <= params.num_conv_stages


def _input_is_image(params, k):
    """True when whatever feeds layer k (x or s^{k-1}) has C x H x W axes."""
    return isinstance(params, ConvParams) and (k == 1 or _is_conv_layer(params, k - 1))


# --- Shapes ---

def batch_shape(params, x):
    """Leading batch axes of x: () for a single sample."""
    x = as_tensor(x)
    if isinstance(params, ConvParams):
        return x.shape[:-3]
    return x.shape[:-1]


def batch_size(params, x):
    return int(np.prod(batch_shape(params, x), dtype=np.int64))


def layer_shapes(params, x):
    """Per-layer state shapes (without batch axes) for input x.

    Raises:
        ShapeError: If x does not fit the first layer.
    """
    x = as_tensor(x)
    if not isinstance(params, ConvParams):
        first = params.tensors['W1']
        if x.ndim not in (1, 2) or x.shape[-1] != first.shape[1]:
            raise ShapeError(f"input axis -1 has {x.shape[-1] if x.ndim else 0}, W1 expects {first.shape[1]}")
        return [(params.tensors[f'W{k}'].shape[0],) for k in range(1, params.num_layers + 1)]

    if x.ndim not in (3, 4):
        raise ShapeError(f"conv input must be C x H x W (optionally batched), got shape {x.shape}")
    shapes = []
    channels, height, width = x.shape[-3:]
    for kernel in params.kernels:
        if kernel.shape[1] != channels:
            raise ShapeError(f"channel axis mismatch: state has {channels}, kernel axis 1 has {kernel.shape[1]}")
        k = kernel.shape[-1]
        height = (height - k + 1) // params.pool
        width = (width - k + 1) // params.pool
        channels = kernel.shape[0]
        shapes.append((channels, height, width))
    flat = channels * height * width
    for weight in params.dense_weights:
        if weight.shape[1] != flat:
            raise ShapeError(f"dense weight axis 1 has {weight.shape[1]}, previous layer has {flat} units")
        shapes.append((weight.shape[0],))
        flat = weight.shape[0]
    return shapes


def zero_state(params, x):
    """All-zero state matching x's batch axes."""
    prefix = batch_shape(params, x)
    return [np.zeros(prefix + shape) for shape in layer_shapes(params, x)]


def copy_state(s):
    return [layer.copy() for layer in s]


def max_abs_diff(a, b):
    """Max-norm of the difference between two states."""
    return max(float(np.max(np.abs(la - lb))) if la.size else 0.0 for la, lb in zip(a, b))


def sample_max_abs_diff(params, x, a, b):
    """Max-norm of the state difference per batch sample (shape = batch axes)."""
    prefix = batch_shape(params, x)
    per_layer = [np.abs(la - lb).reshape(prefix + (-1,)).max(axis=-1) for la, lb in zip(a, b)]
    return np.max(np.stack(per_layer), axis=0)


def output(s):
    """The output layer y_hat = s^N."""
    return s[-1]


# --- Per-layer coupling terms ---

def _flatten_to(tensor, prefix):
    return tensor.reshape(prefix + (-1,))


def _bottom_up(params, k, lower):
    """Contribution of layer k-1 (or x for k = 1) to layer k's drive, without bias."""
    if _is_conv_layer(params, k):
        return avg_pool(conv2d(lower, params.tensors[f'K{k}']), params.pool)
    weight = params.tensors[f'W{k}']
    prefix = lower.shape[:-3] if _input_is_image(params, k) else lower.shape[:-1]
    return _flatten_to(lower, prefix) @ weight.T


def _top_down(params, k, upper, shape):
    """Contribution of layer k+1 to layer k's drive; shape is layer k's shape."""
    if isinstance(params, VectorFieldParams):
        return upper @ params.tensors[f'B{k + 1}'].T
    if _is_conv_layer(params, k + 1):
        return conv2d_transpose(avg_unpool(upper, params.pool), params.tensors[f'K{k + 1}'])
    projected = upper @ params.tensors[f'W{k + 1}']
    return projected.reshape(upper.shape[:-1] + shape)


def _bias(params, k):
    if _is_conv_layer(params, k):
        return params.tensors[f'c{k}'][:, None, None]
    return params.tensors[f'b{k}']


def pre_activations(x, s, params):
    """Drive of every layer before the activation.

    For LayeredDense and Conv this equals dPhi/ds; for VectorField it is the
    vector field W_k s^{k-1} + B_{k+1} s^{k+1} + b_k.
    """
    x = as_tensor(x)
    shapes = layer_shapes(params, x)
    n_layers = len(s)
    if n_layers != len(shapes):
        raise ShapeError(f"state has {n_layers} layers, model has {len(shapes)}")
    drive = []
    for k in range(1, n_layers + 1):
        lower = x if k == 1 else s[k - 2]
        u = _bottom_up(params, k, lower) + _bias(params, k)
        if k < n_layers:
            u = u + _top_down(params, k, s[k], shapes[k - 1])
        drive.append(u)
    return drive


def _require_primitive(params):
    if isinstance(params, VectorFieldParams):
        raise UnsupportedModelError(
            "vector-field dynamics do not derive from a primitive function Phi")


def phi(x, s, params):
    """Primitive function Phi(x, s, theta), summed over the batch.

    Raises:
        UnsupportedModelError: For VectorFieldParams.
    """
    _require_primitive(params)
    x = as_tensor(x)
    layer_shapes(params, x)
    total = 0.0
    for k in range(1, len(s) + 1):
        lower = x if k == 1 else s[k - 2]
        total += float(np.sum(s[k - 1] * (_bottom_up(params, k, lower) + _bias(params, k))))
    return total


def d_phi_d_s(x, s, params):
    """dPhi/ds, one array per layer (same shapes as s)."""
    _require_primitive(params)
    return pre_activations(x, s, params)


def _outer_sum(post, pre):
    """Sum over the batch of the outer products post (x) pre (dense layers)."""
    return np.atleast_2d(post).T @ np.atleast_2d(pre)


def _pair_terms(params, post, pre, with_bias):
    """Gradient of sum_k <post^k, bottom_up_k(pre^{k-1})> (+ bias terms) w.r.t. theta.

    pre[0] is what layer 1 sees (x, or None to skip layer 1's weight).
    """
    grads = {name: np.zeros_like(value) for name, value in params.tensors.items()}
    for k in range(1, len(post) + 1):
        lower = pre[k - 1]
        if _is_conv_layer(params, k):
            if lower is not None:
                grads[f'K{k}'] += conv2d_kernel_grad(avg_unpool(post[k - 1], params.pool), lower)
            if with_bias:
                grads[f'c{k}'] += post[k - 1].reshape((-1,) + post[k - 1].shape[-3:]).sum(axis=(0, 2, 3))
            continue
        if lower is not None:
            prefix = lower.shape[:-3] if _input_is_image(params, k) else lower.shape[:-1]
            grads[f'W{k}'] += _outer_sum(post[k - 1], lower.reshape(prefix + (-1,)))
        if with_bias:
            grads[f'b{k}'] += np.atleast_2d(post[k - 1]).sum(axis=0)
    return grads


def d_phi_d_theta(x, s, params):
    """dPhi/dtheta as params of the same family (summed over the batch).

    LayeredDense: dPhi/dW_k = s^k s^{k-1,T}, dPhi/db_k = s^k.
    Conv: dPhi/dK_k = unpool(s^k) * s^{k-1} arranged kernel-shaped.
    """
    _require_primitive(params)
    x = as_tensor(x)
    layer_shapes(params, x)
    pre = [x] + list(s[:-1])
    return replace(params, tensors=_pair_terms(params, s, pre, with_bias=True))


# --- Transposed-Jacobian products of the drive (used by the BPTT oracle) ---

def state_vjp(x, s, params, delta):
    """d<delta, pre_activations(x, s)>/ds, one array per layer.

    For LayeredDense and Conv the drive's Jacobian is the (symmetric) Hessian
    of Phi, so this is the coupling part of dPhi/ds evaluated at delta.
    """
    x = as_tensor(x)
    shapes = layer_shapes(params, x)
    n_layers = len(s)
    result = []
    for j in range(1, n_layers + 1):
        total = np.zeros_like(s[j - 1])
        if isinstance(params, VectorFieldParams):
            if j < n_layers:
                total = total + delta[j] @ params.tensors[f'W{j + 1}']
            if j > 1:
                total = total + delta[j - 2] @ params.tensors[f'B{j}']
        else:
            if j > 1:
                total = total + _bottom_up(params, j, delta[j - 2])
            if j < n_layers:
                total = total + _top_down(params, j, delta[j], shapes[j - 1])
        result.append(total)
    return result


def param_vjp(x, s, params, delta):
    """d<delta, pre_activations(x, s, theta)>/dtheta as params of the same family."""
    x = as_tensor(x)
    layer_shapes(params, x)
    pre = [x] + list(s[:-1])
    grads = _pair_terms(params, delta, pre, with_bias=True)
    if isinstance(params, VectorFieldParams):
        for k in range(2, len(s) + 1):
            grads[f'B{k}'] += _outer_sum(delta[k - 2], s[k - 1])
        return replace(params, tensors=grads)
    top_down = _pair_terms(params, s, [None] + list(delta[:-1]), with_bias=False)
    for name in grads:
        grads[name] += top_down[name]
    return replace(params, tensors=grads)


# --- Dynamics steps ---

def nudge(s, y, beta):
    """beta * (y - y_hat): minus beta times the gradient of 0.5 * ||y_hat - y||^2."""
    y = as_tensor(y)
    y_hat = output(s)
    if y.shape != y_hat.shape:
        raise ShapeError(f"target shape {y.shape} differs from output layer shape {y_hat.shape}")
    return beta * (y - y_hat)


def free_step(x, s, params, kind):
    """s_{t+1} = sigma(dPhi/ds(x, s_t, theta)) (vector field for VectorField)."""
    return [activate(u, kind) for u in pre_activations(x, s, params)]


def nudged_step(x, s, params, y, beta, kind):
    """free_step with beta * (y - y_hat) added to the output pre-activation."""
    drive = pre_activations(x, s, params)
    drive[-1] = drive[-1] + nudge(s, y, beta)
    return [activate(u, kind) for u in drive]


def loss(s, y):
    """l(s, y) = 0.5 * ||y_hat - y||^2, summed over the batch."""
    diff = output(s) - as_tensor(y)
    return 0.5 * float(np.sum(diff * diff))


def predict(s):
    """Predicted class per sample: argmax over the output layer."""
    return np.argmax(output(s), axis=-1)


# --- Initialisation ---

def _glorot(rng, shape, fan_in, fan_out, gain):
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _cap_spectral_norm(matrix, limit):
    norm = np.linalg.norm(matrix, 2)
    if norm > limit:
        return matrix * (limit / norm)
    return matrix


def init_dense(sizes, rng, gain=1.0, max_coupling_norm=None, family=FAMILY_LAYERED_DENSE):
    """Fan-based uniform init for LayeredDense or VectorField params.

    Args:
        sizes (list[int]): Input size followed by every layer size.
        rng (np.random.Generator): Source of randomness.
        gain (float): Multiplier on the uniform bound.
        max_coupling_norm (float | None): When set, every state-to-state
            coupling (W_k, k >= 2) is scaled to spectral norm <= this / 2, which
            makes the free dynamics a contraction for a 1-Lipschitz sigma.
        family (str): FAMILY_LAYERED_DENSE or FAMILY_VECTOR_FIELD.

    Returns:
        LayeredDenseParams | VectorFieldParams: Biases are zero; backward
            weights (VectorField) start as exact transposes of the forward ones.
    """
    if len(sizes) < 2:
        raise ConfigError(f"need an input size and at least one layer, got sizes {sizes}")
    tensors = {}
    for k in range(1, len(sizes)):
        n_out, n_in = int(sizes[k]), int(sizes[k - 1])
        weight = _glorot(rng, (n_out, n_in), n_in, n_out, gain)
        if max_coupling_norm is not None and k >= 2:
            weight = _cap_spectral_norm(weight, max_coupling_norm / 2.0)
        tensors[f'W{k}'] = weight
    for k in range(1, len(sizes)):
        tensors[f'b{k}'] = np.zeros(int(sizes[k]))
    if family == FAMILY_VECTOR_FIELD:
        for k in range(2, len(sizes)):
            tensors[f'B{k}'] = tensors[f'W{k}'].T.copy()
        return VectorFieldParams(tensors=tensors)
    return LayeredDenseParams(tensors=tensors)


def init_conv(input_shape, channels, kernel_size, pool, dense, rng, gain=1.0):
    """Fan-based init for the convolutional family.

    Raises:
        ConfigError: If a conv output is not divisible by the pooling window.
    """
    tensors = {}
    in_channels, height, width = (int(v) for v in input_shape)
    k = 0
    for out_channels in channels:
        k += 1
        conv_h, conv_w = height - kernel_size + 1, width - kernel_size + 1
        if conv_h < 1 or conv_w < 1 or conv_h % pool or conv_w % pool:
            raise ConfigError(
                f"conv stage {k}: output {conv_h}x{conv_w} not divisible by pool {pool}")
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        tensors[f'K{k}'] = _glorot(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                   fan_in, fan_out, gain)
        tensors[f'c{k}'] = np.zeros(out_channels)
        in_channels, height, width = out_channels, conv_h // pool, conv_w // pool
    n_in = in_channels * height * width
    for n_out in dense:
        k += 1
        tensors[f'W{k}'] = _glorot(rng, (n_out, n_in), n_in, n_out, gain)
        tensors[f'b{k}'] = np.zeros(n_out)
        n_in = n_out
    return ConvParams(tensors=tensors, pool=int(pool))


def init_from_config(config, rng):
    """Build freshly initialised params for the family named in config."""
    family = config['model.family']
    if family == FAMILY_CONV:
        return init_conv(config['model.conv.input_shape'], config['model.conv.channels'],
                         int(config['model.conv.kernel_size']), int(config['model.conv.pool']),
                         config['model.conv.dense'], rng, gain=float(config['model.init_gain']))
    return init_dense(config['model.sizes'], rng, gain=float(config['model.init_gain']),
                      max_coupling_norm=config['model.max_coupling_norm'], family=family)
