"""
Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op below is "registered": it computes its forward value with numpy,
checks it is finite, and (when gradients are enabled and an input requires
them) records a closure that maps the output gradient to one gradient per
input. `Tensor.backward()` walks the tape in reverse topological order.

There is no general broadcasting. Elementwise ops demand identical shapes
and raise ShapeError otherwise; bias addition is the only op that expands
a vector along the channel axis.

Two thread-local switches change how the tape behaves:

* `no_grad()` records nothing (evaluation, finite-difference probes).
* `surrogate_forward()` makes the non-differentiable ops (spike firing,
  sign quantization) emit the smooth function whose derivative their
  backward pass uses, so finite differences can check the surrogate.
"""
import hashlib
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DomainError, NonFiniteError, ShapeError, SpikeHarqError

logger = logging.getLogger(__name__)

GROUP_TAGS = ('mu', 'lambda', 'alpha', 'beta', 'gamma', 'omega', 'phi')
MAX_CHECK_ENTRIES = 10_000

_mode = threading.local()


def is_grad_enabled():
    return getattr(_mode, 'grad_enabled', True)


def is_surrogate_forward():
    return getattr(_mode, 'surrogate', False)


@contextmanager
def no_grad():
    previous = is_grad_enabled()
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


@contextmanager
def surrogate_forward():
    previous = is_surrogate_forward()
    _mode.surrogate = True
    try:
        yield
    finally:
        _mode.surrogate = previous


class Tensor:
    __slots__ = ('data', 'grad', 'requires_grad', 'op', '_parents', '_backward')

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = 'leaf'
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError('item', self.shape, ())
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into `.grad` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError('backward', self.shape, ())
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError('backward', self.shape, grad.shape)

        pending = {id(self): grad}
        for node in reversed(_topological_order(self)):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.shape:
                    raise ShapeError(f"{node.op} backward", parent.shape, parent_grad.shape)
                _check_finite(f"{node.op} backward", parent_grad)
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + parent_grad
                else:
                    pending[id(parent)] = parent_grad


def _as_tensor(value, shape):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=np.float64), shape))


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _check_finite(where, values):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(where)


def _record(op, data, parents, backward):
    _check_finite(op, data)
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# Registered ops
# ---------------------------------------------------------------------------

def linear(x, weight):
    """x (N, in) times weight (out, in) transposed -> (N, out)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError('linear', x.shape, weight.shape)

    def backward(g):
        return g @ weight.data, g.T @ x.data

    return _record('linear', x.data @ weight.data.T, (x, weight), backward)


def conv2d(x, weight):
    """Stride-1 'same' convolution of x (N, C, H, W) with weight (O, C, k, k), k in {1, 3}."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError('conv2d', x.shape, weight.shape)
    k = weight.shape[2]
    if k not in (1, 3) or weight.shape[3] != k:
        raise ShapeError('conv2d', weight.shape, (weight.shape[0], weight.shape[1], 3, 3))
    pad = (k - 1) // 2

    def windows(a):
        padded = np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        return sliding_window_view(padded, (k, k), axis=(2, 3))

    x_windows = windows(x.data)
    out = np.tensordot(x_windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        grad_w = np.tensordot(g, x_windows, axes=([0, 2, 3], [0, 2, 3]))
        flipped = weight.data[:, :, ::-1, ::-1]
        grad_x = np.tensordot(windows(g), flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return grad_x, grad_w

    return _record('conv2d', np.ascontiguousarray(out), (x, weight), backward)


def add_bias(x, bias):
    """Add a per-channel bias (C,) along axis 1 of x (N, C, ...)."""
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError('add_bias', x.shape, bias.shape)
    expand = (1, -1) + (1,) * (x.data.ndim - 2)
    reduce_axes = tuple(a for a in range(x.data.ndim) if a != 1)

    def backward(g):
        return g, g.sum(axis=reduce_axes)

    return _record('add_bias', x.data + bias.data.reshape(expand), (x, bias), backward)


def add(a, b):
    _same_shape('add', a, b)
    return _record('add', a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape('sub', a, b)
    return _record('sub', a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape('mul', a, b)

    def backward(g):
        return g * b.data, g * a.data

    return _record('mul', a.data * b.data, (a, b), backward)


def scale(x, factor):
    return _record('scale', x.data * factor, (x,), lambda g: (g * factor,))


def _sigmoid(z):
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)
    return _record('sigmoid', s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x):
    mask = x.data > 0
    return _record('relu', np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def mean(x, axis=None):
    """Mean over all entries (axis=None, scalar result) or over the given axes."""
    axes = tuple(range(x.data.ndim)) if axis is None else tuple(int(a) for a in np.atleast_1d(axis))
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return _record('mean', np.asarray(x.data.mean(axis=axes)), (x,), backward)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError('global_avg_pool', x.shape, ('N', 'C', 'H', 'W'))
    return mean(x, axis=(2, 3))


def avg_pool2(x):
    """Non-overlapping 2x2 average pooling of (N, C, H, W) with even H, W."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError('avg_pool2', x.shape, (n, c, h - h % 2, w - w % 2))
    pooled = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _record('avg_pool2', pooled, (x,), backward)


def concat(tensors, axis=1):
    tensors = list(tensors)
    ref = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != ref.data.ndim or any(
                t.shape[a] != ref.shape[a] for a in range(ref.data.ndim) if a != axis):
            raise ShapeError('concat', ref.shape, t.shape)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record('concat', np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_channels(x, start, stop):
    """Slice channels [start, stop) along axis 1."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError('take_channels', x.shape, (start, stop))

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record('take_channels', x.data[:, start:stop].copy(), (x,), backward)


def zero_pad(x, length, axis=1):
    """Append zeros along `axis` until it has `length` entries."""
    current = x.shape[axis]
    if length < current:
        raise ShapeError('zero_pad', x.shape, (length,))
    widths = [(0, 0)] * x.data.ndim
    widths[axis] = (0, length - current)

    def backward(g):
        return (np.take(g, np.arange(current), axis=axis),)

    return _record('zero_pad', np.pad(x.data, widths), (x,), backward)


def reshape(x, shape):
    shape = tuple(shape)
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', original, shape)
    return _record('reshape', out, (x,), lambda g: (g.reshape(original),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits (N, K)) against integer labels (N,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError('softmax_cross_entropy', logits.shape, labels.shape)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _record('softmax_cross_entropy', np.asarray(loss), (logits,), backward)


def squared_error(pred, target):
    """Mean of (pred - target)^2; target may be a Tensor or a constant array."""
    target = _as_tensor(target, pred.shape)
    _same_shape('squared_error', pred, target)
    diff = pred.data - target.data
    count = diff.size

    def backward(g):
        return g * 2.0 * diff / count, -g * 2.0 * diff / count

    return _record('squared_error', np.asarray(np.mean(diff ** 2)), (pred, target), backward)


ENTROPY_EPS = 1e-6


def binary_entropy(q):
    """Elementwise H(q) in bits, H(0) = H(1) = 0."""
    qd = q.data
    with np.errstate(divide='ignore', invalid='ignore'):
        h = -(qd * np.log2(qd) + (1.0 - qd) * np.log2(1.0 - qd))
    h = np.where((qd <= 0.0) | (qd >= 1.0), 0.0, h)
    clipped = np.clip(qd, ENTROPY_EPS, 1.0 - ENTROPY_EPS)

    def backward(g):
        return (g * np.log2((1.0 - clipped) / clipped),)

    return _record('binary_entropy', h, (q,), backward)


def spike_fire(membrane, v_th, k):
    """
    Heaviside firing s = [m > v_th] with sigmoid surrogate gradient
    k * sigma(k (m - v_th)) * (1 - sigma(k (m - v_th))).
    """
    z = k * (membrane.data - v_th)
    s = _sigmoid(z)
    out = s if is_surrogate_forward() else (membrane.data > v_th).astype(np.float64)

    def backward(g):
        return (g * k * s * (1.0 - s),)

    return _record('spike_fire', out, (membrane,), backward)


def fire_surrogate_grad(membrane, v_th, k):
    """Surrogate derivative of the firing step at the given membrane values."""
    s = _sigmoid(k * (np.asarray(membrane, dtype=np.float64) - v_th))
    return k * s * (1.0 - s)


def sign_quantize(x):
    """1-bit quantizer: bit = [x > 0]; straight-through gradient where |x| <= 1."""
    inside = np.abs(x.data) <= 1.0
    if is_surrogate_forward():
        out = np.clip(x.data, -1.0, 1.0)
    else:
        out = (x.data > 0).astype(np.float64)
    return _record('sign_quantize', out, (x,), lambda g: (g * inside,))


def clamp(x, low, high):
    inside = (x.data > low) & (x.data < high)
    return _record('clamp', np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


def flip_bits(bits, flip_mask):
    """
    Apply a channel flip pattern to a bit tensor. Flipped positions move
    1 -> 0 or 0 -> 1; the gradient passes straight through.
    """
    flip_mask = np.asarray(flip_mask, dtype=np.float64)
    if flip_mask.shape != bits.shape:
        raise ShapeError('flip_bits', bits.shape, flip_mask.shape)
    direction = 1.0 - 2.0 * (bits.data > 0.5)
    return _record('flip_bits', bits.data + flip_mask * direction, (bits,), lambda g: (g,))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParamGroup:
    """Ordered layer-id -> Tensor map tagged with one of GROUP_TAGS."""

    def __init__(self, tag):
        if tag not in GROUP_TAGS:
            raise DomainError(f"unknown parameter group tag {tag!r}")
        self.tag = tag
        self.params: Dict[str, Tensor] = {}

    def __getitem__(self, layer_id):
        return self.params[layer_id]

    def __contains__(self, layer_id):
        return layer_id in self.params

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, layer_id, values):
        self.params[layer_id] = Tensor(values, requires_grad=True)
        return self.params[layer_id]

    def add_conv(self, layer_id, in_channels, out_channels, kernel, rng):
        fan_in = in_channels * kernel * kernel
        self.add(f"{layer_id}.weight", kaiming_uniform((out_channels, in_channels, kernel, kernel), fan_in, rng))
        self.add(f"{layer_id}.bias", np.zeros(out_channels))

    def add_linear(self, layer_id, in_features, out_features, rng):
        self.add(f"{layer_id}.weight", kaiming_uniform((out_features, in_features), in_features, rng))
        self.add(f"{layer_id}.bias", np.zeros(out_features))

    def set_requires_grad(self, flag):
        for tensor in self.params.values():
            tensor.requires_grad = flag
            tensor.grad = None

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def num_entries(self):
        return sum(t.size for t in self.params.values())

    def checksum(self):
        """SHA-256 over layer ids, shapes and little-endian float64 values."""
        digest = hashlib.sha256(self.tag.encode('utf-8'))
        for layer_id, tensor in self.params.items():
            digest.update(layer_id.encode('utf-8'))
            digest.update(np.asarray(tensor.shape, dtype='<u4').tobytes())
            digest.update(np.ascontiguousarray(tensor.data, dtype='<f8').tobytes())
        return digest.hexdigest()


def kaiming_uniform(shape, fan_in, rng):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_block(x, group, layer_id):
    """conv2d followed by the layer's bias."""
    return add_bias(conv2d(x, group[f"{layer_id}.weight"]), group[f"{layer_id}.bias"])


def dense_block(x, group, layer_id):
    return add_bias(linear(x, group[f"{layer_id}.weight"]), group[f"{layer_id}.bias"])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_step(param, grad, m, v, step, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns (new_param, new_m, new_v). `step` counts from 1."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over one or more ParamGroups, keyed by '<tag>/<layer-id>'."""

    def __init__(self, groups, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = list(groups)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self):
        for group in self.groups:
            group.zero_grad()

    def step(self):
        self.step_count += 1
        for group in self.groups:
            for layer_id, tensor in group.items():
                key = f"{group.tag}/{layer_id}"
                grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
                if not np.all(np.isfinite(grad)):
                    raise NonFiniteError(f"gradient of {key}")
                m, v = self._moments.get(key, (np.zeros_like(tensor.data), np.zeros_like(tensor.data)))
                tensor.data, m, v = adam_step(tensor.data, grad, m, v, self.step_count,
                                              self.lr, self.beta1, self.beta2, self.eps)
                self._moments[key] = (m, v)


# ---------------------------------------------------------------------------
# Finite-difference check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    failing: List[Tuple[str, Tuple[int, ...]]]
    errors: Dict[str, np.ndarray] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return not self.failing


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], h=1e-5, tolerance=1e-4):
    """
    Compare analytic gradients of loss_fn() with central differences.

    loss_fn must rebuild its graph on every call and return a scalar Tensor.
    Both passes run in surrogate-forward mode, so firing and quantization
    ops are checked against their registered surrogate derivatives.
    """
    total = sum(t.size for t in params.values())
    if total > MAX_CHECK_ENTRIES:
        raise SpikeHarqError(f"finite_diff_check: {total} parameter entries exceeds {MAX_CHECK_ENTRIES}")

    with surrogate_forward():
        for tensor in params.values():
            tensor.requires_grad = True
            tensor.grad = None
        loss_fn().backward()
        analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                    for name, t in params.items()}

        errors = {}
        failing = []
        max_rel = 0.0
        with no_grad():
            for name, tensor in params.items():
                rel = np.zeros_like(tensor.data)
                for idx in np.ndindex(tensor.shape):
                    original = tensor.data[idx]
                    tensor.data[idx] = original + h
                    plus = loss_fn().item()
                    tensor.data[idx] = original - h
                    minus = loss_fn().item()
                    tensor.data[idx] = original
                    numeric = (plus - minus) / (2.0 * h)
                    a = analytic[name][idx]
                    rel[idx] = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                    if rel[idx] > tolerance:
                        failing.append((name, idx))
                errors[name] = rel
                if rel.size:
                    max_rel = max(max_rel, float(rel.max()))

    if failing:
        logger.debug(f"finite_diff_check: {len(failing)} entries above {tolerance}, max {max_rel:.3e}")
    return GradCheckReport(max_rel_error=max_rel, failing=failing, errors=errors, tolerance=tolerance)
