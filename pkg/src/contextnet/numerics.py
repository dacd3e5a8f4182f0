"""Dense tensors, forward kernels and a define-by-run gradient tape.

Every differentiable operation computes its forward value with numpy and, when
a :class:`GradTape` is active and at least one input requires a gradient,
records a closure that maps the output gradient to input gradients.  The tape
replays those closures in reverse recording order, which is a valid reverse
topological order because an operation can only consume tensors that already
exist.

Layout is time-major: ``[T, D]`` for a single utterance, ``[B, T, D]`` for a
batch.  Kernels that pool or normalise over time operate on axis ``-2``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, NumericError, UsageError

_state = threading.local()
_default_dtype = np.float32

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating-point precision."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A numpy array plus the bookkeeping the tape needs.

    ``data`` is always a C-contiguous float32/float64 array.  Parameters are
    tensors created with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.floating)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if dtype is None and isinstance(value, (int, float)):
        dtype = _default_dtype
    return Tensor(value, dtype=dtype)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Records differentiable operations executed inside its ``with`` block.

    A tape is single-owner; use one tape per forward/backward round.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(output, tuple(inputs), backward))

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to each tensor in ``sources``.

        Sources that the loss does not depend on receive zeros.
        """
        sources = list(sources)
        if loss.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for tensor, g_in in zip(node.inputs, node.backward(g_out)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
        out = []
        for src in sources:
            g = grads.get(id(src))
            out.append(np.zeros_like(src.data) if g is None else g.astype(src.dtype, copy=False))
        return out


def backward(tape: GradTape, loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    return tape.gradient(loss, params)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording even if an outer tape is active."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def apply_op(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result and register ``backward`` on the active tape.

    ``backward(g)`` must return one gradient (or ``None``) per input.
    """
    result = Tensor(out)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(result, inputs, backward)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return apply_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return apply_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return apply_op(ad * bd, (a, b),
                    lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return apply_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return apply_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x); expit keeps large negative inputs finite."""
    s = expit(x.data)
    xd = x.data
    return apply_op(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op(x.data * mask, (x,), lambda g: (g * mask,))


ACTIVATIONS = {"swish": swish, "relu": relu}


# -- reductions and reshaping --------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return apply_op(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def expand(x: Tensor, shape) -> Tensor:
    old = x.shape
    return apply_op(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return apply_op(x.data[..., start:stop], (x,), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return apply_op(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def take_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: ``table[index]`` with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return apply_op(table.data[index], (table,), back)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., K] @ w[K, N]``."""
    x, w = _pair(x, w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data

    def back(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])
        return gx, gw

    return apply_op(xd @ wd, (x, w), back)


# -- convolution -----------------------------------------------------------------

def same_ceil_padding(length: int, kernel_size: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_len, left_pad, right_pad)`` with ``out_len = ceil(length/stride)``."""
    out_len = -(-length // stride)
    left = (kernel_size - 1) // 2
    right = max((out_len - 1) * stride + kernel_size - length - left, 0)
    return out_len, left, right


def conv1d_depthwise(x: Tensor, kernel: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Per-channel temporal cross-correlation with same-ceil zero padding.

    x is ``[..., T, D]``, kernel ``[k, D]``; output is ``[..., ceil(T/stride), D]``.
    """
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0:
        raise ConfigurationError(f"depthwise kernel must be [k, D] with odd k, got {kernel.shape}")
    if x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise ConfigurationError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    k = kernel.shape[0]
    T = x.shape[-2]
    out_len, left, right = same_ceil_padding(T, k, stride)
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad)
    kd = kernel.data
    span = stride * (out_len - 1) + 1
    out = np.zeros(x.shape[:-2] + (out_len, x.shape[-1]), dtype=x.dtype)
    for j in range(k):
        out += xp[..., j:j + span:stride, :] * kd[j]
    inputs = [x, kernel]
    if bias is not None:
        out += bias.data
        inputs.append(bias)

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for j in range(k):
            gxp[..., j:j + span:stride, :] += g * kd[j]
            gk[j] = (g * xp[..., j:j + span:stride, :]).reshape(-1, kd.shape[1]).sum(axis=0)
        grads = [gxp[..., left:left + T, :], gk]
        if bias is not None:
            grads.append(g.reshape(-1, kd.shape[1]).sum(axis=0))
        return grads

    return apply_op(out, inputs, back)


def conv1d_pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-frame affine channel map ``x @ weight + bias``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ConfigurationError(f"pointwise mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ConfigurationError(f"pointwise bias {bias.shape} does not match weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def subsample_time(x: Tensor, stride: int) -> Tensor:
    """Keep frames 0, stride, 2*stride, ... (aligned with same-ceil padding)."""
    if stride == 1:
        return x
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., ::stride, :] = g
        return (full,)

    return apply_op(x.data[..., ::stride, :], (x,), back)


# -- normalisation and pooling -----------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               train: bool, eps: float = BN_EPSILON, momentum: float = BN_MOMENTUM) -> Tensor:
    """Batch normalisation over every axis except the channel axis.

    In train mode batch statistics (biased variance) are used and the running
    statistics are updated in place with ``momentum``.
    """
    D = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if p.shape != (D,):
            raise ConfigurationError(f"batch_norm {name} has shape {p.shape}, expected ({D},)")
    if eps <= 0:
        raise ConfigurationError("batch_norm eps must be positive")
    axes = tuple(range(x.ndim - 1))
    xd, gd = x.data, gamma.data
    if train:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean.data *= momentum
        running_mean.data += (1.0 - momentum) * mu
        running_var.data *= momentum
        running_var.data += (1.0 - momentum) * var
    else:
        if np.any(running_var.data <= 0):
            raise NumericError("batch_norm running_var has non-positive entries")
        mu, var = running_mean.data, running_var.data
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gd + beta.data
    n = xd.size // D

    def back(g):
        ggamma = (g * xhat).reshape(-1, D).sum(axis=0)
        gbeta = g.reshape(-1, D).sum(axis=0)
        gxhat = g * gd
        if train:
            s1 = gxhat.reshape(-1, D).sum(axis=0)
            s2 = (gxhat * xhat).reshape(-1, D).sum(axis=0)
            gx = (inv / n) * (n * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta, None, None

    return apply_op(out, (x, gamma, beta, running_mean, running_var), back)


def window_bounds(length: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Half-open ``[lo, hi)`` frame ranges of a centred window clipped to the sequence."""
    left = (window - 1) // 2
    right = window - 1 - left
    t = np.arange(length)
    return np.maximum(t - left, 0), np.minimum(t + right + 1, length)


def time_pool(x: Tensor, window: int | None = None) -> Tensor:
    """Average over the time axis.

    ``window=None`` gives the global mean with shape ``[..., 1, D]``.  An integer
    window gives a stride-one centred moving average with shape ``[..., T, D]``;
    frames whose window spans the whole sequence reuse the global mean exactly.
    """
    T = x.shape[-2]
    if T < 1:
        raise ConfigurationError("time_pool needs at least one frame")
    if window is None:
        return mean(x, axis=-2, keepdims=True)
    if window < 1:
        raise ConfigurationError(f"pooling window must be >= 1, got {window}")
    lo, hi = window_bounds(T, window)
    avg = np.zeros((T, T), dtype=x.dtype)
    for t in range(T):
        avg[t, lo[t]:hi[t]] = 1.0 / (hi[t] - lo[t])
    out = np.matmul(avg, x.data)
    full = (lo == 0) & (hi == T)
    if full.any():
        out[..., full, :] = x.data.mean(axis=-2, keepdims=True)
    return apply_op(out, (x,), lambda g: (np.matmul(avg.T, g),))
