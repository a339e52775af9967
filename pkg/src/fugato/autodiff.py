"""Dense tensors with reverse-mode automatic differentiation.

numpy holds the values; this module owns the graph. Tensors record their
parents and a backward closure; ``Tensor.backward`` runs the closures in
reverse topological order. Float32 by default; switch to float64 (for
gradient checks and bitwise causality tests) with ``set_default_dtype``
or the ``use_dtype`` context manager.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, DataError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def use_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _mask_value() -> float:
    """Additive pre-softmax mask: exact -inf in float64, -1e9 in float32."""
    return -math.inf if _DEFAULT_DTYPE is np.float64 else -1e9


class Tensor:
    """A value in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.grad is not None})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this tensor (defaults to seed gradient 1)."""
        if not self.requires_grad:
            raise ConfigError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ConfigError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents, backward) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = requires
    out._parents = tuple(p for p in parents if p.requires_grad) if requires else ()
    out._backward = backward if requires else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_shapes(op: str, a, b) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DataError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- primitive ops ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes("add", a, b)
    out_data = a.data + b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes("mul", a, b)
    out_data = a.data * b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = a.data.dtype.type(s)
    out_data = a.data * s

    def backward(grad):
        a._accumulate(grad * s)

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DataError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(grad):
        if a.requires_grad:
            ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(grad):
        a._accumulate(grad.reshape(a.shape))

    return _make(out_data, (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(grad):
        a._accumulate(np.swapaxes(grad, ax1, ax2))

    return _make(out_data, (a,), backward)


def slice_(a, key) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data[key]

    def backward(grad):
        full = np.zeros_like(a.data)
        np.add.at(full, key, grad)
        a._accumulate(full)

    return _make(out_data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * grad.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(grad[tuple(index)])

    return _make(out_data, tuple(tensors), backward)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        g = grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def embedding_lookup(table, indices) -> Tensor:
    """Row gather; gradients scatter-add back into the table."""
    table = _as_tensor(table)
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise DataError(
            f"embedding index outside table of {table.shape[0]} rows"
        )
    out_data = table.data[indices]

    def backward(grad):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, grad)
        table._accumulate(full)

    return _make(out_data, (table,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(grad):
        a._accumulate(grad * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(grad):
        a._accumulate(grad * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximation gelu with its analytic derivative."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(grad):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        a._accumulate(grad * da)

    return _make(out_data, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data

    def backward(grad):
        if x.requires_grad:
            dxhat = grad * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * term)
        reduce_axes = tuple(range(grad.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((grad * xhat).sum(axis=reduce_axes))
        if bias.requires_grad:
            bias._accumulate(grad.sum(axis=reduce_axes))

    return _make(out_data, (x, gain, bias), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out_data = exp / exp.sum(axis=axis, keepdims=True)

    def backward(grad):
        dot = (grad * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (grad - dot))

    return _make(out_data, (a,), backward)


def dropout(a, rate: float, rng: np.random.Generator | None = None,
            train: bool = False) -> Tensor:
    """Inverted dropout; bitwise identity when train is off."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype)
    keep /= a.data.dtype.type(1.0 - rate)
    out_data = a.data * keep

    def backward(grad):
        a._accumulate(grad * keep)

    return _make(out_data, (a,), backward)


def softmax_cross_entropy(logits, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer targets under the logits.

    ``logits`` has shape [..., V]; ``targets`` the matching leading shape.
    Entries equal to ``ignore_index`` contribute neither loss nor gradient.
    Raises if every target is ignored or any target is out of range.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    v = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, v)
    flat_targets = targets.reshape(-1)

    keep = np.ones(flat_targets.shape, dtype=bool)
    if ignore_index is not None:
        keep = flat_targets != ignore_index
    if not keep.any():
        raise DataError("cross entropy with zero non-ignored targets")
    checked = flat_targets[keep]
    if checked.min() < 0 or checked.max() >= v:
        raise DataError(f"target outside vocabulary of size {v}")

    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(len(flat_targets))
    safe_targets = np.where(keep, flat_targets, 0)
    nll = logsumexp - shifted[rows, safe_targets]
    n_kept = int(keep.sum())
    out_data = np.asarray((nll * keep).sum() / n_kept, dtype=logits.data.dtype)

    def backward(grad):
        probs = np.exp(shifted - logsumexp[:, None])
        probs[rows, safe_targets] -= 1.0
        probs *= (keep / n_kept)[:, None] * grad
        logits._accumulate(probs.reshape(logits.shape).astype(logits.data.dtype))

    return _make(out_data, (logits,), backward)


def log_softmax_values(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy log-softmax for evaluation paths that need probabilities."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
