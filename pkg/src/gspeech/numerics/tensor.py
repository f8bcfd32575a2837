"""Dense tensors with reverse-mode gradients on top of numpy.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the graph once in reverse
topological order and accumulates gradients additively, so a tensor that
feeds several consumers receives the sum of their contributions.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported compute dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the compute dtype (f32 or f64)."""
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; each node appears once, outputs before their inputs
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward(g)`` returns one grad per parent."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(out, (a, b),
                   lambda g: (unbroadcast(g / b.data, a.shape),
                              unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to keep exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    """Swish activation x * sigmoid(x)."""
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return make_op(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,))


def glu(a, axis: int = -1) -> Tensor:
    """Gated linear unit: first half * sigmoid(second half) along ``axis``."""
    a = as_tensor(a)
    left, right = np.split(a.data, 2, axis=axis)
    s = _sigmoid(right)
    out = left * s

    def back(g):
        return (np.concatenate([g * s, g * left * s * (1.0 - s)], axis=axis),)

    return make_op(out, (a,), back)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(a.data[idx], (a,), back)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return make_op(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return make_op(np.stack([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.moveaxis(g, axis, 0)))


# ---------------------------------------------------------------- reductions

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    return make_op(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    return make_op(out, (a,), lambda g: (_expand(g / n, a.shape, axis, keepdims).copy(),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_op(out, (a, b), back)


# ---------------------------------------------------------------- fused NN ops

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(e.dtype)
    return make_op(out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(z.dtype)
    out = z - lse
    return make_op(out, (a,),
                   lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def back(g):
        gxhat = g * gain.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape)

    return make_op(out, (x, gain, bias), back)


def depthwise_conv1d(x, kernel, bias=None) -> Tensor:
    """Per-channel 'same' convolution of ``x[T, d]`` with ``kernel[k, d]`` (k odd).

    ``y[t, c] = sum_j kernel[j, c] * x[t + j - (k - 1) / 2, c]`` with zeros
    outside the sequence.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k, d = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"depthwise_conv1d needs an odd kernel size, got {k}")
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"input {x.shape} does not match kernel {kernel.shape}")
    T = x.shape[0]
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += kernel.data[j] * xp[j:j + T]
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        for j in range(k):
            gxp[j:j + T] += g * kernel.data[j]
            gk[j] = (g * xp[j:j + T]).sum(axis=0)
        grads = [gxp[pad:pad + T], gk]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return make_op(out, parents, back)


def dropout(x, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    x = as_tensor(x)
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.data.dtype)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)
