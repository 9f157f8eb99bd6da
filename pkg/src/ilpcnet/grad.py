"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them.  :func:`backward` walks the
graph in reverse topological order.  Elementwise operations broadcast in two
ways only: missing leading (batch) axes, and a size-1 last axis.  Anything
else raises :class:`ShapeError` naming both shapes.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _kernels

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "no_grad", "grad_enabled", "backward", "zero_grad",
    "add", "sub", "mul", "div", "neg", "matmul", "tanh", "sigmoid", "exp", "log",
    "sqrt", "square", "softmax", "logsumexp", "concat", "stack", "sum", "mean",
    "reshape", "transpose", "take", "clip", "custom_op",
    "xavier_init", "WeightNormParam", "weight_norm_effective",
    "OptimizerState", "Adam", "adam_step", "noam_lr",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# per thread, so concurrent synthesis streams cannot switch recording off for each other
_STATE = threading.local()


def grad_enabled():
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _slice(self, index)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, opname):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{opname} produced a non-finite value")


def _make(data, parents, backward_fn, opname):
    """Wrap an op result, recording the graph edge when any parent needs grad."""
    _check_finite(data, opname)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def custom_op(data, parents, backward_fn, opname="custom"):
    """Register an op with a hand-written backward.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent, in order.
    """
    parents = [_as_tensor(p) for p in parents]

    def _bw(g):
        return backward_fn(g)

    return _make(np.asarray(data, dtype=np.float64), parents, _bw, opname)


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(a, b, opname):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    n = max(len(sa), len(sb))
    pa = (None,) * (n - len(sa)) + sa
    pb = (None,) * (n - len(sb)) + sb
    out = []
    for i, (da, db) in enumerate(zip(pa, pb)):
        if da is None:
            out.append(db)
        elif db is None:
            out.append(da)
        elif da == db:
            out.append(da)
        elif i == n - 1 and (da == 1 or db == 1) and len(sa) == len(sb):
            out.append(max(da, db))
        else:
            raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")
    return tuple(out)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    if len(shape) and shape[-1] == 1 and grad.shape[-1] != 1:
        grad = grad.sum(axis=-1, keepdims=True)
    return grad.reshape(shape)


# ------------------------------------------------------------------ elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    a = _as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make(out, (a,), bw, "sqrt")


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,), "clip")


# ------------------------------------------------------------------- reductions

def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def logsumexp(a, axis=-1):
    """log(sum(exp(a))) along ``axis`` with max-subtraction."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)
    soft = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (a,), bw, "logsumexp")


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    total = sum(a, axis=axis, keepdims=keepdims)
    return mul(total, total.size / _as_tensor(a).size)


# ------------------------------------------------------------ linear algebra

def matmul(a, b):
    """``a @ b`` with ``b`` strictly 2-D; ``a`` may carry leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# --------------------------------------------------------------- structural

def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: incompatible shapes {tensors[0].shape} and {t.shape}")

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def _slice(a, index):
    a = _as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def bw(g):
        full = np.zeros(a.shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(a.data[index], (a,), bw, "slice")


def take(a, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate in backward."""
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        full = np.zeros(np.moveaxis(a.data, axis, 0).shape)
        np.add.at(full, indices, np.moveaxis(g, axis, 0))
        return (np.moveaxis(full, 0, axis),)

    return _make(np.take(a.data, indices, axis=axis), (a,), bw, "take")


def reshape(a, shape):
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


# ------------------------------------------------------------------ backward

def backward(output):
    """Populate ``.grad`` of every leaf reachable from the scalar ``output``."""
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if output._consumed:
        raise RuntimeError("backward already called on this graph; run a new forward pass")
    if not output.requires_grad:
        output._consumed = True
        return

    order, seen, stack_ = [], set(), [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads = {id(output): np.ones(output.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp
        node._parents = ()
        node._backward = None
    output._consumed = True


def zero_grad(params):
    for p in params:
        p.grad = None


# ------------------------------------------------------------ initialization

def xavier_init(shape, rng):
    """Glorot-uniform draw for a (fan_in, fan_out) matrix."""
    if len(shape) != 2:
        raise ShapeError(f"xavier_init expects a 2-D shape, got {shape}")
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class WeightNormParam:
    """Weight stored as direction ``v`` and per-output gain ``g``.

    Axis 0 of ``v`` indexes output units; the norm runs over the remaining axes.
    """

    def __init__(self, v, g=None, name=None):
        v = np.array(v, dtype=np.float64, order="C")
        norms = np.sqrt((v.reshape(v.shape[0], -1) ** 2).sum(axis=1))
        if np.any(norms <= 0):
            raise ValueError("weight norm: zero direction row")
        self.v = Tensor(v, requires_grad=True, name=f"{name}.v" if name else None)
        self.g = Tensor(norms if g is None else g, requires_grad=True,
                        name=f"{name}.g" if name else None)

    @classmethod
    def from_weight(cls, w, name=None):
        """Parameter whose effective weight equals ``w`` exactly in direction and norm."""
        return cls(w, name=name)

    @property
    def shape(self):
        return self.v.shape

    def parameters(self):
        return [self.v, self.g]

    def effective(self):
        return weight_norm_effective(self)

    def effective_numpy(self):
        v = self.v.data
        flat = v.reshape(v.shape[0], -1)
        norms = np.sqrt((flat ** 2).sum(axis=1, keepdims=True))
        return (flat * (self.g.data[:, None] / norms)).reshape(v.shape)


def weight_norm_effective(param):
    """w = g * v / ||v|| per output row, as one graph node."""
    v, g = param.v, param.g
    flat = np.ascontiguousarray(v.data.reshape(v.shape[0], -1))
    out, norms = _kernels.weight_norm_forward(flat, np.ascontiguousarray(g.data))
    if np.any(norms <= 0):
        raise ValueError("weight norm: zero direction row")

    def bw(grad):
        gf = np.ascontiguousarray(grad.reshape(flat.shape))
        dv, dg = _kernels.weight_norm_backward(gf, flat, g.data, norms)
        return dv.reshape(v.shape), dg

    return custom_op(out.reshape(v.shape), (v, g), bw, "weight_norm")


# ------------------------------------------------------------------ optimizer

@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params, grads, state, lr):
    """In-place Adam update with bias correction; ``None`` grads count as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    for g in grads:
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError("adam_step: non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} vs parameter {p.shape}")
        p.data = np.ascontiguousarray(p.data)
        state.m[i] = np.ascontiguousarray(state.m[i])
        state.v[i] = np.ascontiguousarray(state.v[i])
        _kernels.adam_update(p.data.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                             state.m[i].reshape(-1), state.v[i].reshape(-1),
                             float(lr), b1, b2, c1, c2, state.eps)
    return params, state


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState.for_params(self.params)
        self.state.beta1, self.state.beta2, self.state.eps = beta1, beta2, eps

    def step(self, lr):
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self):
        zero_grad(self.params)


def noam_lr(step, base=1e-3, warmup=4000):
    """Linear warm-up to ``base`` at ``warmup``, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("noam_lr: step must be >= 1")
    return base * min(step / warmup, math.sqrt(warmup / step))
