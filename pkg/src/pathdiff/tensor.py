"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op executed while gradients are enabled appends one
record ``(output, inputs, backward_fn)`` to the active :class:`Tape`.
:func:`backward` walks the tape in reverse, so each record is visited
exactly once, then clears it.

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(GELU_C * (x + GELU_A * x**3)))
    GELU_C = sqrt(2 / pi) = 0.7978845608028654,  GELU_A = 0.044715
"""

import contextlib
import math
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

DEBUG = bool(os.environ.get("PATHDIFF_DEBUG"))


class Tape:
    """Ordered record of executed ops."""

    def __init__(self):
        self.records = []

    def append(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_tape = Tape()
_grad_enabled = True


def active_tape():
    return _tape


@contextlib.contextmanager
def use_tape(tape):
    global _tape
    prev, _tape = _tape, tape
    try:
        yield tape
    finally:
        _tape = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _make(data, inputs, backward_fn):
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError("non-finite output from finite inputs")
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.append(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    data = a.data**p
    if p == 0.0:
        return _make(data, (a,), lambda g: (np.zeros_like(g),))
    return _make(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a):
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip_min(a, lo):
    """max(a, lo); the gradient is zero where the floor is active."""
    keep = a.data >= lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def sigmoid(a):
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def gelu(a):
    x = a.data
    inner = GELU_C * (x + GELU_A * x**3)
    th = np.tanh(inner)
    data = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(data, (a,), bw)


# ---------------------------------------------------------------- structural


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), bw)


def transpose(a):
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def permute(a, axes):
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape):
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _make(data, (a,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    data = a.data[idx]
    if isinstance(data, np.ndarray):
        data = data.copy()

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(data, tuple(tensors), bw)


def tsum(a, axis=None):
    data = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), bw)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- nn kernels


def softmax_rows(x, col_mask=None):
    """Row-wise softmax of a 2-D tensor.

    ``col_mask`` is an optional boolean vector; True columns get a logit of
    -inf and hence probability exactly 0.
    """
    z = x.data.copy()
    if col_mask is not None:
        col_mask = np.asarray(col_mask, dtype=bool)
        if col_mask.shape != (z.shape[1],):
            raise DimensionError(f"mask shape {col_mask.shape} does not match {z.shape}")
        if col_mask.all():
            raise ContractError("softmax over fully masked rows")
        z[:, col_mask] = -np.inf
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), bw)


def layer_norm(x, eps=1e-5):
    """Normalize each row to zero mean and unit variance (no affine part)."""
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), bw)


def conv2d(x, kernels, padding=0):
    """Cross-correlate ``x[c_in,h,w]`` with ``kernels[c_out,c_in,k,k]``."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects 3-D input and 4-D kernels, got {x.shape}, {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kernels.shape} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # c_in, ho, wo, kh, kw
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, ho * wo)
    k2 = kernels.data.reshape(c_out, -1)
    data = (k2 @ cols).reshape(c_out, ho, wo)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        dk = (g2 @ cols.T).reshape(kernels.shape)
        dcols = (k2.T @ g2).reshape(c_in, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                dxp[:, a:a + ho, b:b + wo] += dcols[:, a, b]
        return dxp[:, p:p + h, p:p + w], dk

    return _make(data, (x, kernels), bw)


# ---------------------------------------------------------------- autodiff


def backward(loss):
    """Populate ``.grad`` on every tensor feeding ``loss``; consumes the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape
    if not loss.requires_grad:
        tape.clear()
        raise ContractError("loss is not connected to any tensor requiring grad")
    loss.grad = np.ones_like(loss.data)
    pending = {id(loss)}
    for out, inputs, fn in reversed(tape.records):
        if id(out) not in pending or out.grad is None:
            continue
        grads = fn(out.grad)
        for t, g in zip(inputs, grads):
            if not t.requires_grad or g is None:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
            pending.add(id(t))
    tape.clear()


def grad_check(f, x, h=1e-5):
    """Max relative error between autodiff and central differences of ``f(x)`` at ``x``."""
    return grad_check_params(lambda: f(x), [x], h)


def grad_check_params(f, params, h=1e-5, max_entries=None, rng=None):
    """Like :func:`grad_check` over several leaf tensors.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``.
    With ``max_entries`` a random subset of coordinates is checked.
    Relative error uses ``max(|a|, |b|, 1e-8)`` as the denominator.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_entries is not None and len(coords) > max_entries:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_entries, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = f().item()
            flat[j] = orig - h
            fm = f().item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            ana = analytic[i].reshape(-1)[j]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            worst = max(worst, err)
    return worst
