"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape everything runs as
plain numpy and nothing is retained.
"""
from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_TAPES: list["Tape"] = []


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    # -- basic properties ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class _Op:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are appended in execution
    order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.ops)

    def backward(self, loss: Tensor, params=None):
        backward(self, loss, params)


def active_tape():
    return _TAPES[-1] if _TAPES else None


def no_grad_mode():
    return not _TAPES


def backward(tape: Tape, loss: Tensor, params=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    ``params`` (optional iterable of tensors) additionally receive a zero
    gradient if they were not on the path to ``loss``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        pgrads = op.backward(g)
        for inp, pg in zip(op.inputs, pgrads):
            if pg is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            leaves[key] = inp
    produced = {id(op.out) for op in tape.ops}
    for key, t in leaves.items():
        if key in produced:
            continue
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _record(out_data, inputs, backward_fn):
    req = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = active_tape()
    if req and tape is not None:
        tape.ops.append(_Op(out, inputs, backward_fn))
    elif req:
        out.requires_grad = False
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * out / bd, bd.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def power(a, p):
    ad = a.data
    return _record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


LEAKY_SLOPE = 0.01


def leaky_relu(a, slope=LEAKY_SLOPE):
    x = a.data
    scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
    return _record(x * scale, (a,), lambda g: (g * scale,))


def maximum(a, floor):
    """Elementwise max against a constant; gradient passes where a > floor."""
    x = a.data
    mask = x > floor
    return _record(np.where(mask, x, np.asarray(floor, dtype=x.dtype)), (a,),
                   lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    shape, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _record(out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), bw)


def sparse_apply(x, matrix):
    """Right-multiply the trailing axis of ``x`` by a constant sparse matrix.

    ``matrix`` has shape (n_out, n_in); ``x`` has shape (..., n_in). This is
    how resampling operators (projection, rotation, cropping) are applied.
    """
    xd = x.data
    lead = xd.shape[:-1]
    flat = xd.reshape(-1, xd.shape[-1])
    out = (matrix @ flat.T).T.reshape(lead + (matrix.shape[0],)).astype(xd.dtype, copy=False)

    def bw(g):
        gf = g.reshape(-1, g.shape[-1])
        return ((matrix.T @ gf.T).T.reshape(xd.shape).astype(xd.dtype, copy=False),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# probability


def softmax(a, axes):
    """Softmax normalising jointly over ``axes`` (tuple)."""
    x = a.data
    z = x - x.max(axis=axes, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axes, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axes, keepdims=True)),)

    return _record(out, (a,), bw)


def log_softmax(a, axis=-1):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bw)


def channel_softmax(logits):
    """Independent softmax over the spatial cells of each channel of a [C,H,W] tensor."""
    if logits.ndim != 3:
        raise DimensionError(f"channel_softmax expects [C,H,W], got {logits.shape}")
    return softmax(logits, axes=(1, 2))


KL_EPS = 1e-9


def kl_loss(target, predicted, eps=KL_EPS):
    """KL(target || predicted) with 0 log 0 = 0 and the prediction floored at ``eps``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    pos = t > 0
    tlogt = np.zeros_like(t)
    tlogt[pos] = t[pos] * np.log(t[pos])
    floor = maximum(predicted, eps)
    cross = tsum(mul(Tensor(t.astype(floor.dtype)), log(floor)))
    return sub(float(tlogt.sum()), cross)


def binary_cross_entropy(p, y, eps=KL_EPS):
    """Mean BCE of probabilities ``p`` against 0/1 (or soft) labels ``y``."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.dtype)
    lp = log(maximum(p, eps))
    lq = log(maximum(1.0 - p, eps))
    per = -(Tensor(y) * lp + Tensor(1.0 - y) * lq)
    return mean(per)


def cross_entropy(logits, label):
    """Negative log-likelihood of integer ``label`` under softmax(``logits``) (1-D)."""
    return -getitem(log_softmax(logits, axis=-1), int(label))
