"""Small building blocks shared by the networks: parameter store and LSTM cell."""
from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, add, matmul, mul, sigmoid, tanh


class Params(dict):
    """Ordered name -> Tensor store with initialisation helpers."""

    def __init__(self, dtype=np.float32):
        super().__init__()
        self.dtype = dtype

    def new(self, name, shape, rng=None, scale=None, fan_in=None, zero=False):
        if zero or rng is None:
            data = np.zeros(shape)
        else:
            if scale is None:
                fan_in = fan_in or int(np.prod(shape[1:])) or 1
                scale = np.sqrt(2.0 / fan_in)
            data = rng.normal(0.0, scale, size=shape)
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self[name] = t
        return t

    def astype(self, dtype):
        self.dtype = dtype
        for t in self.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state(self):
        return {k: v.data for k, v in self.items()}

    def load(self, arrays: dict, strict=True):
        missing = set(self) - set(arrays)
        extra = set(arrays) - set(self)
        if strict and (missing or extra):
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, arr in arrays.items():
            if k in self:
                if arr.shape != self[k].shape:
                    raise DimensionError(f"{k}: shape {arr.shape} != {self[k].shape}")
                self[k].data = np.asarray(arr, dtype=self.dtype).copy()

    def zero_grad(self):
        for t in self.values():
            t.grad = None


def lstm_params(params: Params, prefix, n_in, n_hidden, rng):
    s = 1.0 / np.sqrt(n_hidden)
    params.new(f"{prefix}.w_x", (4 * n_hidden, n_in), rng, scale=s)
    params.new(f"{prefix}.w_h", (4 * n_hidden, n_hidden), rng, scale=s)
    b = params.new(f"{prefix}.b", (4 * n_hidden,), zero=True)
    b.data[n_hidden : 2 * n_hidden] = 1.0  # forget-gate bias
    return params


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, weights):
    """One LSTM step. ``weights`` = (w_x [4d,in], w_h [4d,d], b [4d]); gate order i, f, g, o."""
    w_x, w_h, b = weights
    d = h_prev.shape[-1]
    if w_x.shape[0] != 4 * d or w_h.shape != (4 * d, d) or c_prev.shape[-1] != d:
        raise DimensionError(f"lstm size mismatch: hidden {d}, w_x {w_x.shape}, w_h {w_h.shape}")
    if w_x.shape[1] != x.shape[-1]:
        raise DimensionError(f"lstm input size {x.shape[-1]} != {w_x.shape[1]}")
    z = add(add(matmul(w_x, x), matmul(w_h, h_prev)), b)
    i = sigmoid(z[0:d])
    f = sigmoid(z[d : 2 * d])
    g = tanh(z[2 * d : 3 * d])
    o = sigmoid(z[3 * d : 4 * d])
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c
