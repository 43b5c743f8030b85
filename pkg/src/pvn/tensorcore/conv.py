"""2-D convolution and its adjoint (transposed convolution).

Cross-correlation convention, no kernel flip. Inputs may be [C,H,W] or
[N,C,H,W]; kernels are [C_out,C_in,kH,kW] for ``conv2d`` and
[C_in,C_out,kH,kW] for ``deconv2d`` so the same array serves both directions
of the adjoint pair.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, _record


def _windows(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv_out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _conv_fwd(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)
    win = _windows(_pad(x, pad), kh, kw, stride, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # n,ho,wo,o
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_bwd_input(g, w, stride, pad, in_shape):
    """Scatter ``g`` [N,O,Ho,Wo] back through kernel ``w`` [O,C,kh,kw]."""
    n, c, h, wd = in_shape
    o, ci, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    hp, wp = h + 2 * pad, wd + 2 * pad
    hp = max(hp, (ho - 1) * stride + kh)
    wp = max(wp, (wo - 1) * stride + kw)
    out = np.zeros((n, c, hp, wp), dtype=g.dtype)
    # cols[n,ho,wo,c,i,j]
    cols = np.tensordot(g, w, axes=([1], [0]))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out[:, :, pad : pad + h, pad : pad + wd]


def _conv_bwd_weight(g, x, w_shape, stride, pad):
    o, c, kh, kw = w_shape
    ho, wo = g.shape[2], g.shape[3]
    win = _windows(_pad(x, pad), kh, kw, stride, ho, wo)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _batched(t):
    if t.ndim == 3:
        return t.data[None], True
    if t.ndim == 4:
        return t.data, False
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got {t.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    xd, squeeze = _batched(x)
    wd = kernel.data
    if xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {xd.shape[1]} vs kernel {wd.shape[1]}")
    h, w_ = xd.shape[2], xd.shape[3]
    if h + 2 * padding < wd.shape[2] or w_ + 2 * padding < wd.shape[3]:
        raise DimensionError(f"kernel {wd.shape[2:]} larger than padded input {(h, w_)}")
    out = _conv_fwd(xd, wd, stride, padding)

    def bw(g):
        gb = g[None] if squeeze else g
        gx = _conv_bwd_input(gb, wd, stride, padding, xd.shape)
        gw = _conv_bwd_weight(gb, xd, wd.shape, stride, padding)
        return (gx[0] if squeeze else gx), gw

    return _record(out[0] if squeeze else out, (x, kernel), bw)


def deconv_out_size(n, k, stride, padding):
    return (n - 1) * stride - 2 * padding + k


def deconv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution: the exact adjoint of ``conv2d`` with the same kernel."""
    xd, squeeze = _batched(x)
    wd = kernel.data
    if xd.shape[1] != wd.shape[0]:
        raise DimensionError(f"deconv2d channel mismatch: input {xd.shape[1]} vs kernel {wd.shape[0]}")
    n, _, h, w_ = xd.shape
    ho = deconv_out_size(h, wd.shape[2], stride, padding)
    wo = deconv_out_size(w_, wd.shape[3], stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError("deconv2d output would be empty")
    out_shape = (n, wd.shape[1], ho, wo)
    out = _conv_bwd_input(xd, wd, stride, padding, out_shape)

    def bw(g):
        gb = g[None] if squeeze else g
        gx = _conv_fwd(gb, wd, stride, padding)
        gw = _conv_bwd_weight(xd, gb, wd.shape, stride, padding)
        return (gx[0] if squeeze else gx), gw

    return _record(out[0] if squeeze else out, (x, kernel), bw)
