"""Stage 2: egocentric crop of the visitation distributions and the Act network."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .config import RunConfig
from .mapper import MapFrame
from .simworld import STOP, Action, Pose
from .tensorcore import DimensionError, Params, Tensor, add, concat, leaky_relu, matmul, sigmoid, sparse_apply


def resample_matrix(src_coords, size):
    """Sparse (N, size*size) bilinear sampler of a [size, size] grid at continuous coords.

    Cell (ix, iy) has its center at (ix + 0.5, iy + 0.5); neighbours outside
    the grid contribute zero (not clamped).
    """
    pts = np.asarray(src_coords, dtype=np.float64)
    fx, fy = pts[:, 0] - 0.5, pts[:, 1] - 0.5
    x0, y0 = np.floor(fx), np.floor(fy)
    ax, ay = fx - x0, fy - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    rows, cols, vals = [], [], []
    n = len(pts)
    for dx, dy, w in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)), (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < size) & (yi >= 0) & (yi < size) & (w > 0)
        rows.append(np.nonzero(ok)[0])
        cols.append(yi[ok] * size + xi[ok])
        vals.append(w[ok])
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, size * size))


def splat_matrix(dst_coords, size_x, size_y=None):
    """Sparse (size_y*size_x, N) operator pushing N point masses onto a grid bilinearly.

    ``dst_coords`` are the continuous destination coordinates of the sources.
    This is the transpose of bilinear sampling, so mass is conserved whenever
    all four neighbours are inside the grid; mass falling outside is dropped.
    """
    size_y = size_y or size_x
    pts = np.asarray(dst_coords, dtype=np.float64)
    fx, fy = pts[:, 0] - 0.5, pts[:, 1] - 0.5
    x0, y0 = np.floor(fx), np.floor(fy)
    ax, ay = fx - x0, fy - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    rows, cols, vals = [], [], []
    src = np.arange(len(pts))
    for dx, dy, w in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)), (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < size_x) & (yi >= 0) & (yi < size_y) & (w > 0)
        rows.append(yi[ok] * size_x + xi[ok])
        cols.append(src[ok])
        vals.append(w[ok])
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(size_x * size_y, len(pts)))


def crop_matrix(frame: MapFrame, pose: Pose, k=12):
    """Operator taking a flattened map distribution to the K x K agent-centric crop.

    Crop axes: +x along the agent heading, +y to its left; the agent sits at the
    crop center and crop cells have the size of map cells. Each map cell's mass
    is splatted bilinearly at its crop-frame position.
    """
    center = frame.world_to_map([pose.position])[0]
    theta = frame.heading_to_map(pose.heading)
    i = np.arange(frame.size) + 0.5
    mx, my = np.meshgrid(i, i)
    dx, dy = mx.ravel() - center[0], my.ravel() - center[1]
    c, s = math.cos(theta), math.sin(theta)
    dst = np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1) + k / 2.0
    return splat_matrix(dst, k)


def egocentric_crop(pair, pose: Pose, frame: MapFrame, k=12):
    """Flattened [d^p crop, d^g crop] vector of length 2K^2 (Tensor when ``pair`` is one)."""
    m = crop_matrix(frame, pose, k)
    if isinstance(pair, Tensor):
        d = pair.reshape(2, frame.size * frame.size)
        return sparse_apply(d, m.astype(d.dtype)).reshape(2 * k * k)
    arr = pair.as_array() if hasattr(pair, "as_array") else np.asarray(pair)
    flat = arr.reshape(2, -1)
    return np.asarray((m @ flat.T).T, dtype=np.float32).reshape(2 * k * k)


# -- Act ----------------------------------------------------------------------------


def init_act(params: Params, rng, k=12, hidden=64, prefix="act"):
    n = 2 * k * k
    params.new(f"{prefix}.w1", (hidden, n), rng, scale=math.sqrt(2.0 / n))
    params.new(f"{prefix}.b1", (hidden,), zero=True)
    params.new(f"{prefix}.w2", (3, n + hidden), rng, scale=0.1 / math.sqrt(n + hidden))
    params.new(f"{prefix}.b2", (3,), zero=True)
    return params


@dataclass(frozen=True)
class ControlOutput:
    v: float
    omega: float
    e_stop: float

    @property
    def p_stop(self):
        if self.e_stop >= 0:
            return 1.0 / (1.0 + math.exp(-self.e_stop))
        z = math.exp(self.e_stop)
        return z / (1.0 + z)


def act_forward(params: Params, x, prefix="act") -> Tensor:
    """[e_stop, v, omega] = W2 [x; LeakyReLU(W1 x + b1)] + b2."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params[f"{prefix}.w1"].dtype))
    if x.ndim != 1 or x.shape[0] != params[f"{prefix}.w1"].shape[1]:
        raise DimensionError(f"act input must have length {params[f'{prefix}.w1'].shape[1]}, got {x.shape}")
    h = leaky_relu(add(matmul(params[f"{prefix}.w1"], x), params[f"{prefix}.b1"]))
    return add(matmul(params[f"{prefix}.w2"], concat([x, h], axis=0)), params[f"{prefix}.b2"])


def act(params: Params, x, prefix="act") -> ControlOutput:
    e, v, w = (float(z) for z in act_forward(params, x, prefix).data)
    return ControlOutput(v, w, e)


def p_stop_tensor(out: Tensor) -> Tensor:
    return sigmoid(out[0:1])


def stop_decision(out: ControlOutput, kappa: float) -> Action:
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    if out.p_stop > kappa:
        return STOP
    return Action.velocity(out.v, out.omega)


def clamp_action(a: Action, v_max, omega_max) -> Action:
    """Simulator-boundary clamp of velocity setpoints."""
    if a.stop:
        return a
    return Action.velocity(min(max(a.v, 0.0), v_max), min(max(a.omega, -omega_max), omega_max))


class Stage2Model:
    def __init__(self, cfg: RunConfig, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.params = Params(dtype)
        init_act(self.params, np.random.default_rng([seed, 23]), cfg.crop_k, cfg.act_hidden)

    def forward(self, x) -> Tensor:
        return act_forward(self.params, x)

    def control(self, x) -> ControlOutput:
        return act(self.params, x)

    def action(self, x) -> Action:
        a = stop_decision(self.control(x), self.cfg.kappa)
        return clamp_action(a, self.cfg.v_max, self.cfg.omega_max)
