"""Image features, ground-plane projection and the world-frame semantic map.

Map frame: origin at the episode start position, +x along the start heading,
``size`` cells covering ``extent`` meters per side. Continuous cell coordinates
put cell (ix, iy) over [ix, ix+1) x [iy, iy+1) and the origin at size/2, so the
start position lands in the center cell. Arrays are laid out [C, iy, ix].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from .simworld import CameraIntrinsics, Pose, ground_to_pixel, write_ppm
from .tensorcore import (
    DimensionError,
    Params,
    Tensor,
    add,
    conv2d,
    leaky_relu,
    save_tensors,
    sparse_apply,
)

FEATURE_STRIDE = 4


# -- feature extractor ---------------------------------------------------------


def init_cnn(params: Params, rng, channels=32, n_blocks=2, in_channels=3, stem_channels=16, prefix="cnn"):
    """Stride-2 stem (two 3x3 convs), ``n_blocks`` residual blocks and a 1x1 head: 3 + 2*n_blocks layers."""
    params.new(f"{prefix}.stem1.w", (stem_channels, in_channels, 3, 3), rng)
    params.new(f"{prefix}.stem1.b", (stem_channels, 1, 1), zero=True)
    params.new(f"{prefix}.stem2.w", (channels, stem_channels, 3, 3), rng)
    params.new(f"{prefix}.stem2.b", (channels, 1, 1), zero=True)
    for k in range(n_blocks):
        for j in (1, 2):
            # second conv of each block starts small so blocks begin near identity
            scale = None if j == 1 else 0.1 * math.sqrt(2.0 / (channels * 9))
            params.new(f"{prefix}.block{k}.conv{j}.w", (channels, channels, 3, 3), rng, scale=scale)
            params.new(f"{prefix}.block{k}.conv{j}.b", (channels, 1, 1), zero=True)
    params.new(f"{prefix}.head.w", (channels, channels, 1, 1), rng, scale=math.sqrt(1.0 / channels))
    params.new(f"{prefix}.head.b", (channels, 1, 1), zero=True)
    return params


def cnn_depth(params: Params, prefix="cnn"):
    return sum(1 for k in params if k.startswith(prefix + ".") and k.endswith(".w"))


def extract_features(params: Params, image, intr: CameraIntrinsics = None, prefix="cnn") -> Tensor:
    """[3,H,W] (or [N,3,H,W]) image -> [C,H/4,W/4] feature map.

    Accepts an (H, W, 3) numpy image as produced by the renderer as well.
    """
    if isinstance(image, Tensor):
        x = image
    else:
        arr = np.asarray(image)
        if arr.ndim in (3, 4) and arr.shape[-1] == 3 and arr.shape[-3] != 3:
            arr = np.moveaxis(arr, -1, -3)  # HWC -> CHW
        x = Tensor(np.ascontiguousarray(arr, dtype=params[f"{prefix}.stem1.w"].dtype))
    if x.ndim not in (3, 4) or x.shape[-3] != params[f"{prefix}.stem1.w"].shape[1]:
        raise DimensionError(f"expected [3,H,W] image, got {x.shape}")
    if intr is not None and x.shape[-2:] != (intr.height, intr.width):
        raise DimensionError(f"image {x.shape[-2:]} does not match intrinsics {(intr.height, intr.width)}")
    if x.shape[-1] % FEATURE_STRIDE or x.shape[-2] % FEATURE_STRIDE:
        raise DimensionError(f"image dims {x.shape[-2:]} must be divisible by {FEATURE_STRIDE}")

    def conv(h, name, stride=1, pad=1):
        return add(conv2d(h, params[f"{prefix}.{name}.w"], stride, pad), params[f"{prefix}.{name}.b"])

    h = leaky_relu(conv(x, "stem1", 2))
    h = leaky_relu(conv(h, "stem2", 2))
    k = 0
    while f"{prefix}.block{k}.conv1.w" in params:
        r = leaky_relu(conv(h, f"block{k}.conv1"))
        r = conv(r, f"block{k}.conv2")
        h = leaky_relu(add(h, r))
        k += 1
    return conv(h, "head", 1, 0)


# -- map frame ---------------------------------------------------------------------


@dataclass(frozen=True)
class MapFrame:
    x0: float
    y0: float
    heading: float
    size: int = 32
    extent: float = 100.0

    @classmethod
    def from_pose(cls, pose: Pose, size=32, extent=100.0):
        return cls(pose.x, pose.y, pose.heading, size, extent)

    @property
    def cells_per_meter(self):
        return self.size / self.extent

    def world_to_map(self, points):
        """Continuous cell coordinates (cx, cy) of world points (N,2)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2) - (self.x0, self.y0)
        c, s = math.cos(self.heading), math.sin(self.heading)
        fx = c * p[:, 0] + s * p[:, 1]
        fy = -s * p[:, 0] + c * p[:, 1]
        return np.stack([fx, fy], axis=1) * self.cells_per_meter + self.size / 2.0

    def map_to_world(self, coords):
        q = (np.asarray(coords, dtype=np.float64).reshape(-1, 2) - self.size / 2.0) / self.cells_per_meter
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.stack([c * q[:, 0] - s * q[:, 1], s * q[:, 0] + c * q[:, 1]], axis=1) + (self.x0, self.y0)

    def world_to_cell(self, point):
        """Rounded cell index (ix, iy), or None when the point is off the map."""
        cx, cy = self.world_to_map(point)[0]
        ix, iy = math.floor(cx), math.floor(cy)
        if 0 <= ix < self.size and 0 <= iy < self.size:
            return ix, iy
        return None

    def heading_to_map(self, heading):
        return heading - self.heading

    def cell_centers_world(self):
        i = np.arange(self.size) + 0.5
        cx, cy = np.meshgrid(i, i)  # [iy, ix]
        return self.map_to_world(np.stack([cx.ravel(), cy.ravel()], axis=1))


# -- projection ----------------------------------------------------------------------


@lru_cache(maxsize=8)
def _subsample_coords(size, supersample):
    """Continuous map coords of ``supersample``^2 points per cell, grouped by cell (row-major)."""
    off = (np.arange(supersample) + 0.5) / supersample
    ox, oy = np.meshgrid(off, off)
    ox, oy = ox.ravel(), oy.ravel()
    iy, ix = np.divmod(np.arange(size * size), size)
    cx = (ix[:, None] + ox[None]).ravel()
    cy = (iy[:, None] + oy[None]).ravel()
    return np.stack([cx, cy], axis=1)


def projection_matrix(frame: MapFrame, pose: Pose, intr: CameraIntrinsics, feat_hw, supersample=4):
    """Sparse (size^2, Hf*Wf) operator mapping a flattened feature map onto map cells.

    Each cell averages bilinear samples of the feature map taken at the pixels that
    view ``supersample``^2 ground points spread over the cell (inverse mapping).
    Returns (matrix, mask) where mask[iy, ix] marks cells with at least one visible sample.
    """
    hf, wf = feat_hw
    n_cells = frame.size * frame.size
    k = supersample * supersample
    world = frame.map_to_world(_subsample_coords(frame.size, supersample))
    uv, front = ground_to_pixel(world, pose, intr)
    ok = front & (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)
    idx = np.nonzero(ok)[0]
    cell = idx // k
    per_cell = np.bincount(cell, minlength=n_cells)
    mask = (per_cell > 0).reshape(frame.size, frame.size)
    if len(idx) == 0:
        return sparse.csr_matrix((n_cells, hf * wf), dtype=np.float32), mask
    fx = uv[idx, 0] * (wf / intr.width) - 0.5
    fy = uv[idx, 1] * (hf / intr.height) - 0.5
    x0, y0 = np.floor(fx), np.floor(fy)
    ax, ay = fx - x0, fy - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    rows, cols, vals = [], [], []
    base = 1.0 / per_cell[cell]
    for dx, dy, w in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)), (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
        xi = np.clip(x0 + dx, 0, wf - 1)
        yi = np.clip(y0 + dy, 0, hf - 1)
        rows.append(cell)
        cols.append(yi * wf + xi)
        vals.append(w * base)
    m = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n_cells, hf * wf)).tocsr()
    m.sum_duplicates()
    return m.astype(np.float32), mask


def project_features(fmap, pose: Pose, intr: CameraIntrinsics, frame: MapFrame, supersample=4, matrix=None):
    """Project a [C,Hf,Wf] feature map onto the map grid: ([C,size,size] tensor, mask)."""
    fmap = fmap if isinstance(fmap, Tensor) else Tensor(fmap)
    c, hf, wf = fmap.shape
    if matrix is None:
        matrix = projection_matrix(frame, pose, intr, (hf, wf), supersample)
    m, mask = matrix
    out = sparse_apply(fmap.reshape(c, hf * wf), m.astype(fmap.dtype))
    return out.reshape(c, frame.size, frame.size), mask


# -- semantic map --------------------------------------------------------------------


@dataclass
class SemanticMap:
    frame: MapFrame
    features: Tensor  # [C, size, size]
    counts: np.ndarray  # [size, size] observation counts

    @classmethod
    def empty(cls, frame: MapFrame, channels=32, dtype=np.float32):
        return cls(frame, Tensor(np.zeros((channels, frame.size, frame.size), dtype=dtype)),
                   np.zeros((frame.size, frame.size), dtype=np.float64))

    @property
    def observed(self):
        return self.counts > 0

    def detached(self):
        return SemanticMap(self.frame, Tensor(self.features.data), self.counts)


def integrate(smap: SemanticMap, world_features, mask) -> SemanticMap:
    """Masked running mean: S <- (S*count + F)/(count+1) on masked cells.

    The previous map is treated as a constant, so gradients reach only the
    newest frame's features.
    """
    wf = world_features if isinstance(world_features, Tensor) else Tensor(world_features)
    if wf.shape != smap.features.shape:
        raise DimensionError(f"world features {wf.shape} != map {smap.features.shape}")
    mask = np.asarray(mask, dtype=bool)
    counts = smap.counts
    new_counts = counts + mask
    denom = np.maximum(new_counts, 1.0)
    keep = np.where(mask, counts / denom, 1.0).astype(wf.dtype)
    take = (mask / denom).astype(wf.dtype)
    prev = smap.features.data.astype(wf.dtype, copy=False) * keep[None]
    if wf.requires_grad:
        feats = add(Tensor(prev), wf * Tensor(take[None]))
    else:
        feats = Tensor(prev + wf.data * take[None])
    return SemanticMap(smap.frame, feats, new_counts)


# -- export ----------------------------------------------------------------------------


def map_rgb(smap: SemanticMap):
    """First three channels scaled to [0,1] over observed cells, (size, size, 3)."""
    f = np.asarray(smap.features.data[:3], dtype=np.float64)
    obs = smap.observed
    img = np.zeros(f.shape[1:] + (3,))
    for ch in range(min(3, f.shape[0])):
        v = f[ch][obs]
        if v.size:
            lo, hi = v.min(), v.max()
            img[..., ch] = np.where(obs, (f[ch] - lo) / (hi - lo if hi > lo else 1.0), 0.0)
    # row 0 is iy=0 (map -y); flip so +y points up in the picture
    return img[::-1]


def save_map_snapshot(path, smap: SemanticMap):
    save_tensors(path, {"features": smap.features.data, "counts": smap.counts})


def save_map_ppm(path, smap: SemanticMap):
    write_ppm(path, map_rgb(smap))
