"""Flat landmark field, unicycle agent and a pinhole first-person renderer.

World frame: meters, field occupies [0, edge] x [0, edge], heading measured
counter-clockwise from +x. The camera sits at the agent position at height
``pose.z`` and looks along the heading, pitched down by ``intrinsics.pitch``.
"""
from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, replace

import numpy as np

FIELD_EDGE = 50.0
GRASS = (0.32, 0.55, 0.24)
SKY = (0.62, 0.78, 0.95)
DEFAULT_DT = 0.5

_BASE_PALETTE = [
    (0.90, 0.10, 0.10), (0.10, 0.20, 0.95), (0.98, 0.85, 0.10), (0.95, 0.50, 0.05),
    (0.60, 0.10, 0.70), (0.05, 0.85, 0.90), (0.95, 0.40, 0.75), (0.45, 0.25, 0.10),
    (1.00, 1.00, 1.00), (0.05, 0.05, 0.05), (0.55, 0.55, 0.55), (0.60, 0.95, 0.35),
    (0.05, 0.40, 0.40), (0.95, 0.75, 0.60), (0.40, 0.30, 0.95),
]


class ConfigurationError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def class_color(cls: int) -> tuple:
    if cls < len(_BASE_PALETTE):
        return _BASE_PALETTE[cls]
    # golden-angle hues for large vocabularies, avoiding duplicates of the base set
    k = cls - len(_BASE_PALETTE)
    h = (0.11 + k * 0.618033988749895) % 1.0
    s = 0.55 + 0.4 * ((k // 7) % 2)
    v = 0.6 + 0.35 * ((k // 3) % 2)
    return tuple(round(c, 4) for c in colorsys.hsv_to_rgb(h, s, v))


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0
    z: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))
        if self.z <= 0:
            raise ConfigurationError("camera elevation must be positive")

    @property
    def position(self):
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class LandmarkSpec:
    cls: int
    x: float
    y: float
    radius: float = 1.5

    @property
    def color(self):
        return class_color(self.cls)

    @property
    def position(self):
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 64
    height: int = 36
    hfov: float = math.pi / 2
    pitch: float = math.radians(30.0)

    def __post_init__(self):
        if not 0 < self.hfov < math.pi:
            raise ConfigurationError("fov must be in (0, pi)")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("image dimensions must be positive")

    @property
    def focal(self):
        return (self.width / 2.0) / math.tan(self.hfov / 2.0)


@dataclass(frozen=True)
class Action:
    v: float = 0.0
    omega: float = 0.0
    stop: bool = False

    @classmethod
    def velocity(cls, v, omega):
        return cls(float(v), float(omega), False)


STOP = Action(stop=True)


@dataclass(frozen=True)
class WorldState:
    landmarks: tuple
    pose: Pose
    rho: tuple = (0.0, 0.0)
    steps: int = 0
    done: bool = False
    edge: float = FIELD_EDGE


def reset(landmarks, start_pose: Pose, edge: float = FIELD_EDGE) -> WorldState:
    for lm in landmarks:
        if lm.radius <= 0:
            raise ConfigurationError(f"landmark radius must be positive: {lm}")
        if not (0 <= lm.x <= edge and 0 <= lm.y <= edge):
            raise ConfigurationError(f"landmark outside the field: {lm}")
    return WorldState(tuple(landmarks), start_pose, (0.0, 0.0), 0, False, edge)


def integrate_unicycle(x, y, heading, v, omega, dt):
    """Exact arc for constant (v, omega); straight line when |omega| < 1e-6."""
    if abs(omega) < 1e-6:
        return x + v * dt * math.cos(heading), y + v * dt * math.sin(heading), heading + omega * dt
    h2 = heading + omega * dt
    r = v / omega
    return x + r * (math.sin(h2) - math.sin(heading)), y + r * (-math.cos(h2) + math.cos(heading)), h2


def step(state: WorldState, action: Action, dt: float = DEFAULT_DT) -> WorldState:
    if state.done:
        raise UsageError("step() after the episode has stopped")
    if action.stop:
        return replace(state, rho=(0.0, 0.0), steps=state.steps + 1, done=True)
    v, w = float(action.v), float(action.omega)
    p = state.pose
    x, y, h = integrate_unicycle(p.x, p.y, p.heading, v, w, dt)
    return replace(state, pose=Pose(x, y, h, p.z), rho=(v, w), steps=state.steps + 1)


def localize(state: WorldState) -> Pose:
    return state.pose


# -- camera geometry ---------------------------------------------------------


def camera_basis(pose: Pose, intr: CameraIntrinsics):
    """Forward, right and up unit vectors of the camera in world coordinates."""
    g, th = pose.heading, intr.pitch
    fwd = np.array([math.cos(g) * math.cos(th), math.sin(g) * math.cos(th), -math.sin(th)])
    right = np.array([math.sin(g), -math.cos(g), 0.0])
    up = np.cross(right, fwd)
    return fwd, right, up


def pixel_rays(pixels, pose: Pose, intr: CameraIntrinsics):
    """World-frame ray directions for continuous pixel coordinates (u=col, v=row), shape (N,2)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    fwd, right, up = camera_basis(pose, intr)
    f = intr.focal
    a = (pixels[:, 0] - intr.width / 2.0) / f
    b = (pixels[:, 1] - intr.height / 2.0) / f
    return fwd[None] + a[:, None] * right[None] - b[:, None] * up[None]


def rays_to_ground(rays, pose: Pose):
    """Intersect rays from the camera with z=0; rows with no hit are NaN."""
    dz = rays[:, 2]
    hit = dz < -1e-12
    t = np.where(hit, -pose.z / np.where(hit, dz, -1.0), np.nan)
    pts = np.stack([pose.x + t * rays[:, 0], pose.y + t * rays[:, 1]], axis=1)
    return pts, hit


def pixel_to_ground(pixel, pose: Pose, intr: CameraIntrinsics):
    """Ground point (x, y) seen at a continuous pixel coordinate, or None for sky."""
    pts, hit = rays_to_ground(pixel_rays([pixel], pose, intr), pose)
    if not hit[0]:
        return None
    return float(pts[0, 0]), float(pts[0, 1])


def ground_to_pixel(points, pose: Pose, intr: CameraIntrinsics):
    """Project ground points (N,2) to continuous pixel coords; returns (uv, in_front)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    fwd, right, up = camera_basis(pose, intr)
    w = np.stack([pts[:, 0] - pose.x, pts[:, 1] - pose.y, np.full(len(pts), -pose.z)], axis=1)
    zc = w @ fwd
    xc = w @ right
    yc = w @ up
    front = zc > 1e-9
    safe = np.where(front, zc, 1.0)
    f = intr.focal
    u = f * xc / safe + intr.width / 2.0
    v = -f * yc / safe + intr.height / 2.0
    return np.stack([u, v], axis=1), front


def pixel_centers(width, height):
    cols, rows = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([cols.ravel(), rows.ravel()], axis=1)


def render_fpv(state: WorldState, intr: CameraIntrinsics) -> np.ndarray:
    """First-person RGB image (H, W, 3) in [0, 1] by inverse ray casting."""
    pose = state.pose
    pts, hit = rays_to_ground(pixel_rays(pixel_centers(intr.width, intr.height), pose, intr), pose)
    img = np.empty((len(pts), 3), dtype=np.float32)
    img[:] = SKY
    img[hit] = GRASS
    if state.landmarks:
        centers = np.array([[lm.x, lm.y] for lm in state.landmarks])
        radii = np.array([lm.radius for lm in state.landmarks])
        colors = np.array([lm.color for lm in state.landmarks], dtype=np.float32)
        hp = pts[hit]
        d2 = ((hp[:, None, :] - centers[None]) ** 2).sum(-1)
        inside = d2 <= radii[None] ** 2
        any_in = inside.any(axis=1)
        # nearest landmark wins where discs would overlap
        nearest = np.argmin(np.where(inside, d2, np.inf), axis=1)
        sub = img[hit]
        sub[any_in] = colors[nearest[any_in]]
        img[hit] = sub
    return img.reshape(intr.height, intr.width, 3)


def visible_landmarks(state: WorldState, intr: CameraIntrinsics):
    """Landmarks whose centers project inside the image."""
    if not state.landmarks:
        return []
    centers = np.array([[lm.x, lm.y] for lm in state.landmarks])
    uv, front = ground_to_pixel(centers, state.pose, intr)
    ok = front & (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)
    return [lm for lm, k in zip(state.landmarks, ok) if k]


# -- file formats ------------------------------------------------------------


def write_ppm(path, img):
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float32) / 255.0


def format_environment(landmarks) -> str:
    return "".join(f"{lm.cls} {lm.x!r} {lm.y!r} {lm.radius!r}\n" for lm in landmarks)


def parse_environment(text: str):
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        c, x, y, r = line.split()
        out.append(LandmarkSpec(int(c), float(x), float(y), float(r)))
    return out
