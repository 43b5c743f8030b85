"""Episode evaluation, baselines, ablations, reports and overlay rendering."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import RunConfig
from .controller import Stage2Model, clamp_action, egocentric_crop
from .mapper import MapFrame
from .simworld import FIELD_EDGE, STOP, Action, class_color, render_fpv, reset, step, write_ppm
from .taskgen import TaskSpec, Vocabulary, generate_suite
from .trainer import oracle_for, rollout_oracle, task_expert
from .visitnet import Stage1Model, VisitationPair, VisitationPredictor

PAPER_AVERAGE = (18, 0.88)
# distance charged to an episode whose policy produced NaN: the field diagonal
FAILED_DISTANCE = FIELD_EDGE * math.sqrt(2.0)


class PolicyFailure(RuntimeError):
    pass


# -- records ----------------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    task_id: str
    stop: tuple
    goal: tuple
    distance: float
    success: bool
    steps: int
    actions: list = field(default_factory=list)  # (v, omega, stop) per step
    trajectory: list = field(default_factory=list)  # (x, y) per visited pose
    forced: bool = False
    failed: bool = False

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        d["stop"], d["goal"] = tuple(d["stop"]), tuple(d["goal"])
        return cls(**d)


@dataclass
class MetricsReport:
    sr: float
    ad: float
    md: float
    episodes: int
    fingerprint: str
    policy: str = ""

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    def summary(self):
        return f"{self.policy or 'policy'}: SR {self.sr:.2f}%  AD {self.ad:.3f}  MD {self.md:.3f}  (n={self.episodes})"


def lower_median(values):
    v = sorted(values)
    return v[(len(v) - 1) // 2]


def aggregate(results, fingerprint="", policy="") -> MetricsReport:
    if not results:
        raise ValueError("no episodes to aggregate")
    d = [r.distance for r in results]
    sr = 100.0 * sum(r.success for r in results) / len(results)
    return MetricsReport(sr, math.fsum(d) / len(d), lower_median(d), len(results), fingerprint, policy)


# -- policies -----------------------------------------------------------------------------------


class Policy:
    """Episode-scoped controller: ``begin`` once per task, then ``act`` per step."""

    name = "policy"

    def begin(self, task: TaskSpec):
        pass

    def act(self, state) -> Action:
        raise NotImplementedError

    def stop_position(self, state):
        return state.pose.position


class StopPolicy(Policy):
    name = "stop"

    def act(self, state):
        return STOP


class AveragePolicy(Policy):
    """Fly straight at ``v`` for ``steps`` steps, then Stop."""

    name = "average"

    def __init__(self, steps=PAPER_AVERAGE[0], v=PAPER_AVERAGE[1]):
        self.steps, self.v = int(steps), float(v)

    def act(self, state):
        return Action.velocity(self.v, 0.0) if state.steps < self.steps else STOP


def average_constants(tasks, cfg: RunConfig):
    """(mean step count, mean forward velocity) over closed-loop oracle rollouts."""
    steps, vs = [], []
    for t in tasks:
        ro = rollout_oracle(t, cfg)
        moving = [a.v for a in ro.actions if not a.stop]
        steps.append(len(moving))
        vs.extend(moving)
    return int(round(float(np.mean(steps)))), float(np.mean(vs))


class OracleAgent(Policy):
    name = "oracle"

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def begin(self, task):
        self._pol = oracle_for(task, self.cfg)

    def act(self, state):
        return self._pol(state)


class PVNAgent(Policy):
    """Stage 1 predicts visitation distributions from images; stage 2 acts on their crops."""

    name = "pvn"

    def __init__(self, stage1: Stage1Model, stage2: Stage2Model, cfg: RunConfig, blind=False):
        self.stage1, self.stage2, self.cfg = stage1, stage2, cfg
        self.blind = blind
        if blind:
            self.name = "no-instruction"

    def begin(self, task):
        tokens = list(task.instruction.tokens)
        if self.blind:
            tokens = [0] * len(tokens)
        self.predictor = VisitationPredictor(self.stage1, tokens, task.start)
        self.pairs = []

    def act(self, state):
        cfg = self.cfg
        img = render_fpv(state, cfg.intrinsics)
        pair = self.predictor.step(img, state.pose)
        if not self.pairs or self.pairs[-1] is not pair:
            self.pairs.append(pair)
        x = egocentric_crop(pair, state.pose, self.predictor.frame, cfg.crop_k)
        out = self.stage2.control(x)
        if not all(math.isfinite(z) for z in (out.v, out.omega, out.e_stop)):
            raise PolicyFailure("non-finite controller output")
        return self.stage2.action(x)

    @property
    def last_pair(self) -> VisitationPair:
        return self.pairs[-1] if self.pairs else None


def argmax_cell_world(d, frame: MapFrame):
    iy, ix = np.unravel_index(int(np.argmax(d)), d.shape)
    return tuple(frame.map_to_world([(ix + 0.5, iy + 0.5)])[0])


class IdealActAgent(PVNAgent):
    """Runs the full pipeline; the stop position is the argmax cell of d^g at the final replan."""

    name = "ideal-act"

    def stop_position(self, state):
        if self.last_pair is None:
            return state.pose.position
        return argmax_cell_world(self.last_pair.d_g, self.predictor.frame)


class ExpertIdealAct(Policy):
    """Ideal executor on the expert d^g: stop at the center of its argmax cell."""

    name = "ideal-act-expert"

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def begin(self, task):
        self.frame = MapFrame.from_pose(task.start, self.cfg.map_size, self.cfg.map_extent)
        self.d_g = task_expert(task, self.frame, self.cfg.sigma_cells).d_g

    def act(self, state):
        return STOP

    def stop_position(self, state):
        return argmax_cell_world(self.d_g, self.frame)


# -- evaluation -----------------------------------------------------------------------------------


def run_episode(policy: Policy, task: TaskSpec, cfg: RunConfig, max_steps=None) -> EpisodeResult:
    max_steps = cfg.max_steps if max_steps is None else max_steps
    s = reset(task.landmarks, task.start)
    policy.begin(task)
    actions, traj = [], [tuple(map(float, s.pose.position))]
    forced = failed = False
    try:
        while not s.done:
            if s.steps >= max_steps:
                forced = True
                break
            a = policy.act(s)
            if not a.stop:
                a = clamp_action(a, cfg.v_max, cfg.omega_max)
            actions.append((float(a.v), float(a.omega), bool(a.stop)))
            s = step(s, a, cfg.dt)
            traj.append(tuple(map(float, s.pose.position)))
    except PolicyFailure:
        failed = True
    goal = tuple(float(v) for v in task.goal)
    if failed:
        stop, dist = tuple(map(float, s.pose.position)), FAILED_DISTANCE
    else:
        stop = tuple(float(v) for v in policy.stop_position(s))
        dist = math.dist(stop, goal)
    return EpisodeResult(task.task_id, stop, goal, dist, (not failed) and dist < cfg.success_radius, len(actions),
                         actions, traj, forced, failed)


def evaluate(policy: Policy, tasks, cfg: RunConfig, max_steps=None, on_episode=None):
    """Run every task in order; returns (report, per-episode results)."""
    results = []
    for t in tasks:
        r = run_episode(policy, t, cfg, max_steps)
        results.append(r)
        if on_episode:
            on_episode(r)
    return aggregate(results, cfg.fingerprint(), policy.name), results


# -- suites ----------------------------------------------------------------------------------------


def suites(cfg: RunConfig, vocab: Vocabulary = None):
    """(train, test) task suites, disjoint by seed range."""
    vocab = vocab or Vocabulary.build(cfg.n_obj)
    train = generate_suite(cfg.n_train, cfg.train_seed * 100000, cfg.n_obj, vocab=vocab)
    test = generate_suite(cfg.n_test, cfg.test_seed * 100000, cfg.n_obj, vocab=vocab)
    return train, test


# -- rendering ---------------------------------------------------------------------------------------


def topdown_truth(task: TaskSpec, frame: MapFrame, scale=8):
    """Ground-truth top-down picture of the map region: grass plus landmark discs."""
    n = frame.size * scale
    c = (np.arange(n) + 0.5) / scale
    mx, my = np.meshgrid(c, c)
    world = frame.map_to_world(np.stack([mx.ravel(), my.ravel()], 1)).reshape(n, n, 2)
    img = np.empty((n, n, 3))
    inside = (world[..., 0] >= 0) & (world[..., 0] <= FIELD_EDGE) & (world[..., 1] >= 0) & (world[..., 1] <= FIELD_EDGE)
    img[:] = 0.08
    img[inside] = (0.20, 0.34, 0.15)
    for lm in task.landmarks:
        hit = np.hypot(world[..., 0] - lm.x, world[..., 1] - lm.y) <= lm.radius
        img[hit] = class_color(lm.cls)
    return img[::-1] * 0.6


def draw_polyline(img, pts, color, scale, size):
    """Rasterize a polyline given in continuous map coordinates onto a flipped (y-up) image."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    h, w = img.shape[:2]
    for a, b in zip(pts[:-1], pts[1:]):
        n = int(max(2, np.ceil(np.abs(b - a).max() * scale * 2)))
        for t in np.linspace(0, 1, n):
            p = a + t * (b - a)
            col, row = int(p[0] * scale), int((size - p[1]) * scale)
            if 0 <= row < h and 0 <= col < w:
                img[row, col] = color


def overlay_image(pair, frame: MapFrame, background=None, demo=None, agent=None, scale=8):
    """Composite: background, d^p in red, d^g in green, demo (cyan) and agent (blue) paths."""
    size = frame.size
    n = size * scale
    dists = pair.as_array() if pair is not None else np.zeros((2, size, size))
    if background is None:
        background = np.zeros((n, n, 3))
    elif background.shape[0] != n:
        background = np.kron(background, np.ones((scale, scale, 1)))
    img = np.array(background, dtype=np.float64)
    if np.any(dists > 0):
        img *= 0.5
        for ch, d in enumerate(dists):
            v = np.kron(d[::-1] / max(float(d.max()), 1e-12), np.ones((scale, scale)))
            img[..., ch] = np.maximum(img[..., ch], v)
    if demo is not None:
        draw_polyline(img, frame.world_to_map(demo), (0.0, 0.8, 0.8), scale, size)
    if agent is not None and len(agent):
        m = frame.world_to_map(agent)
        draw_polyline(img, m, (0.0, 0.0, 1.0), scale, size)
        col, row = int(m[-1][0] * scale), int((size - m[-1][1]) * scale)
        img[max(row - 2, 0):row + 3, max(col - 2, 0):col + 3] = (0.0, 0.0, 1.0)
    return np.clip(img, 0.0, 1.0)


def render_overlay(path, result: EpisodeResult, pair, frame: MapFrame, background=None, demo=None, scale=8):
    img = overlay_image(pair, frame, background, demo, result.trajectory if result else None, scale)
    write_ppm(path, img)
    return img
