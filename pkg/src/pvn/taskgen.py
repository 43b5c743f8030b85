"""Synthetic environments, templated instructions and demonstration paths.

Four instruction templates cover object reference, spatial relations and
sequencing::

    goto(A)                      -> stop 2 m short of A
    goto-side(A, left|right)     -> stop 2 m beside A on the named side
    pass-then-goto(A, B, side)   -> pass A with a 4 m lateral offset, stop at B
    around-then-goto(A, B)       -> circle A at 4 m radius the long way, stop at B

Sides are relative to the start->A axis: "right" puts the path on the right of
that axis as seen while travelling along it.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .simworld import FIELD_EDGE, STOP, Action, LandmarkSpec, Pose, wrap_angle

N_OBJ_DESK = 15
N_OBJ_PAPER = 63
UNK = "<unk>"

_NAMES = [
    ("barrel", "drum"), ("tree", "palm"), ("rock", "boulder"), ("house", "hut"),
    ("boat", "canoe"), ("anvil", "forge"), ("bench", "seat"), ("cone", "pylon"),
    ("well", "fountain"), ("tower", "mast"), ("statue", "sculpture"), ("lamp", "lantern"),
    ("crate", "box"), ("tent", "shelter"), ("mushroom", "toadstool"),
]
ADJECTIVES = ["big", "small", "old", "little", "large", "tiny", "shiny", "weird", "lonely", "nice"]

TEMPLATES = ("goto", "goto_side", "pass_goto", "around_goto")

_PHRASES = {
    "goto": [
        "go to the {A}",
        "fly towards the {A} and stop",
        "head straight to the {A}",
        "move to the {A} then stop there",
        "navigate over to the {A}",
    ],
    "goto_side": [
        "go to the {s} side of the {A}",
        "stop on the {s} of the {A}",
        "fly to the {A} and stop at its {s} side",
        "approach the {A} from the {s} and stop",
        "head to the {s} of the {A}",
    ],
    "pass_goto": [
        "pass the {A} on the {s} and go to the {B}",
        "go past the {A} on your {s} then head to the {B}",
        "keep the {A} on your {o} and fly to the {B}",
        "move by the {A} on its {s} side and stop at the {B}",
        "fly past the {A} on the {s} then go towards the {B}",
    ],
    "around_goto": [
        "go around the {A} and then move towards the {B}",
        "circle the {A} then fly to the {B}",
        "loop around the {A} before heading to the {B}",
        "fly around the {A} and stop at the {B}",
        "make a circle around the {A} then go to the {B}",
    ],
}


def object_names(cls: int):
    if cls < len(_NAMES):
        return _NAMES[cls]
    return (f"thing{cls}", f"item{cls}")


def tokenize(text: str):
    return re.findall(r"[a-z0-9]+", text.lower())


class Vocabulary:
    """Token <-> id bijection; id 0 is reserved for unknown tokens."""

    def __init__(self, words):
        self.itos = [UNK] + sorted(set(words) - {UNK})
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, n_classes=N_OBJ_DESK):
        words = set(ADJECTIVES) | {"left", "right"}
        for pool in _PHRASES.values():
            for p in pool:
                words.update(tokenize(re.sub(r"\{\w\}", " ", p)))
        for k in range(n_classes):
            words.update(object_names(k))
        return cls(words)

    def __len__(self):
        return len(self.itos)

    def encode(self, text):
        return [self.stoi.get(t, 0) for t in tokenize(text)]

    def decode(self, ids):
        return " ".join(self.itos[i] if 0 <= i < len(self.itos) else UNK for i in ids)


@dataclass
class Instruction:
    tokens: list
    text: str

    def __len__(self):
        return len(self.tokens)


@dataclass
class TaskSpec:
    task_id: str
    instruction: Instruction
    landmarks: list
    start: Pose
    path: np.ndarray  # demonstration positions (T, 2), world meters
    template: str = "goto"
    referenced: tuple = ()
    side: str = ""
    env_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def goal(self):
        return self.path[-1]


class PlacementError(RuntimeError):
    pass


# -- environments --------------------------------------------------------------


def generate_environment(seed, n_classes=N_OBJ_DESK, edge=FIELD_EDGE, count_range=(6, 13),
                         min_sep=6.0, radius=1.5, margin=3.0, max_tries=200):
    """Landmark list for ``seed``; falls through to derived seeds if placement fails."""
    attempt = 0
    while True:
        rng = np.random.default_rng([int(seed), attempt])
        n = int(rng.integers(count_range[0], count_range[1] + 1))
        classes = rng.choice(n_classes, size=n, replace=False)
        pts = []
        tries = 0
        while len(pts) < n and tries < max_tries:
            tries += 1
            p = rng.uniform(margin, edge - margin, size=2)
            if all(math.dist(p, q) >= min_sep for q in pts):
                pts.append(p)
        if len(pts) == n:
            return [LandmarkSpec(int(c), float(p[0]), float(p[1]), radius) for c, p in zip(classes, pts)]
        attempt += 1


# -- path geometry -------------------------------------------------------------


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.array([1.0, 0.0])


def _right_normal(d):
    return np.array([d[1], -d[0]])


def densify(points, spacing=0.25):
    """Resample a polyline at (approximately) uniform arc-length spacing."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] < 1e-9:
        return pts[:1].copy()
    n = max(int(math.ceil(s[-1] / spacing)), 1)
    q = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(q, s, pts[:, 0]), np.interp(q, s, pts[:, 1])], axis=1)


def chaikin(points, iterations=2):
    pts = np.asarray(points, dtype=np.float64)
    for _ in range(iterations):
        if len(pts) < 3:
            return pts
        q = 0.75 * pts[:-1] + 0.25 * pts[1:]
        r = 0.25 * pts[:-1] + 0.75 * pts[1:]
        mid = np.empty((2 * len(q), 2))
        mid[0::2], mid[1::2] = q, r
        pts = np.concatenate([pts[:1], mid[1:-1], pts[-1:]])
    return pts


def path_length(path):
    return float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())


def side_coordinate(points, origin, target):
    """Signed distance of points to the right of the origin->target axis."""
    n = _right_normal(_unit(np.asarray(target) - np.asarray(origin)))
    return (np.asarray(points) - np.asarray(origin)) @ n


def _arc(center, radius, a0, sweep, step=0.25):
    n = max(int(abs(sweep) * radius / step), 2)
    ang = a0 + np.linspace(0.0, sweep, n + 1)
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)


def _goal_short_of(src, target, short=2.0):
    return np.asarray(target) - short * _unit(np.asarray(target) - np.asarray(src))


def build_path(template, start, a, b=None, side="right", side_offset=4.0, around_radius=4.0, short=2.0):
    start, a = np.asarray(start, float), np.asarray(a, float)
    ax = _unit(a - start)
    sgn = 1.0 if side == "right" else -1.0
    n = _right_normal(ax) * sgn
    if template == "goto":
        return densify([start, _goal_short_of(start, a, short)])
    if template == "goto_side":
        w = a - 2.0 * ax + side_offset * n
        return densify(chaikin([start, w, a + short * n]))
    if template == "pass_goto":
        w1 = a - 2.0 * ax + side_offset * n
        w2 = a + 2.0 * ax + side_offset * n
        goal = _goal_short_of(w2, b, short)
        return densify(chaikin([start, w1, w2, goal]))
    if template == "around_goto":
        b = np.asarray(b, float)
        a0 = math.atan2(-ax[1], -ax[0])
        ab = math.atan2(b[1] - a[1], b[0] - a[0])
        ccw = (ab - a0) % (2 * math.pi)
        sweep = ccw if ccw >= math.pi else -(2 * math.pi - ccw)  # the long way round
        arc = _arc(a, around_radius, a0, sweep)
        goal = _goal_short_of(arc[-1], b, short)
        return densify(np.concatenate([[start], arc, [goal]]))
    raise ValueError(f"unknown template {template!r}")


def check_template(task: TaskSpec, near=8.0, tol=0.5):
    """Machine check of the template semantics; returns a list of violations."""
    errs = []
    path, lms = task.path, {lm.cls: lm for lm in task.landmarks}
    start = task.start.position
    if not np.allclose(path[0], start):
        errs.append("path does not start at the start position")
    if np.any(path < 0) or np.any(path > FIELD_EDGE):
        errs.append("path leaves the field")
    a = lms[task.referenced[0]].position
    if task.template in ("goto", "goto_side"):
        d = math.dist(path[-1], a)
        if abs(d - 2.0) > tol:
            errs.append(f"goal {d:.2f} m from target")
    if task.template in ("goto_side", "pass_goto"):
        sc = side_coordinate(path, start, a)
        close = np.linalg.norm(path - a, axis=1) <= near
        want = 1.0 if task.side == "right" else -1.0
        if np.any(sc[close] * want <= 0):
            errs.append("side constraint violated")
    if task.template in ("pass_goto", "around_goto"):
        b = lms[task.referenced[1]].position
        if abs(math.dist(path[-1], b) - 2.0) > tol:
            errs.append("goal not 2 m short of the second landmark")
    return errs


# -- tasks ---------------------------------------------------------------------


def render_text(template, rng, names_a, names_b=None, side=""):
    phrase = _PHRASES[template][int(rng.integers(len(_PHRASES[template])))]

    def noun(names):
        w = names[int(rng.integers(len(names)))]
        if rng.random() < 0.3:
            w = f"{ADJECTIVES[int(rng.integers(len(ADJECTIVES)))]} {w}"
        return w

    opposite = "left" if side == "right" else "right"
    return phrase.format(A=noun(names_a), B=noun(names_b) if names_b else "", s=side, o=opposite)


def generate_task(environment, seed, vocab: Vocabulary = None, task_id=None, start_dist=(10.0, 22.0),
                  start_dist_two=(7.0, 12.0), heading_noise=0.5, max_length=31.0, templates=TEMPLATES,
                  max_tries=2000, edge=FIELD_EDGE):
    """Sample a template, landmarks, start pose and demonstration path for ``environment``."""
    if len(environment) < 2:
        raise PlacementError("need at least two landmarks")
    vocab = vocab or Vocabulary.build(max(lm.cls for lm in environment) + 1)
    rng = np.random.default_rng([int(seed), 7919])
    centers = np.array([[lm.x, lm.y] for lm in environment])
    template = templates[int(rng.integers(len(templates)))]
    two = template in ("pass_goto", "around_goto")
    for _ in range(max_tries):
        ia = int(rng.integers(len(environment)))
        ib = None
        if two:
            ib = int(rng.integers(len(environment)))
            if ib == ia:
                continue
        a = centers[ia]
        # start pose
        dist = rng.uniform(*(start_dist_two if two else start_dist))
        ang = rng.uniform(-math.pi, math.pi)
        start = a + dist * np.array([math.cos(ang), math.sin(ang)])
        if np.any(start < 2.0) or np.any(start > edge - 2.0):
            continue
        if np.min(np.linalg.norm(centers - start, axis=1)) < 4.0:
            continue
        side = ("left", "right")[int(rng.integers(2))] if template in ("goto_side", "pass_goto") else ""
        b = centers[ib] if ib is not None else None
        if b is not None and math.dist(a, b) < 8.0:
            continue
        path = build_path(template, start, a, b, side or "right")
        if path_length(path) > max_length or math.dist(path[-1], start) < 6.0:
            continue
        bearing = math.atan2(a[1] - start[1], a[0] - start[0])
        heading = wrap_angle(bearing + rng.normal(0.0, heading_noise))
        text = render_text(template, rng, object_names(environment[ia].cls),
                           object_names(environment[ib].cls) if ib is not None else None, side)
        refs = (environment[ia].cls,) if ib is None else (environment[ia].cls, environment[ib].cls)
        task = TaskSpec(task_id or f"task{seed}", Instruction(vocab.encode(text), text), list(environment),
                        Pose(float(start[0]), float(start[1]), heading), path, template, refs, side)
        if not check_template(task):
            return task
    raise PlacementError(f"could not place a task for seed {seed}")


def generate_suite(n_tasks, seed0, n_classes=N_OBJ_DESK, tasks_per_env=1, vocab=None, **kw):
    """``n_tasks`` tasks from consecutive seeds starting at ``seed0``."""
    vocab = vocab or Vocabulary.build(n_classes)
    tasks = []
    k = 0
    env_seed = seed0
    while len(tasks) < n_tasks:
        env = generate_environment(env_seed, n_classes)
        for j in range(tasks_per_env):
            if len(tasks) >= n_tasks:
                break
            try:
                t = generate_task(env, seed0 * 1000 + k, vocab, task_id=f"t{seed0}_{k}", **kw)
            except PlacementError:
                k += 1
                continue
            t.env_id = f"env{env_seed}"
            tasks.append(t)
            k += 1
        env_seed += 1
    return tasks


# -- oracle ----------------------------------------------------------------------


class OraclePolicy:
    """Pure pursuit along a demonstration path with monotone progress."""

    def __init__(self, path, lookahead=2.0, k_omega=1.5, v_max=0.88, stop_radius=1.0, omega_max=2.0,
                 window=40):
        self.path = np.asarray(path, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.path, axis=0), axis=1)
        self.arclen = np.concatenate([[0.0], np.cumsum(seg)])
        self.lookahead = lookahead
        self.k_omega = k_omega
        self.v_max = v_max
        self.stop_radius = stop_radius
        self.omega_max = omega_max
        self.window = window
        self.progress = 0

    def closest(self, p, global_search=False):
        lo, hi = (0, len(self.path)) if global_search else (self.progress, self.progress + self.window)
        seg = self.path[lo:hi]
        return lo + int(np.argmin(np.linalg.norm(seg - p, axis=1)))

    def __call__(self, state) -> Action:
        return self.act(state.pose)

    def act(self, pose, global_search=False) -> Action:
        p = np.array([pose.x, pose.y])
        if math.dist(p, self.path[-1]) <= self.stop_radius:
            return STOP
        i = self.closest(p, global_search)
        self.progress = max(self.progress, i)
        j = int(np.searchsorted(self.arclen, self.arclen[i] + self.lookahead))
        target = self.path[min(j, len(self.path) - 1)]
        err = wrap_angle(math.atan2(target[1] - p[1], target[0] - p[0]) - pose.heading)
        omega = float(np.clip(self.k_omega * err, -self.omega_max, self.omega_max))
        v = self.v_max * max(0.0, math.cos(err))
        return Action.velocity(v, omega)


def oracle_policy(state, path, **kw) -> Action:
    """Stateless oracle action: closest point is searched over the whole path."""
    return OraclePolicy(path, **kw).act(state.pose, global_search=True)


# -- word/object alignment ----------------------------------------------------------


@dataclass
class AlignmentTable:
    pairs: dict  # (class, token) -> pmi
    t_pmi: float = 0.008
    t_tau: float = 0.1

    def classes_for_tokens(self, tokens):
        toks = set(tokens)
        return sorted({o for (o, t) in self.pairs if t in toks})

    def mention_vector(self, tokens, n_classes):
        y = np.zeros(n_classes, dtype=np.float32)
        for o in self.classes_for_tokens(tokens):
            if o < n_classes:
                y[o] = 1.0
        return y

    def to_lines(self):
        return "".join(json.dumps({"class": int(o), "token": t, "pmi": v}) + "\n"
                       for (o, t), v in sorted(self.pairs.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))))


def object_near_path(landmarks, path, radius=15.0):
    path = np.asarray(path)
    out = set()
    for lm in landmarks:
        if np.min(np.linalg.norm(path - lm.position, axis=1)) <= radius:
            out.add(lm.cls)
    return out


def extract_alignments(dataset, t_pmi=0.008, t_tau=0.1, radius=15.0) -> AlignmentTable:
    """PMI word/object alignments from (instruction tokens, landmarks, path) examples.

    Tokens are taken as ids from ``instruction.tokens``. Events are counted once
    per example, so the result does not depend on dataset order.
    """
    if not dataset:
        raise ValueError("empty dataset")
    n = len(dataset)
    c_o, c_t, c_ot = Counter(), Counter(), Counter()
    for task in dataset:
        objs = object_near_path(task.landmarks, task.path, radius)
        toks = set(task.instruction.tokens)
        c_o.update(objs)
        c_t.update(toks)
        c_ot.update((o, t) for o in objs for t in toks)
    pairs = {}
    for (o, t), k in c_ot.items():
        p_ot = k / n
        p_o, p_t = c_o[o] / n, c_t[t] / n
        pmi = p_ot * math.log(p_ot / (p_o * p_t)) if p_ot > 0 else 0.0
        if pmi > t_pmi and p_t < t_tau:
            pairs[(o, t)] = pmi
    return AlignmentTable(pairs, t_pmi, t_tau)


# -- dataset file ----------------------------------------------------------------------


def task_to_record(task: TaskSpec, env_ref=None):
    return {
        "task_id": task.task_id,
        "env": env_ref or f"{task.env_id or task.task_id}.env",
        "tokens": [int(t) for t in task.instruction.tokens],
        "text": task.instruction.text,
        "path": [float(v) for v in np.asarray(task.path).ravel()],
        "goal": [float(v) for v in task.goal],
        "start": [task.start.x, task.start.y, task.start.heading],
        "template": task.template,
        "referenced": [int(c) for c in task.referenced],
        "side": task.side,
    }


def record_to_task(rec, landmarks) -> TaskSpec:
    path = np.asarray(rec["path"], dtype=np.float64).reshape(-1, 2)
    sx, sy, sh = rec["start"]
    return TaskSpec(rec["task_id"], Instruction(list(rec["tokens"]), rec["text"]), list(landmarks),
                    Pose(sx, sy, sh), path, rec.get("template", ""), tuple(rec.get("referenced", ())),
                    rec.get("side", ""), rec["env"].rsplit(".", 1)[0])
