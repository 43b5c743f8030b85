"""Expert distributions, stage-1 supervised training and stage-2 DAggerFM."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .controller import Stage2Model, clamp_action, egocentric_crop, resample_matrix, splat_matrix
from .mapper import MapFrame, SemanticMap, integrate, project_features, projection_matrix
from .simworld import STOP, reset, render_fpv, step, visible_landmarks
from .taskgen import AlignmentTable, OraclePolicy, TaskSpec
from .tensorcore import (
    Adam,
    NonFiniteGradient,
    Tape,
    Tensor,
    add,
    binary_cross_entropy,
    cross_entropy,
    log_softmax,
    matmul,
    mean,
    sigmoid,
    sparse_apply,
    stack,
    tsum,
)
from .visitnet import Stage1Model


class TrainingDiverged(RuntimeError):
    pass


# -- expert distributions ---------------------------------------------------------


@dataclass
class ExpertDistributions:
    d_p: np.ndarray
    d_g: np.ndarray
    path_map: np.ndarray  # trajectory in continuous map coordinates

    def as_array(self):
        return np.stack([self.d_p, self.d_g])


def gaussian_image(points, size, sigma):
    """Sum of isotropic Gaussians centred at ``points`` (continuous cell coords), at cell centres."""
    i = np.arange(size) + 0.5
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    gx = np.exp(-((i[None, :] - pts[:, 0:1]) ** 2) / (2 * sigma * sigma))  # [n, ix]
    gy = np.exp(-((i[None, :] - pts[:, 1:2]) ** 2) / (2 * sigma * sigma))  # [n, iy]
    return gy.T @ gx  # [iy, ix]


def make_expert_distributions(path_map, size, sigma) -> ExpertDistributions:
    pts = np.asarray(path_map, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("empty trajectory")
    inside = np.all((pts >= 0) & (pts < size), axis=1)
    if not inside.any():
        raise ValueError("trajectory lies entirely outside the map")
    dp = gaussian_image(pts, size, sigma)
    dg = gaussian_image(pts[-1:], size, sigma)
    zp, zg = dp.sum(), dg.sum()
    if zp <= 0 or zg <= 0:
        raise ValueError("expert distribution has no mass on the map")
    return ExpertDistributions(dp / zp, dg / zg, pts)


def task_expert(task: TaskSpec, frame: MapFrame, sigma) -> ExpertDistributions:
    return make_expert_distributions(frame.world_to_map(task.path), frame.size, sigma)


# -- losses -------------------------------------------------------------------------


def kl_from_logits(target, logits: Tensor) -> Tensor:
    """Sum over channels of KL(target_c || softmax(logits_c)) computed with log-softmax."""
    t = np.asarray(target, dtype=logits.dtype).reshape(logits.shape[0], -1)
    lsm = log_softmax(logits.reshape(logits.shape[0], -1), axis=-1)
    pos = t > 0
    ent = float((t[pos] * np.log(t[pos])).sum())
    return add(Tensor(np.asarray(ent, dtype=logits.dtype)), -tsum(Tensor(t) * lsm))


def gather_cells(grid: Tensor, cells) -> Tensor:
    """[C, H, W] grid -> [n, C] features at integer cells (ix, iy)."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    return grid[:, cells[:, 1], cells[:, 0]].transpose(1, 0)


def aux_percept_loss(params, feats: Tensor, classes) -> Tensor:
    """Mean cross-entropy of the linear object classifier on map features [n, C]."""
    classes = list(classes)
    if not classes:
        return Tensor(np.zeros((), dtype=params["aux.percept.w"].dtype))
    logits = add(matmul(feats, params["aux.percept.w"].T), params["aux.percept.b"])
    return mean(stack([cross_entropy(logits[i], c) for i, c in enumerate(classes)]))


def aux_ground_loss(params, feats: Tensor, mentioned) -> Tensor:
    """Mean BCE of 'object mentioned' predicted from grounding-map features [n, C_r]."""
    y = np.asarray(mentioned, dtype=params["aux.ground.w"].dtype).reshape(-1)
    if y.size == 0:
        return Tensor(np.zeros((), dtype=y.dtype))
    p = sigmoid(add(matmul(feats, params["aux.ground.w"].T), params["aux.ground.b"]))
    return binary_cross_entropy(p.reshape(-1), y)


def aux_lang_loss(params, u: Tensor, mention_vector) -> Tensor:
    p = sigmoid(add(matmul(params["aux.lang.w"], u), params["aux.lang.b"]))
    return binary_cross_entropy(p, np.asarray(mention_vector))


@dataclass
class LossWeights:
    percept: float = 1.0
    ground: float = 1.0
    lang: float = 0.25

    def __post_init__(self):
        if min(self.percept, self.ground, self.lang) < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def from_config(cls, cfg: RunConfig):
        return cls(cfg.lambda_percept, cfg.lambda_ground, cfg.lambda_lang)


def stage1_loss(logits: Tensor, expert, aux: dict, weights: LossWeights):
    """KL(d_p*||d^p) + KL(d_g*||d^g) + weighted auxiliary terms; returns (total, parts)."""
    target = expert.as_array() if hasattr(expert, "as_array") else np.asarray(expert)
    kl = kl_from_logits(target, logits)
    total = kl
    parts = {"kl": float(kl.data)}
    for name, w in (("percept", weights.percept), ("ground", weights.ground), ("lang", weights.lang)):
        if name in aux and w:
            total = add(total, aux[name] * w)
        parts[name] = float(aux[name].data) if name in aux else 0.0
    return total, parts


# -- rotation augmentation --------------------------------------------------------------


def _rotate_coords(coords, alpha, size):
    c, s = math.cos(alpha), math.sin(alpha)
    q = np.asarray(coords, dtype=np.float64).reshape(-1, 2) - size / 2.0
    return np.stack([c * q[:, 0] - s * q[:, 1], s * q[:, 0] + c * q[:, 1]], axis=1) + size / 2.0


def rotation_operators(size, alpha):
    """(feature sampler, distribution splatter) rotating a map by ``alpha`` about its center."""
    i = np.arange(size) + 0.5
    cx, cy = np.meshgrid(i, i)
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    sampler = resample_matrix(_rotate_coords(centers, -alpha, size), size)
    splatter = splat_matrix(_rotate_coords(centers, alpha, size), size)
    return sampler, splatter


def augment_rotation(s, d_p, d_g, alpha, size=None):
    """Rotate features (bilinear sampling) and distributions (bilinear splat, renormalized) by ``alpha``."""
    size = size or d_p.shape[-1]
    if alpha == 0.0:
        return s, d_p.copy(), d_g.copy()
    sampler, splatter = rotation_operators(size, alpha)
    out = []
    for d in (d_p, d_g):
        r = splatter @ np.asarray(d, dtype=np.float64).ravel()
        tot = r.sum()
        if tot <= 0:
            raise ValueError("rotation moved all mass off the map")
        out.append((r / tot).reshape(size, size))
    if isinstance(s, Tensor):
        c = s.shape[0]
        rs = sparse_apply(s.reshape(c, size * size), sampler.astype(s.dtype)).reshape(c, size, size)
    else:
        c = s.shape[0]
        rs = (sampler @ np.asarray(s).reshape(c, -1).T).T.reshape(c, size, size).astype(np.asarray(s).dtype)
    return rs, out[0], out[1]


def rotate_cells(cells, alpha, size):
    """Rotate integer cells about the map center; cells leaving the map map to None."""
    out = []
    for ix, iy in cells:
        q = _rotate_coords([(ix + 0.5, iy + 0.5)], alpha, size)[0]
        jx, jy = math.floor(q[0]), math.floor(q[1])
        out.append((jx, jy) if 0 <= jx < size and 0 <= jy < size else None)
    return out


# -- metrics log ---------------------------------------------------------------------------


class MetricsLog:
    """Append one JSON object per line; keeps records in memory too."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path is not None:
            open(path, "w").close()

    def log(self, **rec):
        rec = {k: (float(v) if isinstance(v, (np.floating, np.integer)) else v) for k, v in rec.items()}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- oracle rollouts ------------------------------------------------------------------------


@dataclass
class Rollout:
    poses: list
    actions: list
    final: object

    @property
    def steps(self):
        return len(self.actions)


def oracle_for(task: TaskSpec, cfg: RunConfig):
    return OraclePolicy(task.path, cfg.lookahead, cfg.k_omega, cfg.v_max, cfg.stop_radius, cfg.omega_max)


def rollout_oracle(task: TaskSpec, cfg: RunConfig) -> Rollout:
    """Closed-loop oracle execution; ``poses[t]`` is the pose observed before action t."""
    s = reset(task.landmarks, task.start)
    pol = oracle_for(task, cfg)
    poses, actions = [], []
    while not s.done and s.steps < cfg.max_steps:
        poses.append(s.pose)
        a = pol(s)
        actions.append(a)
        s = step(s, a, cfg.dt)
    return Rollout(poses, actions, s)


# -- stage 1 ----------------------------------------------------------------------------------


@dataclass
class Stage1Task:
    """Everything about one task that does not depend on the weights."""

    task: TaskSpec
    frame: MapFrame
    poses: list
    projections: list  # (matrix, mask) per frame
    expert: ExpertDistributions
    example_times: list  # 1-based t with t mod T_d == 1
    visible: dict  # t -> [(class, (ix, iy))]
    mention_vector: np.ndarray


def prepare_stage1_task(task: TaskSpec, cfg: RunConfig, table: AlignmentTable) -> Stage1Task:
    ro = rollout_oracle(task, cfg)
    intr = cfg.intrinsics
    frame = MapFrame.from_pose(task.start, cfg.map_size, cfg.map_extent)
    hw = (cfg.image_height // 4, cfg.image_width // 4)
    projections = [projection_matrix(frame, p, intr, hw, cfg.supersample) for p in ro.poses]
    times = list(range(1, len(ro.poses) + 1, cfg.t_d))
    visible = {}
    for t in times:
        st = reset(task.landmarks, ro.poses[t - 1])
        items = []
        for lm in visible_landmarks(st, intr):
            cell = frame.world_to_cell(lm.position)
            if cell is not None:
                items.append((lm.cls, cell))
        visible[t] = items
    mentions = table.mention_vector(task.instruction.tokens, cfg.n_obj)
    return Stage1Task(task, frame, ro.poses, projections, task_expert(task, frame, cfg.sigma_cells), times, visible,
                      mentions)


def render_frames(st: Stage1Task, cfg: RunConfig):
    intr = cfg.intrinsics
    return np.stack([render_fpv(reset(st.task.landmarks, p), intr) for p in st.poses])


def stage1_example_loss(model: Stage1Model, st: Stage1Task, t, image, history: SemanticMap, alpha, weights,
                        tokens=None):
    """Loss for the example at 1-based time ``t`` given the (constant) map after frame t-1."""
    cfg = model.cfg
    tokens = st.task.instruction.tokens if tokens is None else tokens
    fmap = model.features(image)
    w, mask = project_features(fmap, st.poses[t - 1], cfg.intrinsics, st.frame, matrix=st.projections[t - 1])
    smap = integrate(history, w, mask)
    s, d_p, d_g = augment_rotation(smap.features, st.expert.d_p, st.expert.d_g, alpha, cfg.map_size)
    u = model.embed_instruction(tokens)
    logits, r = model.logits(s, u)
    p = model.params
    aux = {"lang": aux_lang_loss(p, u, st.mention_vector)}
    vis = st.visible.get(t, [])
    cells = rotate_cells([c for _, c in vis], alpha, cfg.map_size) if alpha else [c for _, c in vis]
    keep = [(cls, c) for (cls, _), c in zip(vis, cells) if c is not None]
    if keep:
        cl = [cls for cls, _ in keep]
        cc = [c for _, c in keep]
        aux["percept"] = aux_percept_loss(p, gather_cells(s, cc), cl)
        aux["ground"] = aux_ground_loss(p, gather_cells(r, cc), [st.mention_vector[c] for c in cl])
    return stage1_loss(logits, np.stack([d_p, d_g]), aux, weights)


def history_maps(model: Stage1Model, st: Stage1Task, images):
    """Map state *before* each example time, from a no-grad pass over all frames."""
    cfg = model.cfg
    feats = model.features(images).data
    smap = SemanticMap.empty(st.frame, cfg.channels, model.params.dtype)
    out = {}
    wanted = set(st.example_times)
    for t in range(1, max(st.example_times) + 1):
        if t in wanted:
            out[t] = smap
        m, mask = st.projections[t - 1]
        w = (m @ feats[t - 1].reshape(cfg.channels, -1).T).T.reshape(cfg.channels, cfg.map_size, cfg.map_size)
        smap = integrate(smap, w.astype(feats.dtype), mask)
    return out


def train_stage1(model: Stage1Model, tasks, cfg: RunConfig, epochs=None, log: MetricsLog = None,
                 progress=None, augment=True):
    """Adam on J(theta1) with batch size 1 over examples at the T_d cadence."""
    epochs = cfg.stage1_epochs if epochs is None else epochs
    log = log or MetricsLog()
    weights = LossWeights.from_config(cfg)
    s1_params = {k: v for k, v in model.params.items()}
    opt = Adam(s1_params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    for epoch in range(epochs):
        rng = np.random.default_rng([cfg.seed, 101, epoch])
        order = rng.permutation(len(tasks))
        sums, n = {}, 0
        t0 = time.time()
        snapshot = {k: v.data.copy() for k, v in model.params.items()}
        for ti in order:
            st = tasks[ti]
            images = render_frames(st, cfg)
            hist = history_maps(model, st, images)
            for t in st.example_times:
                alpha = float(rng.normal(0.0, cfg.rotation_std)) if augment else 0.0
                opt.zero_grad()
                with Tape() as tape:
                    loss, parts = stage1_example_loss(model, st, t, images[t - 1], hist[t], alpha, weights)
                if not np.isfinite(loss.data):
                    model.params.load(snapshot)
                    raise TrainingDiverged(f"non-finite stage-1 loss at epoch {epoch}, task {st.task.task_id}")
                tape.backward(loss, params=list(s1_params.values()))
                try:
                    opt.step()
                except NonFiniteGradient:
                    model.params.load(snapshot)
                    raise
                parts["loss"] = float(loss.data)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                n += 1
            if progress:
                progress(epoch, n)
        rec = {k: v / max(n, 1) for k, v in sums.items()}
        log.log(stage="stage1", epoch=epoch, examples=n, seconds=round(time.time() - t0, 2), **rec)
        curve.append(rec.get("loss", float("nan")))
    return curve


# -- stage 2 -----------------------------------------------------------------------------------


@dataclass
class Stage2Sample:
    x: np.ndarray
    stop: float
    v: float
    omega: float


@dataclass
class AggregatedDataset:
    capacity: int
    unit: str = "examples"
    executions: list = field(default_factory=list)

    def add(self, samples):
        self.executions.append(list(samples))

    def __len__(self):
        if self.unit == "executions":
            return len(self.executions)
        return sum(len(e) for e in self.executions)

    def samples(self):
        return [s for e in self.executions for s in e]

    def prune(self, rng):
        """Drop uniformly random items (samples or whole executions) down to capacity."""
        if self.unit == "executions":
            if len(self.executions) > self.capacity:
                keep = np.sort(rng.choice(len(self.executions), self.capacity, replace=False))
                self.executions = [self.executions[i] for i in keep]
            return
        flat = self.samples()
        if len(flat) > self.capacity:
            keep = np.sort(rng.choice(len(flat), self.capacity, replace=False))
            self.executions = [[flat[i] for i in keep]]


def oracle_label(a) -> tuple:
    return (1.0, 0.0, 0.0) if a.stop else (0.0, float(a.v), float(a.omega))


def stage2_sample_loss(out: Tensor, sample: Stage2Sample) -> Tensor:
    p = sigmoid(out[0:1])
    bce = binary_cross_entropy(p, np.array([sample.stop]))
    dv = out[1] - sample.v
    dw = out[2] - sample.omega
    return add(bce, add(dv * dv, dw * dw))


def dagger_rollout(model: Stage2Model, task: TaskSpec, cfg: RunConfig, beta_k, rng, frame=None, expert=None):
    """One mixture-policy execution on expert-distribution crops; returns (samples, final_state)."""
    frame = frame or MapFrame.from_pose(task.start, cfg.map_size, cfg.map_extent)
    expert = expert or task_expert(task, frame, cfg.sigma_cells)
    pair = expert.as_array()
    s = reset(task.landmarks, task.start)
    oracle = oracle_for(task, cfg)
    samples = []
    while not s.done and s.steps < cfg.max_steps:
        x = egocentric_crop(pair, s.pose, frame, cfg.crop_k)
        a_star = oracle(s)
        samples.append(Stage2Sample(x, *oracle_label(a_star)))
        if rng.random() < beta_k:
            a = a_star
        else:
            a = model.action(x)
        s = step(s, clamp_action(a, cfg.v_max, cfg.omega_max), cfg.dt)
    return samples, s


def stage2_epoch(model: Stage2Model, opt: Adam, samples, rng):
    total = 0.0
    for i in rng.permutation(len(samples)):
        opt.zero_grad()
        with Tape() as tape:
            loss = stage2_sample_loss(model.forward(samples[i].x), samples[i])
        tape.backward(loss, params=list(model.params.values()))
        opt.step()
        total += float(loss.data)
    return total / max(len(samples), 1)


def success(state, task: TaskSpec, radius):
    return bool(state.done and math.dist(state.pose.position, task.goal) <= radius)


def train_stage2_daggerfm(model: Stage2Model, tasks, cfg: RunConfig, iterations=None, log: MetricsLog = None,
                          dev_tasks=()):
    """DAggerFM: per-step beta^k mixture, aggregate, prune to capacity, one epoch per iteration."""
    iterations = cfg.dagger_iterations if iterations is None else iterations
    log = log or MetricsLog()
    opt = Adam(dict(model.params), lr=cfg.lr, weight_decay=cfg.weight_decay)
    data = AggregatedDataset(cfg.memory_size, cfg.memory_unit)
    rng = np.random.default_rng([cfg.seed, 202])
    experts = {}
    for k in range(iterations):
        t0 = time.time()
        beta_k = cfg.beta ** k
        picks = rng.choice(len(tasks), size=min(cfg.dagger_envs_per_iter, len(tasks)), replace=False)
        n_steps = 0
        for i in picks:
            task = tasks[i]
            if task.task_id not in experts:
                fr = MapFrame.from_pose(task.start, cfg.map_size, cfg.map_extent)
                experts[task.task_id] = (fr, task_expert(task, fr, cfg.sigma_cells))
            fr, ex = experts[task.task_id]
            samples, _ = dagger_rollout(model, task, cfg, beta_k, rng, fr, ex)
            data.add(samples)
            n_steps += len(samples)
        data.prune(rng)
        loss = stage2_epoch(model, opt, data.samples(), rng)
        rec = dict(stage="stage2", iteration=k, beta_k=beta_k, dataset=len(data), samples=len(data.samples()),
                   new_steps=n_steps, loss=loss, seconds=round(time.time() - t0, 2))
        if dev_tasks:
            rec["dev_sr"] = stage2_dev_sr(model, dev_tasks, cfg)
        log.log(**rec)
    return data


def stage2_dev_sr(model: Stage2Model, tasks, cfg: RunConfig):
    """Success rate of the learned controller driven by expert distributions (no stage 1)."""
    rng = np.random.default_rng(0)
    ok = 0
    for task in tasks:
        _, s = dagger_rollout(model, task, cfg, 0.0, rng)
        ok += success(s, task, cfg.success_radius)
    return ok / max(len(tasks), 1)
