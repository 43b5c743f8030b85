"""Instruction embedding, grounding map and LingUNet visitation prediction.

``Stage1Model`` owns every stage-1 parameter (feature CNN, word embeddings,
LSTM, grounding projection, LingUNet and the three auxiliary heads) in one
``Params`` store with dotted names.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, RunConfig
from .mapper import MapFrame, SemanticMap, extract_features, init_cnn, integrate, map_rgb, project_features
from .simworld import write_ppm
from .tensorcore import (
    DimensionError,
    Params,
    Tensor,
    add,
    channel_softmax,
    concat,
    conv2d,
    deconv2d,
    leaky_relu,
    lstm_cell,
    lstm_params,
    matmul,
)


class Stage1Model:
    def __init__(self, cfg: RunConfig, vocab_size: int, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.vocab_size = vocab_size
        rng = np.random.default_rng([seed, 11])
        p = self.params = Params(dtype)
        c, cr, d_u, ch = cfg.channels, cfg.grounding_channels, cfg.hidden_u, cfg.lingunet_channels
        init_cnn(p, rng, channels=c, n_blocks=cfg.cnn_blocks, stem_channels=cfg.stem_channels)
        p.new("lang.embed", (vocab_size, cfg.word_dim), rng, scale=0.5)
        lstm_params(p, "lang.lstm", cfg.word_dim, d_u, rng)
        # K_G = W_G u + b_G, reshaped to a [C_r, C, 1, 1] kernel
        p.new("ground.w", (cr * c, d_u), rng, scale=1.0 / np.sqrt(d_u * c))
        p.new("ground.b", (cr * c,), rng, scale=1.0 / np.sqrt(c))
        levels = cfg.lingunet_levels
        cin = c + cr
        for k in range(1, levels + 1):
            p.new(f"unet.conv{k}.w", (ch, cin, 3, 3), rng)
            p.new(f"unet.conv{k}.b", (ch, 1, 1), zero=True)
            p.new(f"unet.lang{k}.w", (ch * ch, d_u), rng, scale=1.0 / np.sqrt(d_u * ch))
            p.new(f"unet.lang{k}.b", (ch * ch,), rng, scale=1.0 / np.sqrt(ch))
            cin = ch
        for k in range(levels, 0, -1):
            cin = ch if k == levels else 2 * ch
            cout = 2 if k == 1 else ch
            # deconv kernel layout [C_in, C_out, kh, kw]
            p.new(f"unet.deconv{k}.w", (cin, cout, 4, 4), rng, fan_in=cin * 4)
            p.new(f"unet.deconv{k}.b", (cout, 1, 1), zero=True)
        # auxiliary heads
        p.new("aux.percept.w", (cfg.n_obj, c), rng, scale=1.0 / np.sqrt(c))
        p.new("aux.percept.b", (cfg.n_obj,), zero=True)
        p.new("aux.ground.w", (1, cr), rng, scale=1.0 / np.sqrt(cr))
        p.new("aux.ground.b", (1,), zero=True)
        p.new("aux.lang.w", (cfg.n_obj, d_u), rng, scale=1.0 / np.sqrt(d_u))
        p.new("aux.lang.b", (cfg.n_obj,), zero=True)
        if cfg.map_size // 2 ** levels < 1:
            raise ConfigError("LingUNet depth too large for the map size")

    # -- pieces ------------------------------------------------------------

    def embed_instruction(self, tokens) -> Tensor:
        return embed_instruction(self.params, tokens, self.vocab_size)

    def features(self, image):
        return extract_features(self.params, image, self.cfg.intrinsics)

    def grounding(self, smap_features: Tensor, u: Tensor) -> Tensor:
        return make_grounding_map(self.params, smap_features, u, self.cfg.grounding_channels)

    def lingunet(self, s: Tensor, r: Tensor, u: Tensor) -> Tensor:
        return lingunet_forward(self.params, s, r, u, self.cfg.lingunet_levels)

    def logits(self, s: Tensor, u: Tensor):
        """Map features -> (visitation logits [2,H,W], grounding map)."""
        r = self.grounding(s, u)
        return self.lingunet(s, r, u), r


def embed_instruction(params: Params, tokens, vocab_size=None) -> Tensor:
    """Final LSTM hidden state over word embeddings; ids outside the vocabulary map to 0."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("instruction must have at least one token")
    emb = params["lang.embed"]
    vocab_size = vocab_size or emb.shape[0]
    weights = (params["lang.lstm.w_x"], params["lang.lstm.w_h"], params["lang.lstm.b"])
    d = weights[1].shape[1]
    h = Tensor(np.zeros(d, dtype=emb.dtype))
    c = Tensor(np.zeros(d, dtype=emb.dtype))
    for t in tokens:
        t = int(t) if 0 <= int(t) < vocab_size else 0
        h, c = lstm_cell(emb[t], h, c, weights)
    return h


def make_grounding_map(params: Params, s: Tensor, u: Tensor, c_r: int) -> Tensor:
    """R = S (1x1 conv) K_G with K_G = W_G u + b_G."""
    c = s.shape[0]
    k = add(matmul(params["ground.w"], u), params["ground.b"]).reshape(c_r, c, 1, 1)
    return conv2d(s, k)


def _lang_kernel(params, k, u, ch):
    return add(matmul(params[f"unet.lang{k}.w"], u), params[f"unet.lang{k}.b"]).reshape(ch, ch, 1, 1)


def lingunet_forward(params: Params, s: Tensor, r: Tensor, u: Tensor, levels=3) -> Tensor:
    """Language-conditioned encoder/decoder; returns [2, H, W] logits."""
    if s.shape[1:] != r.shape[1:]:
        raise DimensionError(f"S {s.shape} and R {r.shape} must share spatial dims")
    h, w = s.shape[1:]
    if h % 2 ** levels or w % 2 ** levels:
        raise ConfigError(f"map {h}x{w} cannot be halved {levels} times")
    f = concat([s, r], axis=0)
    g = []
    for k in range(1, levels + 1):
        f = leaky_relu(add(conv2d(f, params[f"unet.conv{k}.w"], 2, 1), params[f"unet.conv{k}.b"]))
        ch = f.shape[0]
        g.append(conv2d(f, _lang_kernel(params, k, u, ch)))
    out = None
    for k in range(levels, 0, -1):
        x = g[k - 1] if out is None else concat([out, g[k - 1]], axis=0)
        out = add(deconv2d(x, params[f"unet.deconv{k}.w"], 2, 1), params[f"unet.deconv{k}.b"])
        if k > 1:
            out = leaky_relu(out)
    return out


# -- episode-level prediction ---------------------------------------------------------


@dataclass
class VisitationPair:
    d_p: np.ndarray
    d_g: np.ndarray
    t: int

    def as_array(self):
        return np.stack([self.d_p, self.d_g])


class VisitationPredictor:
    """Per-episode map and cache; recompute distributions when t mod T_d == 1."""

    def __init__(self, model: Stage1Model, tokens, start_pose):
        self.model = model
        cfg = model.cfg
        self.frame = MapFrame.from_pose(start_pose, cfg.map_size, cfg.map_extent)
        self.smap = SemanticMap.empty(self.frame, cfg.channels, model.params.dtype)
        self.u = model.embed_instruction(tokens)
        self.t = 0
        self.pair = None
        self.evaluations = 0

    def observe(self, image, pose):
        cfg = self.model.cfg
        fmap = self.model.features(image)
        w, mask = project_features(fmap, pose, cfg.intrinsics, self.frame, cfg.supersample)
        self.smap = integrate(self.smap, w, mask)

    def step(self, image, pose) -> VisitationPair:
        self.t += 1
        self.observe(image, pose)
        td = self.model.cfg.t_d
        if self.pair is None or td == 1 or self.t % td == 1:
            logits, _ = self.model.logits(self.smap.features, self.u)
            d = channel_softmax(logits).data
            self.pair = VisitationPair(d[0], d[1], self.t)
            self.evaluations += 1
        return self.pair


def predict_visitations(predictor: VisitationPredictor, image, pose) -> VisitationPair:
    return predictor.step(image, pose)


# -- export ------------------------------------------------------------------------------


def distribution_rgb(pair: VisitationPair, smap: SemanticMap = None):
    """Red = d^p, green = d^g (each scaled by its max), over a dimmed map background."""
    base = map_rgb(smap) * 0.35 if smap is not None else np.zeros(pair.d_p.shape + (3,))
    img = base.copy()
    for ch, d in ((0, pair.d_p), (1, pair.d_g)):
        v = d[::-1] / max(float(d.max()), 1e-12)
        img[..., ch] = np.clip(np.maximum(img[..., ch], v), 0.0, 1.0)
    return img


def save_distribution_ppm(path, pair: VisitationPair, smap: SemanticMap = None):
    write_ppm(path, distribution_rgb(pair, smap))
