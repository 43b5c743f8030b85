"""Run configuration: every hyperparameter in one flat dataclass, two named profiles.

Config files are INI-style (``[section]`` then ``key = value``); the section
names are only for readability, keys must be unique and known.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # world and camera
    image_width: int = 64
    image_height: int = 36
    hfov: float = math.pi / 2
    pitch: float = math.radians(30.0)
    elevation: float = 5.0
    dt: float = 0.5
    n_obj: int = 15
    # map
    map_size: int = 32
    map_extent: float = 100.0
    supersample: int = 4
    # networks
    channels: int = 32
    stem_channels: int = 16
    cnn_blocks: int = 2
    word_dim: int = 32
    hidden_u: int = 64
    grounding_channels: int = 16
    lingunet_levels: int = 3
    lingunet_channels: int = 32
    crop_k: int = 12
    act_hidden: int = 64
    # control
    t_d: int = 6
    kappa: float = 0.07
    v_max: float = 0.88
    omega_max: float = 2.0
    max_steps: int = 80
    success_radius: float = 5.0
    # oracle
    lookahead: float = 2.0
    k_omega: float = 1.5
    stop_radius: float = 1.0
    # stage 1
    sigma_cells: float = 1.0
    lambda_percept: float = 1.0
    lambda_ground: float = 1.0
    lambda_lang: float = 0.25
    lr: float = 1e-3
    weight_decay: float = 1e-6
    stage1_epochs: int = 7
    rotation_std: float = 0.5
    # stage 2
    dagger_iterations: int = 20
    dagger_envs_per_iter: int = 10
    beta: float = 0.92
    memory_size: int = 600
    memory_unit: str = "examples"
    # alignment
    t_pmi: float = 0.008
    t_tau: float = 0.1
    # data
    n_train: int = 500
    n_test: int = 200
    n_dev: int = 20
    seed: int = 0
    train_seed: int = 1
    test_seed: int = 2
    profile: str = "desk"

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ConfigError("kappa must be in (0, 1)")
        if self.memory_unit not in ("examples", "executions"):
            raise ConfigError("memory_unit must be 'examples' or 'executions'")
        if self.image_width % 4 or self.image_height % 4:
            raise ConfigError("image dims must be divisible by 4")
        if self.map_size % (2 ** self.lingunet_levels):
            raise ConfigError("map_size must be divisible by 2**lingunet_levels")
        for name in ("t_d", "crop_k", "max_steps", "map_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def intrinsics(self):
        from .simworld import CameraIntrinsics

        return CameraIntrinsics(self.image_width, self.image_height, self.hfov, self.pitch)

    def replace(self, **kw):
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **kw)

    def as_dict(self):
        return dataclasses.asdict(self)

    def fingerprint(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PROFILES = {
    "desk": RunConfig(),
    "paper": RunConfig(
        image_width=128, image_height=72, n_obj=63, map_size=64, cnn_blocks=5, sigma_cells=2.0,
        dagger_iterations=100, memory_unit="executions", stage1_epochs=10, n_train=19758, n_test=3155,
        profile="paper",
    ),
}


def load_profile(name):
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def _coerce(template, raw: str):
    if isinstance(template, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def load_config(path=None, profile="desk", overrides=None):
    """Profile defaults, then the config file, then ``key=value`` overrides."""
    base = load_profile(profile)
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(strict=True)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key in values:
                    raise ConfigError(f"{path}: key {key!r} set twice")
                values[key] = raw
        if "profile" in values and values["profile"] != profile:
            base = load_profile(values["profile"])
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must be key=value: {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    try:
        typed = {k: _coerce(known[k], v) for k, v in values.items()}
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return base.replace(**typed)


def write_config(path, cfg: RunConfig):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["run"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in cfg.as_dict().items()}
    with open(path, "w") as fh:
        parser.write(fh)


__all__ = ["ConfigError", "RunConfig", "PROFILES", "load_profile", "load_config", "write_config", "field"]
