"""TOML run configuration.

Sections map one-to-one onto the config dataclasses:

    [world]    WorldConfig        [mpc]      MpcConfig
    [limits]   Limits             [datagen]  demonstration settings
    [train]    TrainConfig plus model sizes and record subsampling
    [bench]    benchmark settings

Unknown keys are errors so that typos do not silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .datagen import SimRunConfig
from .dynamics import Limits
from .evaluation import BenchConfig
from .mpc import MpcConfig
from .neural.train import TrainConfig
from .world import WorldConfig


class ConfigError(ValueError):
    pass


SECTIONS = ("world", "mpc", "limits", "datagen", "train", "bench")
DATAGEN_KEYS = {"n_sim_steps", "goal_tolerance", "obstacle_noise_std", "goal_timeout", "rng_seed",
                "obs_horizon", "pred_horizon", "max_attempts", "runs"}
MODEL_KEYS = {"query_hidden", "env_hidden", "decoder_hidden", "dense_hidden"}
TRAIN_EXTRA_KEYS = MODEL_KEYS | {"tick_stride"}
BENCH_KEYS = {"goal_tolerance", "timeout", "obs_horizon", "n_robots", "n_obstacles"}


def load(path) -> dict:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"unknown config section [{key}]")
        if not isinstance(raw[key], dict):
            raise ConfigError(f"[{key}] must be a table")
    return raw


def build(cls, values: dict, section: str, extra=()):
    """Instantiate a config dataclass, rejecting unknown keys; returns (obj, extras)."""
    names = {f.name for f in dataclasses.fields(cls)}
    kw, rest = {}, {}
    for k, v in values.items():
        if k in names:
            kw[k] = tuple(v) if isinstance(v, list) else v
        elif k in extra:
            rest[k] = v
        else:
            raise ConfigError(f"[{section}] unknown field '{k}'")
    try:
        return cls(**kw), rest
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def require(raw, section, key):
    if key not in raw.get(section, {}):
        raise ConfigError(f"missing required field '{section}.{key}'")
    return raw[section][key]


def world_mpc_limits(raw, **world_overrides):
    w = dict(raw.get("world", {}))
    w.update({k: v for k, v in world_overrides.items() if v is not None})
    world, _ = build(WorldConfig, w, "world")
    m = dict(raw.get("mpc", {}))
    m.setdefault("dt", world.dt)
    mpc, _ = build(MpcConfig, m, "mpc")
    limits, _ = build(Limits, raw.get("limits", {}), "limits")
    return world, mpc, limits


def sim_run_config(raw, seed=None, ticks=None):
    """(SimRunConfig, number of runs); ``datagen.n_sim_steps`` is required unless ``ticks`` is given."""
    d = dict(raw.get("datagen", {}))
    if ticks is not None:
        d["n_sim_steps"] = ticks
    elif "n_sim_steps" not in d:
        raise ConfigError("missing required field 'datagen.n_sim_steps'")
    if seed is not None:
        d["rng_seed"] = seed
    runs = d.pop("runs", 1)
    for k in d:
        if k not in DATAGEN_KEYS:
            raise ConfigError(f"[datagen] unknown field '{k}'")
    world, mpc, limits = world_mpc_limits(raw)
    try:
        return SimRunConfig(world=world, mpc=mpc, limits=limits, **d), int(runs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[datagen] {e}") from e


def train_config(raw, **overrides):
    """(TrainConfig, model size kwargs, tick stride)."""
    t = dict(raw.get("train", {}))
    t.update({k: v for k, v in overrides.items() if v is not None})
    cfg, extra = build(TrainConfig, t, "train", TRAIN_EXTRA_KEYS)
    model = {k: int(v) for k, v in extra.items() if k in MODEL_KEYS}
    return cfg, model, int(extra.get("tick_stride", 1))


def bench_config(raw, **world_overrides):
    b = dict(raw.get("bench", {}))
    for k in b:
        if k not in BENCH_KEYS:
            raise ConfigError(f"[bench] unknown field '{k}'")
    world_overrides.setdefault("n_obstacles", b.get("n_obstacles", 0))
    world, mpc, limits = world_mpc_limits(raw, **world_overrides)
    kw = {k: b[k] for k in ("goal_tolerance", "timeout", "obs_horizon") if k in b}
    return BenchConfig(world=world, mpc=mpc, limits=limits, **kw), int(b.get("n_robots", world.n_robots))


def effective(obj):
    """Plain-dict view of a config dataclass for manifests."""
    return dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else obj
