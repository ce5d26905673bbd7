"""Demonstration runs with the centralized sequential planner and the
supervised dataset extracted from them."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import Limits
from .mpc import MpcConfig
from .neural.model import Batch
from .neural.train import TrainingSet
from .observation import ObservationHistory, history_from_window
from .planners import CentralizedPlanner
from .simulation import (SPAWN_CLEARANCE, SimLog, Simulation, sample_free_point,
                         sample_obstacle_velocity)
from .world import WorldConfig

log = logging.getLogger(__name__)

DATASET_MAGIC = b"MRNVDATA"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SimRunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    limits: Limits = field(default_factory=Limits)
    n_sim_steps: int = 20000
    goal_tolerance: float = 0.1
    obstacle_noise_std: float = 0.02
    goal_timeout: float = 20.0  # seconds before an unreachable goal is replaced
    rng_seed: int = 0
    obs_horizon: int = 20
    pred_horizon: int = 20
    max_attempts: int = 5

    def __post_init__(self):
        if self.n_sim_steps < 0:
            raise ValueError("n_sim_steps must be >= 0")
        if 0 < self.n_sim_steps <= self.obs_horizon + self.pred_horizon:
            raise ValueError("n_sim_steps must exceed obs_horizon + pred_horizon")
        if abs(self.mpc.dt - self.world.dt) > 1e-12:
            raise ValueError("world and planner must share dt")


@dataclass
class DatasetRecord:
    observation: ObservationHistory
    future_velocities: np.ndarray  # (T_H, 3)
    robot: int
    tick: int


def initial_conditions(world: WorldConfig, rng):
    """Collision-free robot starts, goals and obstacle states."""
    metric = world.metric()
    robots = np.zeros((0, 3))
    for _ in range(world.n_robots):
        robots = np.vstack([robots, sample_free_point(rng, world, robots, np.zeros((0, 3)), metric)])
    goals = np.zeros((0, 3))
    for _ in range(world.n_robots):
        goals = np.vstack([goals, sample_free_point(rng, world, np.vstack([robots, goals]),
                                                    np.zeros((0, 3)), metric)])
    obs_pos = np.zeros((0, 3))
    for _ in range(world.n_obstacles):
        for _ in range(10000):
            p = rng.uniform(world.lo, world.hi)
            if not len(robots) or np.all(metric.norm(robots - p) >= SPAWN_CLEARANCE):
                break
        else:
            raise RuntimeError("could not place obstacle")
        obs_pos = np.vstack([obs_pos, p])
    obs_vel = np.array([sample_obstacle_velocity(rng) for _ in range(world.n_obstacles)]).reshape(-1, 3)
    return robots, goals, obs_pos, obs_vel


def _attempt_seed(seed, attempt):
    if attempt == 0:
        return seed
    return int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])


def run_demonstration(cfg: SimRunConfig) -> SimLog:
    """Closed-loop run of the centralized planner with goals that resample on arrival.

    A run that ends up with any collision is discarded and repeated with a
    derived seed; discarded attempts are listed in ``log.events``.
    """
    rejected = []
    for attempt in range(cfg.max_attempts):
        seed = _attempt_seed(cfg.rng_seed, attempt)
        rng = np.random.default_rng(seed)
        world = cfg.world
        robots, goals, obs_pos, obs_vel = initial_conditions(world, rng)
        planner = CentralizedPlanner(world.n_robots, cfg.mpc, cfg.limits, world.metric(), world.robot_radius)
        sim = Simulation(world, planner, robots, goals, obs_pos, obs_vel, rng, goal_mode="resample",
                         goal_tolerance=cfg.goal_tolerance, goal_timeout=cfg.goal_timeout,
                         obstacle_noise_std=cfg.obstacle_noise_std)
        out = sim.run(cfg.n_sim_steps)
        if out.total_collisions == 0:
            out.events[:0] = rejected
            out.seed = seed
            return out
        log.warning("demonstration seed %d had %d collision ticks; reseeding", seed, out.total_collisions)
        rejected.append((-1, "rejected_run", f"seed {seed} collisions {out.total_collisions}"))
    raise RuntimeError(f"no collision-free demonstration in {cfg.max_attempts} attempts")


def _usable_ticks(n_ticks, obs_len, horizon):
    # record tick t needs t - obs_len >= 0 and t + horizon <= n_ticks - 1
    return np.arange(obs_len, n_ticks - horizon)


def extract_dataset(log: SimLog, obs_len, horizon) -> list[DatasetRecord]:
    arr = log.arrays()
    pos, vel = arr["robot_pos"], arr["robot_vel"]
    T, n = pos.shape[:2]
    if T <= obs_len + horizon:
        raise ValueError(f"log has {T} ticks, need more than {obs_len + horizon}")
    out = []
    for t in _usable_ticks(T, obs_len, horizon):
        win = slice(t - obs_len, t + 1)
        for q in range(n):
            hist = history_from_window(pos[win], vel[win], q, arr["obstacle_pos"][t], arr["obstacle_vel"][t])
            fut = np.diff(pos[t:t + horizon + 1, q], axis=0) / log.dt
            out.append(DatasetRecord(hist, fut, q, int(t)))
    return out


def extract_arrays(log: SimLog, obs_len, horizon, run=0) -> TrainingSet:
    """Vectorised equivalent of ``extract_dataset`` in model-input layout.

    Records are ordered by tick, then robot.
    """
    arr = log.arrays()
    pos, vel = arr["robot_pos"], arr["robot_vel"]
    T, n = pos.shape[:2]
    if T <= obs_len + horizon:
        raise ValueError(f"log has {T} ticks, need more than {obs_len + horizon}")
    ticks = _usable_ticks(T, obs_len, horizon)
    W = obs_len + 1
    win = ticks[:, None] + np.arange(-obs_len, 1)[None, :]  # (R_t, W)
    wp, wv = pos[win], vel[win]  # (R_t, W, n, 3)
    R = len(ticks) * n
    ego = np.transpose(wv, (0, 2, 1, 3)).reshape(R, W, 3)
    M = n - 1
    nb = np.zeros((len(ticks), n, M, W, 6))
    for q in range(n):
        others = [k for k in range(n) if k != q]
        rp = wp[:, :, others] - wp[:, :, q:q + 1]
        rv = wv[:, :, others] - wv[:, :, q:q + 1]
        nb[:, q, :, :, :3] = np.transpose(rp, (0, 2, 1, 3))
        nb[:, q, :, :, 3:] = np.transpose(rv, (0, 2, 1, 3))
    nb = nb.reshape(R, M, W, 6)
    op, ov = arr["obstacle_pos"][ticks], arr["obstacle_vel"][ticks]  # (R_t, K, 3)
    K = op.shape[1]
    qp, qv = pos[ticks], vel[ticks]  # (R_t, n, 3)
    ob = np.concatenate([op[:, None] - qp[:, :, None], ov[:, None] - qv[:, :, None]], axis=3).reshape(R, K, 6)
    fut = np.diff(pos[ticks[:, None] + np.arange(horizon + 1)[None, :]], axis=1) / log.dt  # (R_t, H, n, 3)
    targets = np.transpose(fut, (0, 2, 1, 3)).reshape(R, horizon, 3)
    meta = np.stack([np.full(R, run), np.tile(np.arange(n), len(ticks)), np.repeat(ticks, n)], axis=1)
    batch = Batch(ego, nb, np.ones((R, M), bool), ob, np.ones((R, K), bool))
    return TrainingSet(batch, targets, meta.astype(np.int64), qp.reshape(R, 3).copy())


def concatenate(sets) -> TrainingSet:
    sets = list(sets)
    if not sets:
        raise ValueError("nothing to concatenate")
    M = max(s.inputs.neighbors.shape[1] for s in sets)
    K = max(s.inputs.obstacles.shape[1] for s in sets)

    def pad(a, axis, size):
        widths = [(0, 0)] * a.ndim
        widths[axis] = (0, size - a.shape[axis])
        return np.pad(a, widths)

    b = Batch(np.concatenate([s.inputs.ego for s in sets]),
              np.concatenate([pad(s.inputs.neighbors, 1, M) for s in sets]),
              np.concatenate([pad(s.inputs.neighbor_mask, 1, M) for s in sets]),
              np.concatenate([pad(s.inputs.obstacles, 1, K) for s in sets]),
              np.concatenate([pad(s.inputs.obstacle_mask, 1, K) for s in sets]))
    return TrainingSet(b, np.concatenate([s.targets for s in sets]),
                       np.concatenate([s.meta for s in sets]),
                       np.concatenate([s.origins for s in sets]))


# binary dataset file: magic, header struct, then raw little-endian arrays in a fixed order
_HEADER = struct.Struct("<8sIQIIIIId")
_ARRAYS = (("ego", "<f8"), ("neighbors", "<f8"), ("neighbor_mask", "u1"), ("obstacles", "<f8"),
           ("obstacle_mask", "u1"), ("targets", "<f8"), ("origins", "<f8"), ("meta", "<i8"))


def save_dataset(path, data: TrainingSet, dt, provenance=None):
    """Write the dataset and a JSON sidecar (``<path>.json``) describing how it was made."""
    R, W = data.inputs.ego.shape[:2]
    M = data.inputs.neighbors.shape[1]
    K = data.inputs.obstacles.shape[1]
    H = data.targets.shape[1]
    parts = dict(ego=data.inputs.ego, neighbors=data.inputs.neighbors,
                 neighbor_mask=data.inputs.neighbor_mask, obstacles=data.inputs.obstacles,
                 obstacle_mask=data.inputs.obstacle_mask, targets=data.targets,
                 origins=data.origins, meta=data.meta)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, R, W - 1, H, M, K, 0, float(dt)))
        for name, dtype in _ARRAYS:
            f.write(np.ascontiguousarray(parts[name], dtype=dtype).tobytes())
    side = dict(format="mrnav-dataset", version=DATASET_VERSION, records=int(R), obs_horizon=int(W - 1),
                pred_horizon=int(H), max_neighbors=int(M), max_obstacles=int(K), dt=float(dt))
    if provenance:
        side["provenance"] = provenance
    with open(str(path) + ".json", "w") as f:
        json.dump(side, f, indent=2, sort_keys=True)


class DatasetFormatError(ValueError):
    pass


def load_dataset(path):
    """Returns (TrainingSet, header dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, R, obs, H, M, K, _, dt = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    W = obs + 1
    shapes = dict(ego=(R, W, 3), neighbors=(R, M, W, 6), neighbor_mask=(R, M), obstacles=(R, K, 6),
                  obstacle_mask=(R, K), targets=(R, H, 3), origins=(R, 3), meta=(R, 3))
    off = _HEADER.size
    parts = {}
    for name, dtype in _ARRAYS:
        dt_ = np.dtype(dtype)
        count = int(np.prod(shapes[name]))
        end = off + count * dt_.itemsize
        if end > len(raw):
            raise DatasetFormatError(f"{path}: truncated at {name}")
        parts[name] = np.frombuffer(raw, dtype=dt_, count=count, offset=off).reshape(shapes[name]).copy()
        off = end
    if off != len(raw):
        raise DatasetFormatError(f"{path}: {len(raw) - off} trailing bytes")
    batch = Batch(parts["ego"].astype(float), parts["neighbors"].astype(float),
                  parts["neighbor_mask"].astype(bool), parts["obstacles"].astype(float),
                  parts["obstacle_mask"].astype(bool))
    data = TrainingSet(batch, parts["targets"].astype(float), parts["meta"].astype(np.int64),
                       parts["origins"].astype(float))
    header = dict(records=R, obs_horizon=obs, pred_horizon=H, max_neighbors=M, max_obstacles=K, dt=dt,
                  version=version)
    return data, header


def generate(cfg: SimRunConfig, n_runs=1, jobs=1):
    """Run ``n_runs`` demonstrations with seeds rng_seed, rng_seed+1, ... and pool their records.

    Returns (TrainingSet, list of logs).
    """
    cfgs = [_with_seed(cfg, cfg.rng_seed + i) for i in range(n_runs)]
    if jobs > 1 and n_runs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            logs = list(ex.map(run_demonstration, cfgs))
    else:
        logs = [run_demonstration(c) for c in cfgs]
    sets = [extract_arrays(lg, cfg.obs_horizon, cfg.pred_horizon, run=i) for i, lg in enumerate(logs)
            if len(lg) > cfg.obs_horizon + cfg.pred_horizon]
    return (concatenate(sets) if sets else None), logs


def _with_seed(cfg, seed):
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    d["rng_seed"] = seed
    return SimRunConfig(**d)


def config_dict(cfg: SimRunConfig):
    return asdict(cfg)
