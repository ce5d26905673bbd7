"""Prediction-error study and multi-robot planner benchmark."""
from __future__ import annotations

import csv
import enum
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import Limits
from .mpc import MpcConfig
from .neural.model import ModelWeights, forward_batch
from .neural.train import TrainingSet
from .planners import CentralizedPlanner, DecentralizedPlanner
from .predictors import make_predictor
from .simulation import SPAWN_CLEARANCE, Simulation, sample_free_point, sample_obstacle_velocity
from .world import WorldConfig, count_collisions

log = logging.getLogger(__name__)


class ScenarioKind(str, enum.Enum):
    SYMMETRIC_SWAP = "symmetric"
    ASYMMETRIC_SWAP = "asymmetric"
    PAIRWISE_SWAP = "pairwise"
    RANDOM_MOVING = "random"


class PlannerKind(str, enum.Enum):
    CENTRALIZED = "centralized"
    CVM = "cvm"
    RNN = "rnn"
    ORACLE = "oracle"  # decentralized, neighbours' plans read from the blackboard


# vertical jitter on swap formations; exact mirror symmetry otherwise leaves
# every robot in a stalemate at the centre
HEIGHT_JITTER = 0.01
# another agent this close at the record tick marks a prediction record as interaction-rich
INTERACTION_RADIUS = 1.5


@dataclass(frozen=True)
class Scenario:
    kind: ScenarioKind
    n_robots: int = 4
    n_obstacles: int = 0
    instance_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))

    def build(self, world: WorldConfig):
        """Starts (n, 3), goals (n, 3), obstacle positions and velocities (K, 3)."""
        rng = np.random.default_rng([self.instance_seed, list(ScenarioKind).index(self.kind)])
        n = self.n_robots
        centre = 0.5 * (world.lo + world.hi)
        half = 0.5 * np.min((world.hi - world.lo)[:2]) - 0.5
        metric = world.metric()
        if self.kind in (ScenarioKind.SYMMETRIC_SWAP, ScenarioKind.ASYMMETRIC_SWAP):
            radius = rng.uniform(0.8, 1.0) * half
            z = rng.uniform(world.lo[2] + 1.0, world.hi[2] - 1.0)
            base = rng.uniform(0, 2 * np.pi)
            ang = base + 2 * np.pi * np.arange(n) / n
            radii = np.full(n, radius)
            if self.kind is ScenarioKind.ASYMMETRIC_SWAP:
                ang = ang + rng.uniform(-0.3, 0.3, n) * (2 * np.pi / n)
                radii = radius * rng.uniform(0.6, 1.0, n)
            heights = z + rng.uniform(-HEIGHT_JITTER, HEIGHT_JITTER, n)
            starts = np.stack([centre[0] + radii * np.cos(ang), centre[1] + radii * np.sin(ang), heights], 1)
            if self.kind is ScenarioKind.SYMMETRIC_SWAP:
                goals = starts.copy()
                goals[:, :2] = 2 * centre[:2] - starts[:, :2]
            else:
                # each robot takes the vertex across the polygon (odd n: the next-but-one vertex)
                goals = starts[(np.arange(n) + n // 2) % n].copy()
                goals[:, 2] = heights
        else:
            starts = np.zeros((0, 3))
            for _ in range(n):
                starts = np.vstack([starts, sample_free_point(rng, world, starts, np.zeros((0, 3)), metric)])
            if self.kind is ScenarioKind.PAIRWISE_SWAP:
                goals = starts.copy()
                for a in range(0, n - 1, 2):
                    goals[[a, a + 1]] = starts[[a + 1, a]]
                if n % 2:
                    goals[-1] = sample_free_point(rng, world, starts, np.zeros((0, 3)), metric)
            else:
                goals = np.zeros((0, 3))
                for _ in range(n):
                    goals = np.vstack([goals, sample_free_point(rng, world, goals, np.zeros((0, 3)), metric)])
        obs_pos = np.zeros((0, 3))
        for _ in range(self.n_obstacles):
            while True:
                p = rng.uniform(world.lo, world.hi)
                if np.all(metric.norm(starts - p) >= SPAWN_CLEARANCE):
                    break
            obs_pos = np.vstack([obs_pos, p])
        obs_vel = np.array([sample_obstacle_velocity(rng) for _ in range(self.n_obstacles)]).reshape(-1, 3)
        return starts, goals, obs_pos, obs_vel


@dataclass
class InstanceResult:
    scenario: str
    planner: str
    instance_seed: int
    collided: bool
    timed_out: bool
    ticks: int
    collision_ticks: int
    lengths: list  # per robot, up to its first arrival
    durations: list  # per robot, seconds to first arrival (nan if never)
    planner_failures: int = 0
    solve_time_mean: float = 0.0  # wall clock; excluded from exported metrics

    @property
    def success(self):
        return not self.collided and not self.timed_out


@dataclass
class Stat:
    min: float = float("nan")
    avg: float = float("nan")
    std: float = float("nan")
    max: float = float("nan")

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            return cls()
        return cls(float(v.min()), float(v.mean()), float(v.std()), float(v.max()))


@dataclass
class PlanningMetrics:
    scenario: str
    planner: str
    instances: int
    collision_instances: int
    timeouts: int
    trajectory_length: Stat = field(default_factory=Stat)
    trajectory_duration: Stat = field(default_factory=Stat)
    average_speed: Stat = field(default_factory=Stat)

    @classmethod
    def from_results(cls, results: list[InstanceResult]):
        results = sorted(results, key=lambda r: r.instance_seed)
        ok = [r for r in results if r.success]
        lengths = [x for r in ok for x in r.lengths]
        durations = [x for r in ok for x in r.durations]
        speeds = [l / d for r in ok for l, d in zip(r.lengths, r.durations) if d > 0]
        return cls(results[0].scenario if results else "", results[0].planner if results else "",
                   len(results), sum(r.collided for r in results),
                   sum(r.timed_out and not r.collided for r in results),
                   Stat.of(lengths), Stat.of(durations), Stat.of(speeds))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("trajectory_length", "trajectory_duration", "average_speed"):
            d[k] = Stat(**{f: float("nan") if v is None else v for f, v in d[k].items()})
        return cls(**d)


@dataclass
class PredictionMetrics:
    """Per-horizon-step position error statistics, one entry per predictor."""

    dt: float
    mean: dict = field(default_factory=dict)  # name -> list of T_H floats
    std: dict = field(default_factory=dict)
    records: int = 0
    subset: str = "all"

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# prediction study


def ground_truth_positions(data: TrainingSet, dt):
    return data.origins[:, None, :] + dt * np.cumsum(data.targets, axis=1)


def cvm_positions(data: TrainingSet, dt):
    steps = np.arange(1, data.targets.shape[1] + 1)
    return data.origins[:, None, :] + dt * steps[None, :, None] * data.inputs.ego[:, -1][:, None, :]


def model_positions(weights: ModelWeights, zero_env=False):
    def predict(data: TrainingSet, dt, chunk=512):
        out = np.empty_like(data.targets)
        for s in range(0, len(data), chunk):
            sl = slice(s, min(len(data), s + chunk))
            v, _ = forward_batch(weights, data.inputs.take(sl), zero_env)
            out[sl] = v
        return data.origins[:, None, :] + dt * np.cumsum(out, axis=1)
    return predict


def interaction_rich(data: TrainingSet, radius=INTERACTION_RADIUS):
    """Indices of records with another robot or an obstacle within ``radius`` at the record tick."""
    d = np.full(len(data), np.inf)
    inp = data.inputs
    if inp.neighbors.shape[1]:
        dn = np.linalg.norm(inp.neighbors[:, :, -1, :3], axis=2)
        d = np.minimum(d, np.where(inp.neighbor_mask, dn, np.inf).min(axis=1))
    if inp.obstacles.shape[1]:
        do = np.linalg.norm(inp.obstacles[:, :, :3], axis=2)
        d = np.minimum(d, np.where(inp.obstacle_mask, do, np.inf).min(axis=1))
    return np.nonzero(d < radius)[0]


def eval_prediction(test: TrainingSet, predictors: dict, dt, subset="all") -> PredictionMetrics:
    """``predictors`` maps a name to ``fn(data, dt) -> positions (R, T_H, 3)``."""
    truth = ground_truth_positions(test, dt)
    m = PredictionMetrics(float(dt), records=len(test), subset=subset)
    for name in sorted(predictors):
        err = np.linalg.norm(predictors[name](test, dt) - truth, axis=2)
        m.mean[name] = [float(x) for x in err.mean(axis=0)] if len(test) else []
        m.std[name] = [float(x) for x in err.std(axis=0)] if len(test) else []
    return m


def eval_prediction_subsets(test: TrainingSet, predictors: dict, dt, radius=INTERACTION_RADIUS):
    """Metrics over the whole test set and over its interaction-rich records."""
    rich = test.take(interaction_rich(test, radius))
    return [eval_prediction(test, predictors, dt),
            eval_prediction(rich, predictors, dt, subset="interaction_rich")]


def standard_predictors(weights: ModelWeights | None, simple_weights: ModelWeights | None = None):
    """CVM, the trained model and its query-only ablation.

    The ablation zeroes the environment encoding of ``weights`` unless a
    separately trained ``simple_weights`` is given.
    """
    preds = {"cvm": cvm_positions}
    if weights is not None:
        preds["rnn"] = model_positions(weights)
        preds["rnn_simple"] = model_positions(weights, zero_env=True)
    if simple_weights is not None:
        preds["rnn_simple"] = model_positions(simple_weights, zero_env=True)
    return preds


# ---------------------------------------------------------------------------
# planning benchmark


@dataclass(frozen=True)
class BenchConfig:
    world: WorldConfig = field(default_factory=lambda: WorldConfig(n_obstacles=0))
    mpc: MpcConfig = field(default_factory=MpcConfig)
    limits: Limits = field(default_factory=Limits)
    goal_tolerance: float = 0.1
    timeout: float = 60.0  # simulated seconds per instance
    obs_horizon: int = 20


def make_planner(kind, n, cfg: BenchConfig, weights=None):
    kind = PlannerKind(kind)
    metric = cfg.world.metric()
    r = cfg.world.robot_radius
    if kind is PlannerKind.CENTRALIZED:
        return CentralizedPlanner(n, cfg.mpc, cfg.limits, metric, r)
    if kind is PlannerKind.RNN and weights is None:
        raise ValueError("the rnn planner needs model weights")
    predictor = make_predictor(kind.value, weights, obs_horizon=cfg.obs_horizon)
    return DecentralizedPlanner(n, predictor, cfg.mpc, cfg.limits, metric, r, cfg.obs_horizon)


def simulate_instance(scenario: Scenario, planner_kind, cfg: BenchConfig, weights=None, max_ticks=None,
                      record_plans=False):
    starts, goals, obs_pos, obs_vel = scenario.build(cfg.world)
    planner = make_planner(planner_kind, scenario.n_robots, cfg, weights)
    sim = Simulation(cfg.world, planner, starts, goals, obs_pos, obs_vel,
                     np.random.default_rng(scenario.instance_seed), goal_mode="fixed",
                     goal_tolerance=cfg.goal_tolerance, record_plans=record_plans)
    limit = int(round(cfg.timeout / cfg.world.dt)) if max_ticks is None else max_ticks
    sim.run(limit, stop_when_arrived=True)
    return sim


def run_instance(scenario: Scenario, planner_kind, cfg: BenchConfig, weights=None) -> InstanceResult:
    sim = simulate_instance(scenario, planner_kind, cfg, weights)
    L = sim.log
    arr = L.arrays()
    # positions visited, including the final state after the last tick
    path = np.concatenate([arr["robot_pos"], sim.pos[None]], axis=0)
    steps = np.linalg.norm(np.diff(path, axis=0), axis=2)  # (T, n)
    lengths, durations = [], []
    for i in range(sim.n):
        a = sim.arrival_tick[i]
        if a < 0:
            lengths.append(float(steps[:, i].sum()))
            durations.append(float("nan"))
        else:
            lengths.append(float(steps[:a, i].sum()))
            durations.append(a * cfg.world.dt)
    coll = np.asarray(L.collisions_rr) + np.asarray(L.collisions_ro)
    # the final state is never recorded as a tick row; check it too
    rr, ro = count_collisions(sim.pos, sim.obs_pos, cfg.world.robot_radius, sim.metric)
    collision_ticks = int(np.count_nonzero(coll)) + int(rr + ro > 0)
    times = np.asarray(L.solve_times, dtype=float)
    return InstanceResult(scenario.kind.value, PlannerKind(planner_kind).value, scenario.instance_seed,
                          collision_ticks > 0, not sim.all_arrived(), len(L), collision_ticks,
                          lengths, durations, int(np.sum(arr["failed"])),
                          float(times.mean()) if times.size else 0.0)


def _run_job(args):
    return run_instance(*args)


def run_planning_benchmark(kind, n_instances, planner_kinds, cfg: BenchConfig | None = None,
                           weights=None, n_robots=4, n_obstacles=0, seed=0, jobs=1):
    """Metrics per planner plus the raw per-instance results."""
    cfg = cfg or BenchConfig()
    scenarios = [Scenario(kind, n_robots, n_obstacles, seed + i) for i in range(n_instances)]
    jobs_list = [(s, p, cfg, weights) for p in planner_kinds for s in scenarios]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_job, jobs_list))
    else:
        results = [_run_job(j) for j in jobs_list]
    metrics, raw = {}, {}
    for p in planner_kinds:
        key = PlannerKind(p).value
        raw[key] = [r for r in results if r.planner == key]
        metrics[key] = PlanningMetrics.from_results(raw[key])
        metrics[key].scenario = ScenarioKind(kind).value
        metrics[key].planner = key
    return metrics, raw


# ---------------------------------------------------------------------------
# export

PLANNING_COLUMNS = ["scenario", "planner", "instances", "collision_instances", "timeouts",
                    "length_min", "length_avg", "length_std", "length_max",
                    "duration_min", "duration_avg", "duration_std", "duration_max",
                    "speed_avg", "speed_std"]
PREDICTION_COLUMNS = ["subset", "predictor", "step", "time", "mean_error", "std_error"]


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else str(x)


def export_results(path, planning: list[PlanningMetrics] = (), prediction: list[PredictionMetrics] = ()):
    """Write planning.csv, prediction.csv and summary.json into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    planning = list(planning)
    if isinstance(prediction, PredictionMetrics):
        prediction = [prediction]
    prediction = list(prediction or ())
    with open(os.path.join(path, "planning.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PLANNING_COLUMNS)
        for m in planning:
            L, D, S = m.trajectory_length, m.trajectory_duration, m.average_speed
            w.writerow([_fmt(x) for x in (m.scenario, m.planner, m.instances, m.collision_instances,
                                          m.timeouts, L.min, L.avg, L.std, L.max,
                                          D.min, D.avg, D.std, D.max, S.avg, S.std)])
    with open(os.path.join(path, "prediction.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PREDICTION_COLUMNS)
        for pm in prediction:
            for name in sorted(pm.mean):
                for k, (mu, sd) in enumerate(zip(pm.mean[name], pm.std[name]), start=1):
                    w.writerow([pm.subset, name, k, _fmt(k * pm.dt), _fmt(mu), _fmt(sd)])
    summary = _json_safe(dict(planning=[asdict(m) for m in planning],
                              prediction=[asdict(pm) for pm in prediction]))
    with open(os.path.join(path, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, allow_nan=False)
    return summary


def _json_safe(x):
    # NaN (no successful instance) becomes null
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def load_summary(path):
    with open(os.path.join(path, "summary.json")) as f:
        d = json.load(f)
    planning = [PlanningMetrics.from_dict(m) for m in d["planning"]]
    prediction = [PredictionMetrics.from_dict(pm) for pm in d["prediction"]]
    return planning, prediction
