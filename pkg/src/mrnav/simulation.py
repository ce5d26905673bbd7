"""Closed-loop simulation of robots, moving obstacles and a multi-robot planner."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .world import EllipsoidMetric, WorldConfig, count_collisions

log = logging.getLogger(__name__)

SPAWN_CLEARANCE = 2.0  # obstacles respawn at least this weighted distance from every robot


def random_unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_obstacle_velocity(rng, speed_range=(0.5, 1.2)):
    speed = rng.uniform(*speed_range)
    return speed * random_unit_vectors(rng, 1)[0]


def sample_free_point(rng, world: WorldConfig, robot_pos, obstacle_pos, metric: EllipsoidMetric,
                      margin=0.5, robot_clearance=None, obstacle_clearance=1.0, max_tries=10000):
    """Uniform point inside the shrunk workspace that keeps clear of robots and obstacles."""
    lo, hi = world.lo + margin, world.hi - margin
    robot_pos = np.asarray(robot_pos, dtype=float).reshape(-1, 3)
    obstacle_pos = np.asarray(obstacle_pos, dtype=float).reshape(-1, 3)
    rc = 2.0 * world.robot_radius if robot_clearance is None else robot_clearance
    for _ in range(max_tries):
        p = rng.uniform(lo, hi)
        if len(robot_pos) and np.any(np.linalg.norm(robot_pos - p, axis=1) < rc):
            continue
        if len(obstacle_pos) and np.any(metric.norm(obstacle_pos - p) < obstacle_clearance):
            continue
        return p
    raise RuntimeError("could not sample a collision-free point; workspace too crowded")


@dataclass
class SimLog:
    """Per-tick record of a run. Row t holds the state at the start of tick t."""

    dt: float
    robot_radius: float
    robot_pos: list = field(default_factory=list)
    robot_vel: list = field(default_factory=list)
    obstacle_pos: list = field(default_factory=list)
    obstacle_vel: list = field(default_factory=list)
    goals: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    max_slack: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    collisions_rr: list = field(default_factory=list)
    collisions_ro: list = field(default_factory=list)
    solve_times: list = field(default_factory=list)  # wall clock; never written to artifacts
    events: list = field(default_factory=list)
    seed: int | None = None

    def __len__(self):
        return len(self.robot_pos)

    def arrays(self):
        n = np.asarray(self.robot_pos).shape[1] if self.robot_pos else 0
        k = np.asarray(self.obstacle_pos[0]).shape[0] if self.obstacle_pos else 0
        T = len(self)

        def stack(x, shape):
            return np.asarray(x, dtype=float).reshape((T,) + shape) if T else np.zeros((0,) + shape)

        return dict(
            robot_pos=stack(self.robot_pos, (n, 3)),
            robot_vel=stack(self.robot_vel, (n, 3)),
            obstacle_pos=stack(self.obstacle_pos, (k, 3)),
            obstacle_vel=stack(self.obstacle_vel, (k, 3)),
            goals=stack(self.goals, (n, 3)),
            inputs=stack(self.inputs, (n, 3)),
            max_slack=stack(self.max_slack, (n,)),
            objective=stack(self.objective, (n,)),
            failed=np.asarray(self.failed, dtype=bool).reshape(T, n) if T else np.zeros((0, n), bool),
            collisions_rr=np.asarray(self.collisions_rr, dtype=int),
            collisions_ro=np.asarray(self.collisions_ro, dtype=int),
        )

    @property
    def total_collisions(self):
        return int(np.sum(self.collisions_rr) + np.sum(self.collisions_ro))


class Simulation:
    """Robots under a planner plus constant-velocity obstacles with noisy velocities.

    goal_mode "resample" gives a robot a fresh random goal once it is within
    ``goal_tolerance`` (or after ``goal_timeout`` seconds); "fixed" keeps the
    initial goals and records when each robot first arrives.
    """

    def __init__(self, world: WorldConfig, planner, robot_pos, goals, obstacle_pos=(), obstacle_vel=(),
                 rng=None, goal_mode="fixed", goal_tolerance=0.1, goal_timeout=None,
                 obstacle_noise_std=0.0, respawn_obstacles=True, record_plans=False):
        self.world = world
        self.metric = world.metric()
        self.planner = planner
        self.rng = rng if rng is not None else np.random.default_rng(world.rng_seed)
        self.pos = np.array(robot_pos, dtype=float).reshape(-1, 3)
        self.vel = np.zeros_like(self.pos)
        self.goals = np.array(goals, dtype=float).reshape(-1, 3)
        self.obs_pos = np.array(obstacle_pos, dtype=float).reshape(-1, 3)
        self.obs_vel = np.array(obstacle_vel, dtype=float).reshape(-1, 3)
        self.goal_mode = goal_mode
        self.goal_tolerance = goal_tolerance
        self.goal_timeout = goal_timeout
        self.noise = obstacle_noise_std
        self.respawn = respawn_obstacles
        self.record_plans = record_plans
        self.tick = 0
        self.goal_set_tick = np.zeros(len(self.pos), dtype=int)
        self.arrival_tick = np.full(len(self.pos), -1)
        self.log = SimLog(world.dt, world.robot_radius)

    @property
    def n(self):
        return len(self.pos)

    def at_goal(self):
        return np.linalg.norm(self.pos - self.goals, axis=1) <= self.goal_tolerance

    def all_arrived(self):
        return bool(np.all(self.at_goal()))

    def _record_state(self):
        L = self.log
        L.robot_pos.append(self.pos.copy())
        L.robot_vel.append(self.vel.copy())
        L.obstacle_pos.append(self.obs_pos.copy())
        L.obstacle_vel.append(self.obs_vel.copy())
        L.goals.append(self.goals.copy())
        rr, ro = count_collisions(self.pos, self.obs_pos, self.world.robot_radius, self.metric)
        L.collisions_rr.append(rr)
        L.collisions_ro.append(ro)
        if rr or ro:
            L.events.append((self.tick, "collision", f"robot-robot {rr} robot-obstacle {ro}"))

    def step(self):
        dt = self.world.dt
        self._record_state()
        inputs, records = self.planner.step(self.pos, self.vel, self.goals, self.obs_pos, self.obs_vel,
                                            self.tick)
        L = self.log
        L.inputs.append(inputs.copy())
        L.max_slack.append([0.0 if r.failed else r.max_slack for r in records])
        L.objective.append([np.nan if r.failed else r.objective for r in records])
        L.failed.append([r.failed for r in records])
        L.solve_times.append([r.solve_time for r in records])
        for r in records:
            if r.failed:
                L.events.append((self.tick, "planner_failure", f"robot {r.robot}"))
        if self.record_plans:
            L.plans.append(self.planner.plans())

        self.pos = self.pos + self.vel * dt + 0.5 * inputs * dt * dt
        self.vel = self.vel + inputs * dt
        self._move_obstacles()
        self.tick += 1
        self._update_goals()

    def _move_obstacles(self):
        if not len(self.obs_pos):
            return
        dt = self.world.dt
        if self.noise > 0:
            self.obs_vel = self.obs_vel + self.rng.normal(scale=self.noise, size=self.obs_vel.shape)
        self.obs_pos = self.obs_pos + self.obs_vel * dt
        if not self.respawn:
            return
        for o in range(len(self.obs_pos)):
            if self.world.contains(self.obs_pos[o]):
                continue
            self.obs_pos[o] = self._spawn_point()
            self.obs_vel[o] = sample_obstacle_velocity(self.rng)
            self.log.events.append((self.tick, "respawn", f"obstacle {o}"))

    def _spawn_point(self):
        lo, hi = self.world.lo, self.world.hi
        for _ in range(10000):
            p = self.rng.uniform(lo, hi)
            if np.all(self.metric.norm(self.pos - p) >= SPAWN_CLEARANCE):
                return p
        raise RuntimeError("no room to respawn an obstacle")

    def _update_goals(self):
        reached = self.at_goal()
        if self.goal_mode == "fixed":
            newly = reached & (self.arrival_tick < 0)
            self.arrival_tick[newly] = self.tick
            return
        timeout = np.zeros(self.n, dtype=bool)
        if self.goal_timeout is not None:
            timeout = (self.tick - self.goal_set_tick) * self.world.dt >= self.goal_timeout
        for i in np.nonzero(reached | timeout)[0]:
            others = np.delete(self.goals, i, axis=0)
            self.goals[i] = sample_free_point(
                self.rng, self.world, np.vstack([self.pos, others]), self.obs_pos, self.metric)
            self.goal_set_tick[i] = self.tick
            self.log.events.append((self.tick, "new_goal" if reached[i] else "goal_timeout", f"robot {i}"))

    def run(self, n_ticks, stop_when_arrived=False):
        for _ in range(n_ticks):
            if stop_when_arrived and self.all_arrived():
                break
            self.step()
        return self.log
