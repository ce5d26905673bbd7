"""Multi-robot planning per tick: decentralized (predicted neighbours) and
centralized sequential (communicated plans)."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dynamics import Limits, predict_constant_velocity
from .mpc import MpcConfig, MpcSolution, NeighborPrediction, SolverFailure, solve
from .predictors import (Blackboard, ObservationBuffer, OraclePredictor, PlannedTrajectory,
                         predict_oracle)
from .world import EllipsoidMetric, RobotState


@dataclass
class SolveRecord:
    robot: int
    objective: float = float("nan")
    max_slack: float = float("nan")
    iterations: int = 0
    converged: bool = False
    failed: bool = False
    solve_time: float = 0.0


def _obstacle_forecasts(obstacle_pos, obstacle_vel, n, dt):
    obstacle_pos = np.asarray(obstacle_pos, dtype=float).reshape(-1, 3)
    obstacle_vel = np.asarray(obstacle_vel, dtype=float).reshape(-1, 3)
    if not len(obstacle_pos):
        return np.zeros((0, n, 3))
    return np.stack([predict_constant_velocity(p, v, n, dt) for p, v in zip(obstacle_pos, obstacle_vel)])


class _PlannerBase:
    def __init__(self, n_robots, cfg: MpcConfig, limits: Limits, metric: EllipsoidMetric, robot_radius):
        self.n = n_robots
        self.cfg = cfg
        self.limits = limits
        self.metric = metric
        self.r = robot_radius
        self.solutions: list[MpcSolution | None] = [None] * n_robots

    def reset(self):
        self.solutions = [None] * self.n

    def _solve_one(self, i, pos, vel, goal, preds):
        rec = SolveRecord(i)
        t0 = time.perf_counter()
        try:
            sol = solve(RobotState(pos, vel), goal, preds, self.cfg, self.limits, self.metric,
                        self.r, self.solutions[i])
        except SolverFailure:
            rec.failed = True
            rec.solve_time = time.perf_counter() - t0
            self.solutions[i] = None
            return np.zeros(3), rec
        rec.solve_time = time.perf_counter() - t0
        rec.objective = sol.objective
        rec.max_slack = sol.max_slack
        rec.iterations = sol.iterations
        rec.converged = sol.converged
        self.solutions[i] = sol
        return sol.inputs[0].copy(), rec

    def plans(self):
        """Current planned positions (n, N, 3); NaN for robots without a plan."""
        out = np.full((self.n, self.cfg.horizon_steps, 3), np.nan)
        for i, s in enumerate(self.solutions):
            if s is not None:
                out[i] = s.plan
        return out


class DecentralizedPlanner(_PlannerBase):
    """Every robot predicts its neighbours from its own observations and plans independently."""

    def __init__(self, n_robots, predictor, cfg, limits, metric, robot_radius, obs_horizon=20):
        super().__init__(n_robots, cfg, limits, metric, robot_radius)
        self.predictor = predictor
        self.buffers = [ObservationBuffer(obs_horizon + 1) for _ in range(n_robots)]
        self.blackboard = predictor.blackboard if isinstance(predictor, OraclePredictor) else Blackboard()

    def reset(self):
        super().reset()
        for b in self.buffers:
            b.pos.clear()
            b.vel.clear()
        self.blackboard.clear()

    def step(self, robot_pos, robot_vel, goals, obstacle_pos=(), obstacle_vel=(), tick=0):
        n, N, dt = self.n, self.cfg.horizon_steps, self.cfg.dt
        robot_pos = np.asarray(robot_pos, dtype=float)
        robot_vel = np.asarray(robot_vel, dtype=float)
        for buf in self.buffers:
            buf.observe(robot_pos, robot_vel, obstacle_pos, obstacle_vel)
        requests = [(i, j) for i in range(n) for j in range(n) if j != i]
        forecasts = self.predictor.predict(requests, self.buffers, N, dt, tick)
        by_ego = {i: [] for i in range(n)}
        for (i, _), f in zip(requests, forecasts):
            by_ego[i].append(f)
        inputs = np.zeros((n, 3))
        records = []
        for i in range(n):
            obs_pos, obs_vel = self.buffers[i].obs_pos, self.buffers[i].obs_vel
            preds = NeighborPrediction(np.array(by_ego[i]).reshape(-1, N, 3),
                                       _obstacle_forecasts(obs_pos, obs_vel, N, dt))
            inputs[i], rec = self._solve_one(i, robot_pos[i], robot_vel[i], goals[i], preds)
            records.append(rec)
        # plans become visible to others from the next tick on
        for i, s in enumerate(self.solutions):
            if s is not None:
                self.blackboard.publish(i, s.plan, tick)
        return inputs, records

    plan_step_all = step


class CentralizedPlanner(_PlannerBase):
    """Robots solve in index order, each against the most recent plan of every other robot.

    Robots earlier in the order have already replanned this tick; later ones
    contribute last tick's plan advanced by one step. Robots without any
    plan yet are extrapolated at constant velocity.
    """

    def __init__(self, n_robots, cfg, limits, metric, robot_radius):
        super().__init__(n_robots, cfg, limits, metric, robot_radius)
        self.plan_ticks = [None] * n_robots

    def reset(self):
        super().reset()
        self.plan_ticks = [None] * self.n

    def step(self, robot_pos, robot_vel, goals, obstacle_pos=(), obstacle_vel=(), tick=0):
        n, N, dt = self.n, self.cfg.horizon_steps, self.cfg.dt
        robot_pos = np.asarray(robot_pos, dtype=float)
        robot_vel = np.asarray(robot_vel, dtype=float)
        obstacles = _obstacle_forecasts(obstacle_pos, obstacle_vel, N, dt)
        inputs = np.zeros((n, 3))
        records = []
        for i in range(n):
            trajs = []
            for j in range(n):
                if j == i:
                    continue
                sol = self.solutions[j]
                if sol is None or self.plan_ticks[j] is None or self.plan_ticks[j] < tick - 1:
                    trajs.append(predict_constant_velocity(robot_pos[j], robot_vel[j], N, dt))
                else:
                    trajs.append(predict_oracle(PlannedTrajectory(sol.plan, self.plan_ticks[j]), tick).positions)
            preds = NeighborPrediction(np.array(trajs).reshape(-1, N, 3), obstacles)
            inputs[i], rec = self._solve_one(i, robot_pos[i], robot_vel[i], goals[i], preds)
            self.plan_ticks[i] = tick if not rec.failed else None
            records.append(rec)
        return inputs, records

    centralized_sequential_step = step


def plan_step_all(planner: DecentralizedPlanner, robot_pos, robot_vel, goals, obstacle_pos=(),
                  obstacle_vel=(), tick=0):
    """One decentralized tick: every robot predicts its neighbours and plans; returns first inputs."""
    return planner.step(robot_pos, robot_vel, goals, obstacle_pos, obstacle_vel, tick)


def centralized_sequential_step(planner: CentralizedPlanner, robot_pos, robot_vel, goals,
                                obstacle_pos=(), obstacle_vel=(), tick=0):
    return planner.step(robot_pos, robot_vel, goals, obstacle_pos, obstacle_vel, tick)
