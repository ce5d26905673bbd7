"""Neighbour trajectory predictors.

Three interchangeable strategies supply the N-step position forecasts an
ego robot plans against:

* constant velocity: extrapolate the neighbour's current velocity;
* communication oracle: read the neighbour's own published MPC plan;
* learned model: run the interaction-aware network on the ego's own
  observation buffer, re-centred on the neighbour being predicted.

The CVM and learned predictors only ever see an ``ObservationBuffer`` (what
the ego has observed); the oracle is the only one with access to the plan
blackboard.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np

from .dynamics import predict_constant_velocity
from .neural.model import ModelContractError, ModelWeights, collate, forward_batch
from .observation import ObservationHistory, history_from_window

__all__ = [
    "ObservationHistory", "PredictorKind", "PlannedTrajectory", "ObservationBuffer",
    "Blackboard", "predict_cvm", "predict_oracle", "predict_rnn", "integrate_velocities",
    "CvmPredictor", "OraclePredictor", "RnnPredictor", "make_predictor",
]


class PredictorKind(str, enum.Enum):
    CONSTANT_VELOCITY = "cvm"
    COMMUNICATION_ORACLE = "oracle"
    LEARNED_RNN = "rnn"


@dataclass
class PlannedTrajectory:
    positions: np.ndarray  # (N, 3), steps 1..N after ``tick``
    tick: int = 0
    fallback: bool = False  # produced by CVM because no plan was available


def predict_cvm(neighbor_pos, neighbor_vel, steps, dt) -> PlannedTrajectory:
    return PlannedTrajectory(predict_constant_velocity(neighbor_pos, neighbor_vel, steps, dt))


def predict_oracle(neighbor_last_plan: PlannedTrajectory | None, current_tick, neighbor_pos=None,
                   neighbor_vel=None, steps=None, dt=None) -> PlannedTrajectory:
    """The neighbour's own plan, advanced to ``current_tick`` if it is one tick old."""
    if neighbor_last_plan is None:
        if neighbor_pos is None:
            raise ValueError("no plan available and no state given for the CVM fallback")
        out = predict_cvm(neighbor_pos, neighbor_vel, steps, dt)
        out.tick = current_tick
        out.fallback = True
        return out
    plan = np.asarray(neighbor_last_plan.positions, dtype=float)
    age = current_tick - neighbor_last_plan.tick
    if age == 0:
        return PlannedTrajectory(plan.copy(), current_tick)
    if age == 1:
        return PlannedTrajectory(np.vstack([plan[1:], plan[-1:]]), current_tick)
    raise ValueError(f"plan is {age} ticks old; only current or previous tick plans are usable")


def integrate_velocities(origin, velocities, dt) -> np.ndarray:
    """Positions p^k = origin + dt * sum_{j<=k} v^j."""
    return np.asarray(origin, dtype=float) + dt * np.cumsum(np.asarray(velocities, dtype=float), axis=-2)


def predict_rnn(history: ObservationHistory, weights: ModelWeights, steps, dt,
                zero_env=False) -> PlannedTrajectory:
    if steps > weights.pred_horizon:
        raise ModelContractError(f"requested {steps} steps but the model predicts {weights.pred_horizon}")
    weights.check_consistent()
    v, _ = forward_batch(weights, collate([history]), zero_env)
    return PlannedTrajectory(integrate_velocities(history.ego_position, v[0], dt)[:steps])


class ObservationBuffer:
    """One observer's memory of all robot and obstacle states.

    Holds the newest ``capacity`` snapshots. Windows are front-padded by
    repeating the oldest snapshot until enough ticks have been observed.
    """

    def __init__(self, capacity):
        self.capacity = capacity
        self.pos = deque(maxlen=capacity)
        self.vel = deque(maxlen=capacity)
        self.obs_pos = np.zeros((0, 3))
        self.obs_vel = np.zeros((0, 3))

    def observe(self, robot_pos, robot_vel, obstacle_pos, obstacle_vel):
        self.pos.append(np.array(robot_pos, dtype=float))
        self.vel.append(np.array(robot_vel, dtype=float))
        self.obs_pos = np.array(obstacle_pos, dtype=float).reshape(-1, 3)
        self.obs_vel = np.array(obstacle_vel, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.pos)

    def window(self, length):
        if not self.pos:
            raise ValueError("nothing observed yet")
        pos = list(self.pos)[-length:]
        vel = list(self.vel)[-length:]
        pad = length - len(pos)
        pos = [pos[0]] * pad + pos
        vel = [vel[0]] * pad + vel
        return np.stack(pos), np.stack(vel)

    def current(self):
        return self.pos[-1], self.vel[-1]

    def history(self, query, length) -> ObservationHistory:
        pos, vel = self.window(length)
        return history_from_window(pos, vel, query, self.obs_pos, self.obs_vel)


class Blackboard:
    """In-process stand-in for plan broadcasting between robots."""

    def __init__(self):
        self.plans: dict[int, PlannedTrajectory] = {}

    def publish(self, robot, positions, tick):
        self.plans[robot] = PlannedTrajectory(np.array(positions, dtype=float), tick)

    def latest(self, robot):
        return self.plans.get(robot)

    def clear(self):
        self.plans.clear()


class CvmPredictor:
    kind = PredictorKind.CONSTANT_VELOCITY

    def predict(self, requests, buffers, steps, dt, tick=0):
        """Forecasts for a list of (ego, query) pairs; returns a list of (steps, 3) arrays."""
        out = []
        for ego, query in requests:
            pos, vel = buffers[ego].current()
            out.append(predict_cvm(pos[query], vel[query], steps, dt).positions)
        return out


class OraclePredictor:
    kind = PredictorKind.COMMUNICATION_ORACLE

    def __init__(self, blackboard: Blackboard):
        self.blackboard = blackboard
        self.fallbacks = 0

    def predict(self, requests, buffers, steps, dt, tick=0):
        out = []
        for ego, query in requests:
            pos, vel = buffers[ego].current()
            tr = predict_oracle(self.blackboard.latest(query), tick, pos[query], vel[query], steps, dt)
            self.fallbacks += tr.fallback
            out.append(tr.positions)
        return out


class RnnPredictor:
    kind = PredictorKind.LEARNED_RNN

    def __init__(self, weights: ModelWeights, obs_horizon=20, zero_env=False):
        weights.check_consistent()
        self.weights = weights
        self.obs_horizon = obs_horizon
        self.zero_env = zero_env

    def histories(self, requests, buffers):
        return [buffers[ego].history(query, self.obs_horizon + 1) for ego, query in requests]

    def predict(self, requests, buffers, steps, dt, tick=0):
        if not requests:
            return []
        if steps > self.weights.pred_horizon:
            raise ModelContractError(
                f"requested {steps} steps but the model predicts {self.weights.pred_horizon}")
        hist = self.histories(requests, buffers)
        v, _ = forward_batch(self.weights, collate(hist), self.zero_env)
        origins = np.stack([h.ego_position for h in hist])
        pos = integrate_velocities(origins[:, None, :], v, dt)
        return list(pos[:, :steps])


def make_predictor(kind, weights=None, blackboard=None, obs_horizon=20):
    kind = PredictorKind(kind)
    if kind is PredictorKind.CONSTANT_VELOCITY:
        return CvmPredictor()
    if kind is PredictorKind.COMMUNICATION_ORACLE:
        return OraclePredictor(blackboard if blackboard is not None else Blackboard())
    if weights is None:
        raise ValueError("the learned predictor needs model weights")
    return RnnPredictor(weights, obs_horizon)
