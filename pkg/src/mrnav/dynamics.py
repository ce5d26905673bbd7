"""Double-integrator robot model and constant-velocity extrapolation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import ObstacleState, RobotState


@dataclass(frozen=True)
class Limits:
    """Componentwise box bounds on velocity and acceleration."""

    v_max: float = 2.0
    u_max: float = 4.0

    def __post_init__(self):
        if not (self.v_max > 0 and self.u_max > 0):
            raise ValueError("v_max and u_max must be positive")


@dataclass(frozen=True)
class ControlInput:
    acceleration: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.acceleration, dtype=float).reshape(3)
        if not np.all(np.isfinite(a)):
            raise ValueError("acceleration must be finite")
        object.__setattr__(self, "acceleration", a)

    def within(self, limits: Limits, tol=1e-9) -> bool:
        return bool(np.all(np.abs(self.acceleration) <= limits.u_max + tol))


def step(state: RobotState, u, dt: float) -> RobotState:
    a = u.acceleration if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    p = state.position + state.velocity * dt + 0.5 * a * dt * dt
    v = state.velocity + a * dt
    return RobotState(p, v)


def rollout(p0, v0, inputs, dt):
    """Integrate a (K, 3) input sequence; returns positions and velocities of shape (K+1, 3)."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 3)
    k = len(inputs)
    pos = np.empty((k + 1, 3))
    vel = np.empty((k + 1, 3))
    pos[0] = p0
    vel[0] = v0
    for t in range(k):
        pos[t + 1] = pos[t] + vel[t] * dt + 0.5 * inputs[t] * dt * dt
        vel[t + 1] = vel[t] + inputs[t] * dt
    return pos, vel


def predict_constant_velocity(position, velocity, steps: int, dt: float) -> np.ndarray:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    k = np.arange(1, steps + 1, dtype=float)[:, None]
    return np.asarray(position, dtype=float) + k * dt * np.asarray(velocity, dtype=float)


def predict_obstacle(obs: ObstacleState, horizon_steps: int, dt: float) -> np.ndarray:
    """Positions at steps 1..horizon_steps assuming the current velocity is held."""
    return predict_constant_velocity(obs.position, obs.velocity, horizon_steps, dt)
