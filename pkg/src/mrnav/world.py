"""Workspace geometry, agent states and the collision predicates.

Every other module checks clearance through the two predicates defined
here so that planning constraints and benchmark collision counting agree.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidGeometryError(ValueError):
    pass


def _vec3(x, name):
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


@dataclass(frozen=True)
class WorldConfig:
    extent_min: tuple = (-3.0, -3.0, 0.0)
    extent_max: tuple = (3.0, 3.0, 3.0)
    robot_radius: float = 0.4
    obstacle_semi_axes: tuple = (0.4, 0.4, 0.9)
    n_robots: int = 4
    n_obstacles: int = 2
    dt: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        lo = _vec3(self.extent_min, "extent_min")
        hi = _vec3(self.extent_max, "extent_max")
        if not np.all(lo < hi):
            raise InvalidGeometryError("extent_min must be < extent_max componentwise")
        if self.robot_radius <= 0:
            raise InvalidGeometryError("robot_radius must be positive")
        if np.any(_vec3(self.obstacle_semi_axes, "obstacle_semi_axes") <= 0):
            raise InvalidGeometryError("obstacle semi-axes must be positive")
        if self.dt <= 0:
            raise InvalidGeometryError("dt must be positive")
        if self.n_robots < 0 or self.n_obstacles < 0:
            raise InvalidGeometryError("agent counts must be non-negative")
        object.__setattr__(self, "extent_min", tuple(float(v) for v in lo))
        object.__setattr__(self, "extent_max", tuple(float(v) for v in hi))
        object.__setattr__(self, "obstacle_semi_axes",
                           tuple(float(v) for v in self.obstacle_semi_axes))

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.extent_min)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.extent_max)

    def contains(self, p, margin=0.0) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.lo + margin) and np.all(p <= self.hi - margin))

    def metric(self) -> "EllipsoidMetric":
        return build_ellipsoid_metric(self.obstacle_semi_axes, self.robot_radius)


@dataclass(frozen=True)
class RobotState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position, "position"))
        object.__setattr__(self, "velocity", _vec3(self.velocity, "velocity"))

    def __eq__(self, other):
        if not isinstance(other, RobotState):
            return NotImplemented
        return (np.array_equal(self.position, other.position)
                and np.array_equal(self.velocity, other.velocity))

    __hash__ = None


@dataclass(frozen=True)
class ObstacleState(RobotState):
    """Centre and velocity of an upright, axis-aligned ellipsoid."""


@dataclass(frozen=True)
class EllipsoidMetric:
    """Diagonal of the matrix that maps an obstacle's inflated ellipsoid to the unit ball."""

    omega_diag: np.ndarray

    def __post_init__(self):
        d = _vec3(self.omega_diag, "omega_diag")
        if np.any(d <= 0):
            raise InvalidGeometryError("omega_diag entries must be positive")
        object.__setattr__(self, "omega_diag", d)

    def norm(self, d) -> np.ndarray:
        """Weighted norm sqrt(d^T diag(omega) d) along the last axis."""
        d = np.asarray(d, dtype=float)
        return np.sqrt(np.sum(self.omega_diag * d * d, axis=-1))


def build_ellipsoid_metric(semi_axes, robot_radius) -> EllipsoidMetric:
    axes = np.asarray(semi_axes, dtype=float).reshape(-1)
    if axes.shape != (3,) or np.any(~np.isfinite(axes)) or np.any(axes <= 0):
        raise InvalidGeometryError(f"semi-axes must be three positive numbers, got {semi_axes}")
    # a zero robot radius is accepted: the ellipsoid itself is then the keep-out set
    if not np.isfinite(robot_radius) or robot_radius < 0:
        raise InvalidGeometryError(f"robot radius must be non-negative, got {robot_radius}")
    return EllipsoidMetric(1.0 / (axes + robot_radius) ** 2)


def weighted_sq_norm(x, q_diag) -> np.ndarray:
    """x^T Q x for diagonal Q, along the last axis."""
    x = np.asarray(x, dtype=float)
    return np.sum(np.asarray(q_diag) * x * x, axis=-1)


def robots_collision_free(p_i, p_j, r) -> bool:
    d = np.asarray(p_i, dtype=float) - np.asarray(p_j, dtype=float)
    return bool(np.linalg.norm(d) >= 2.0 * r)


def robot_obstacle_collision_free(p_i, p_o, metric: EllipsoidMetric) -> bool:
    d = np.asarray(p_i, dtype=float) - np.asarray(p_o, dtype=float)
    return bool(metric.norm(d) >= 1.0)


def count_collisions(robot_pos, obstacle_pos, r, metric: EllipsoidMetric):
    """Number of colliding robot pairs and robot-obstacle pairs at one instant.

    Applies the same predicates as above, vectorised over all pairs.
    """
    robot_pos = np.asarray(robot_pos, dtype=float).reshape(-1, 3)
    n = len(robot_pos)
    rr = 0
    if n > 1:
        iu, ju = np.triu_indices(n, 1)
        dist = np.linalg.norm(robot_pos[iu] - robot_pos[ju], axis=1)
        rr = int(np.sum(dist < 2.0 * r))
    ro = 0
    obstacle_pos = np.asarray(obstacle_pos, dtype=float).reshape(-1, 3)
    if len(obstacle_pos) and n:
        d = robot_pos[:, None, :] - obstacle_pos[None, :, :]
        ro = int(np.sum(metric.norm(d) < 1.0))
    return rr, ro
