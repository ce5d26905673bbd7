"""Observation histories consumed by the trajectory predictors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ObservationHistory:
    """Everything an observer knows about one query robot at the current tick.

    Sequences run oldest to newest and have T_O + 1 entries. All relative
    quantities are other-minus-query.
    """

    ego_velocities: np.ndarray  # (T, 3)
    neighbor_rel_positions: np.ndarray  # (M, T, 3)
    neighbor_rel_velocities: np.ndarray  # (M, T, 3)
    obstacle_rel_positions: np.ndarray  # (K, 3)
    obstacle_rel_velocities: np.ndarray  # (K, 3)
    ego_position: np.ndarray  # (3,)

    def __post_init__(self):
        self.ego_velocities = np.asarray(self.ego_velocities, dtype=float).reshape(-1, 3)
        T = len(self.ego_velocities)
        self.neighbor_rel_positions = np.asarray(self.neighbor_rel_positions, dtype=float).reshape(-1, T, 3)
        self.neighbor_rel_velocities = np.asarray(self.neighbor_rel_velocities, dtype=float).reshape(-1, T, 3)
        self.obstacle_rel_positions = np.asarray(self.obstacle_rel_positions, dtype=float).reshape(-1, 3)
        self.obstacle_rel_velocities = np.asarray(self.obstacle_rel_velocities, dtype=float).reshape(-1, 3)
        self.ego_position = np.asarray(self.ego_position, dtype=float).reshape(3)
        if self.neighbor_rel_positions.shape != self.neighbor_rel_velocities.shape:
            raise ValueError("neighbor position and velocity histories differ in shape")
        if self.obstacle_rel_positions.shape != self.obstacle_rel_velocities.shape:
            raise ValueError("obstacle position and velocity arrays differ in shape")

    @property
    def length(self):
        return len(self.ego_velocities)

    @property
    def n_neighbors(self):
        return len(self.neighbor_rel_positions)

    @property
    def n_obstacles(self):
        return len(self.obstacle_rel_positions)


def history_from_window(pos, vel, query, obs_pos, obs_vel) -> ObservationHistory:
    """Re-centre a window of observed robot states on ``query``.

    pos, vel: (T, n, 3) robot states over the window; obs_pos, obs_vel:
    (K, 3) obstacle states at the newest tick. Every robot other than the
    query, including the observer itself, becomes a neighbour.
    """
    others = [k for k in range(pos.shape[1]) if k != query]
    qp = pos[:, query]
    qv = vel[:, query]
    rel_p = np.transpose(pos[:, others] - qp[:, None], (1, 0, 2))
    rel_v = np.transpose(vel[:, others] - qv[:, None], (1, 0, 2))
    obs_pos = np.asarray(obs_pos, dtype=float).reshape(-1, 3)
    obs_vel = np.asarray(obs_vel, dtype=float).reshape(-1, 3)
    return ObservationHistory(qv, rel_p, rel_v, obs_pos - qp[-1], obs_vel - qv[-1], qp[-1])
