"""Receding-horizon collision-avoidance planner for one robot.

The nonconvex clearance constraints

    ||p^k - p_j^k||          >= 2r - s^k     (other robots)
    ||p^k - p_o^k||_Omega    >= 1  - s^k     (obstacles)

are handled by sequential convexification. Both left-hand sides are convex
in p^k, so any supporting half-space of the keep-out set (in particular
the first-order expansion around the previous iterate) is a conservative
under-estimator: every point feasible for it is feasible for the original
constraint. A position trust region around the previous iterate and an
exact-objective acceptance test keep the iterates monotone.

Dynamics are eliminated (condensed form), leaving a dense QP in the inputs
u^{0:N-1} and one shared slack per step s^{1:N}.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlInput, Limits, rollout
from .qp import QPError, QPInfeasible, factor_inverse, solve_qp
from .world import EllipsoidMetric, RobotState

FEAS_TOL = 1e-6


class SolverFailure(RuntimeError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class MpcConfig:
    horizon_steps: int = 20
    dt: float = 0.05
    weight_goal: float = 1.0
    weight_input: float = 0.05
    weight_slack_lin: float = 1e3
    weight_slack_quad: float = 1e2
    sqp_iterations: int = 5
    trust_region: float = 0.5
    # planned clearance is inflated by this much (metres for robots, a relative
    # amount of the weighted norm for obstacles) so round-off cannot leave an
    # executed state a hair inside the contact boundary
    safety_margin: float = 0.01

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if min(self.weight_goal, self.weight_input, self.weight_slack_quad) < 0:
            raise ValueError("weights must be non-negative")
        if self.weight_slack_lin <= 0:
            raise ValueError("weight_slack_lin must be positive")
        if self.safety_margin < 0:
            raise ValueError("safety_margin must be >= 0")
        if self.dt <= 0 or self.sqp_iterations < 1 or self.trust_region <= 0:
            raise ValueError("dt, sqp_iterations and trust_region must be positive")


@dataclass
class NeighborPrediction:
    robot_trajectories: np.ndarray = None  # (M, N, 3), steps 1..N
    obstacle_trajectories: np.ndarray = None  # (K, N, 3), steps 1..N

    def __post_init__(self):
        self.robot_trajectories = _as_traj(self.robot_trajectories)
        self.obstacle_trajectories = _as_traj(self.obstacle_trajectories)

    def check(self, n):
        for name, tr in (("robot", self.robot_trajectories), ("obstacle", self.obstacle_trajectories)):
            if len(tr) and tr.shape[1] != n:
                raise ValueError(f"{name} trajectories have {tr.shape[1]} steps, horizon is {n}")
            if not np.all(np.isfinite(tr)):
                raise ValueError(f"{name} trajectories contain non-finite values")


def _as_traj(a):
    if a is None:
        return np.zeros((0, 0, 3))
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((0, a.shape[1] if a.ndim == 3 else 0, 3))
    return a.reshape(len(a), -1, 3)


@dataclass
class MpcSolution:
    positions: np.ndarray  # (N+1, 3)
    velocities: np.ndarray  # (N+1, 3)
    inputs: np.ndarray  # (N, 3)
    slacks: np.ndarray  # (N+1,), slack[0] is unused and zero
    objective: float
    converged: bool
    iterations: int = 0
    objective_history: list = field(default_factory=list)
    qp_active: list = field(default_factory=list)

    @property
    def states(self):
        return [RobotState(p, v) for p, v in zip(self.positions, self.velocities)]

    @property
    def controls(self):
        return [ControlInput(u) for u in self.inputs]

    @property
    def plan(self):
        """Planned positions for steps 1..N."""
        return self.positions[1:]

    @property
    def max_slack(self):
        return float(np.max(self.slacks)) if len(self.slacks) else 0.0


class _Condensed:
    """Prediction matrices of the double integrator and the factored Hessian."""

    def __init__(self, cfg: MpcConfig):
        n, dt = cfg.horizon_steps, cfg.dt
        self.n = n
        # p_k = p_0 + k dt v_0 + sum_{j<k} dt^2 (k - j - 1/2) u_j
        cp = np.zeros((n, n))
        cv = np.zeros((n, n))
        for k in range(1, n + 1):
            for j in range(k):
                cp[k - 1, j] = dt * dt * (k - j - 0.5)
                cv[k - 1, j] = dt
        eye = np.eye(3)
        self.Pu = np.kron(cp, eye).reshape(n, 3, 3 * n)
        self.Vu = np.kron(cv, eye).reshape(n, 3, 3 * n)
        self.steps = np.arange(1, n + 1, dtype=float)[:, None] * dt
        nu = 3 * n
        self.nu = nu
        self.nz = nu + n
        PN = self.Pu[-1]
        H = np.zeros((self.nz, self.nz))
        H[:nu, :nu] = 2.0 * (cfg.weight_input * np.eye(nu) + cfg.weight_goal * PN.T @ PN)
        # keeps H definite when the quadratic slack weight is zero
        H[nu:, nu:] = 2.0 * max(cfg.weight_slack_quad, 1e-8) * np.eye(n)
        self.H = H
        self.Hinv = factor_inverse(H)
        self.PN = PN
        Pflat = self.Pu.reshape(3 * n, nu)
        Vflat = self.Vu.reshape(3 * n, nu)
        zs = np.zeros((3 * n, n))
        self.rows_static = np.vstack([
            np.hstack([np.eye(nu), zs]),
            np.hstack([-np.eye(nu), zs]),
            np.hstack([Vflat, zs]),
            np.hstack([-Vflat, zs]),
            np.hstack([np.zeros((n, nu)), np.eye(n)]),
        ])
        self.rows_trust = np.vstack([np.hstack([Pflat, zs]), np.hstack([-Pflat, zs])])

    def free_positions(self, p0, v0):
        return p0 + self.steps * v0

    def static_rhs(self, v0, limits: Limits):
        n, nu = self.n, self.nu
        vrep = np.tile(v0, n)
        return np.concatenate([
            np.full(nu, -limits.u_max),
            np.full(nu, -limits.u_max),
            -limits.v_max - vrep,
            -limits.v_max + vrep,
            np.zeros(n),
        ])


@functools.lru_cache(maxsize=16)
def _condensed(cfg: MpcConfig) -> _Condensed:
    return _Condensed(cfg)


def straight_line_guess(p0, goal, cfg: MpcConfig, limits: Limits):
    """Constant-speed straight line towards the goal, used as the first linearisation point."""
    n = cfg.horizon_steps
    d = np.asarray(goal, dtype=float) - p0
    dist = np.linalg.norm(d)
    if dist < 1e-12:
        return np.tile(p0, (n, 1))
    speed = min(limits.v_max, dist / (n * cfg.dt))
    k = np.arange(1, n + 1)[:, None] * cfg.dt
    return p0 + (d / dist) * np.minimum(speed * k, dist)


def shift_solution(prev: MpcSolution, initial: RobotState, dt: float):
    """Previous plan advanced by one step and re-simulated from the measured state."""
    u = np.vstack([prev.inputs[1:], np.zeros((1, 3))])
    pos, vel = rollout(initial.position, initial.velocity, u, dt)
    return u, pos[1:]


def _halfspaces(ref, preds, radius, p0, weights=None):
    """Linearised clearance rows  a . p^k >= b  for every (agent, step).

    Works in coordinates scaled by sqrt(weights) (identity for robots),
    where the keep-out set is a ball of ``radius``. Any unit normal n gives
    a supporting half-space n . (p - q) >= radius of that ball, so every
    choice below is conservative. Outside the ball the normal points from
    the agent to the reference point (the usual first-order expansion).
    Inside it that direction only offers "stop short" or "jump past", so
    the normal is taken sideways instead: the offset perpendicular to the
    relative motion, or, when the reference runs straight through the
    agent, the horizontal right-hand perpendicular of the motion.
    """
    scale = np.ones(3) if weights is None else np.sqrt(weights)
    rel = (ref[None, :, :] - preds) * scale  # (M, N, 3)
    norm = np.linalg.norm(rel, axis=2)
    n_vec = rel / np.maximum(norm, 1e-12)[..., None]
    inside = norm < radius
    if np.any(inside):
        start = ((p0 - preds[:, :1]) * scale)
        motion = np.diff(np.concatenate([start, rel], axis=1), axis=1)  # (M, N, 3)
        speed = np.linalg.norm(motion, axis=2)
        d = motion / np.maximum(speed, 1e-12)[..., None]
        lat = rel - np.sum(rel * d, axis=2, keepdims=True) * d
        lat_norm = np.linalg.norm(lat, axis=2)
        right = np.cross(d, np.array([0.0, 0.0, 1.0]))
        right_norm = np.linalg.norm(right, axis=2)
        right = np.where((right_norm > 1e-6)[..., None], right / np.maximum(right_norm, 1e-12)[..., None],
                         np.array([0.0, -1.0, 0.0]))
        side = np.where((lat_norm > 1e-9)[..., None], lat / np.maximum(lat_norm, 1e-12)[..., None], right)
        moving = (speed > 1e-9)[..., None]
        fallback = np.where(moving, side, np.where((norm > 1e-12)[..., None], n_vec, np.array([1.0, 0, 0])))
        n_vec = np.where(inside[..., None], fallback, n_vec)
    a = n_vec * scale
    b = radius + np.sum(a * preds, axis=2)
    return a, b


def _true_slacks(plan, robots, obstacles, robot_radius, obstacle_radius, metric):
    """Smallest per-step slacks satisfying the exact (nonlinear) clearance constraints."""
    s = np.zeros(len(plan))
    if len(robots):
        dist = np.linalg.norm(plan[None] - robots, axis=2)
        s = np.maximum(s, np.max(robot_radius - dist, axis=0))
    if len(obstacles):
        dist = metric.norm(plan[None] - obstacles)
        s = np.maximum(s, np.max(obstacle_radius - dist, axis=0))
    return s


def _merit(cfg, inputs, positions, goal, slacks):
    return (cfg.weight_input * float(np.sum(inputs ** 2))
            + cfg.weight_goal * float(np.sum((positions[-1] - goal) ** 2))
            + cfg.weight_slack_lin * float(np.sum(slacks))
            + cfg.weight_slack_quad * float(np.sum(slacks ** 2)))


def solve(initial: RobotState, goal, predictions: NeighborPrediction, cfg: MpcConfig,
          limits: Limits, metric: EllipsoidMetric, robot_radius: float,
          warm_start: MpcSolution | None = None) -> MpcSolution:
    """Optimise inputs, states and slacks over the horizon for one robot.

    Each SQP iterate is scored with the exact objective (slacks measured
    against the nonlinear constraints). Steps that would raise it are
    rejected and the trust region halves, so the recorded objective
    history never increases.
    """
    cond = _condensed(cfg)
    n, nu = cond.n, cond.nu
    predictions.check(n)
    p0, v0 = initial.position, initial.velocity
    goal = np.asarray(goal, dtype=float)
    free = cond.free_positions(p0, v0)

    g = np.zeros(cond.nz)
    g[:nu] = 2.0 * cfg.weight_goal * cond.PN.T @ (free[-1] - goal)
    g[nu:] = cfg.weight_slack_lin

    static_C = cond.rows_static
    static_d = cond.static_rhs(v0, limits)

    robots = predictions.robot_trajectories
    obstacles = predictions.obstacle_trajectories
    rad_r = 2.0 * robot_radius + cfg.safety_margin
    rad_o = 1.0 + cfg.safety_margin
    slack_cols = np.eye(n)

    def score(u):
        pos, vel = rollout(p0, v0, u, cfg.dt)
        sl = _true_slacks(pos[1:], robots, obstacles, rad_r, rad_o, metric)
        return _merit(cfg, u, pos, goal, sl), pos, vel, sl

    best = None  # (merit, inputs, positions, velocities, slacks)
    if warm_start is not None:
        u_ws, ref = shift_solution(warm_start, initial, cfg.dt)
        merit, pos, vel, sl = score(u_ws)
        best = (merit, u_ws, pos, vel, sl)
        ref_feasible = True
    else:
        ref = straight_line_guess(p0, goal, cfg, limits)
        ref_feasible = False

    history = [best[0]] if best is not None else []
    guess = warm_start.qp_active if warm_start is not None else None
    tr = cfg.trust_region
    use_tr = ref_feasible
    it = 0
    stationary = False
    solved_any = False
    for it in range(1, cfg.sqp_iterations + 1):
        blocks_C = [static_C]
        blocks_d = [static_d]
        if use_tr:
            pflat = (ref - free).reshape(-1)
            blocks_C.append(cond.rows_trust)
            blocks_d.append(np.concatenate([pflat - tr, -pflat - tr]))
        for preds, radius, w in ((robots, rad_r, None),
                                 (obstacles, rad_o, None if not len(obstacles) else metric.omega_diag)):
            if not len(preds):
                continue
            a, b = _halfspaces(ref, preds, radius, p0, w)
            m = len(preds)
            # a . (Pu_k u + free_k) + s_k >= b
            rows_u = np.einsum("mki,kij->mkj", a, cond.Pu).reshape(m * n, nu)
            rows_s = np.tile(slack_cols, (m, 1))
            blocks_C.append(np.hstack([rows_u, rows_s]))
            blocks_d.append((b - np.sum(a * free[None], axis=2)).reshape(-1))
        C = np.vstack(blocks_C)
        d = np.concatenate(blocks_d)
        try:
            res = solve_qp(cond.H, g, C, d, Hinv=cond.Hinv, guess=guess)
        except QPInfeasible as e:
            if not use_tr:
                raise SolverFailure(str(e), {"iteration": it, "qp_iterations": e.iterations}) from e
            # trust region around a reference that is not dynamically reachable; drop it and retry
            use_tr = False
            continue
        except QPError as e:
            raise SolverFailure(str(e), {"iteration": it, "qp_iterations": e.iterations,
                                         "active": e.active}) from e
        solved_any = True
        guess = res.active
        # the box constraints hold up to the QP tolerance; clip the round-off
        u = np.clip(res.x[:nu].reshape(n, 3), -limits.u_max, limits.u_max)
        merit, pos, vel, sl = score(u)
        if best is not None and merit > best[0] + 1e-12 * max(1.0, abs(best[0])):
            tr *= 0.5
            use_tr = True
            ref = best[2][1:]
            continue
        moved = float(np.max(np.abs(pos[1:] - ref)))
        best = (merit, u, pos, vel, sl)
        history.append(merit)
        ref = pos[1:]
        was_feasible = ref_feasible
        ref_feasible = use_tr = True
        if was_feasible and moved < 1e-9:
            stationary = True
            break

    if best is None:
        raise SolverFailure("no subproblem could be solved", {"iterations": it, "solved": solved_any})

    merit, inputs, pos, vel, slacks = best
    slacks = np.concatenate([[0.0], slacks])
    converged = stationary or float(np.max(slacks)) <= FEAS_TOL
    return MpcSolution(pos, vel, inputs, slacks, merit, converged, it, history, list(guess or []))
