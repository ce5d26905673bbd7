import numpy as np
import pytest

from mrnav.dynamics import Limits
from mrnav.mpc import MpcConfig
from mrnav.planners import CentralizedPlanner, DecentralizedPlanner
from mrnav.predictors import Blackboard, CvmPredictor, OraclePredictor
from mrnav.simulation import Simulation, sample_free_point
from mrnav.world import WorldConfig

WORLD = WorldConfig()
METRIC = WORLD.metric()
R = WORLD.robot_radius


def _head_on(planner, ticks=300):
    start = np.array([[-2.0, 0.0, 1.5], [2.0, 0.0, 1.51]])
    sim = Simulation(WORLD, planner, start, start[::-1].copy(), goal_tolerance=0.1)
    return sim, sim.run(ticks, stop_when_arrived=True)


def _centralized(n):
    return CentralizedPlanner(n, MpcConfig(), Limits(), METRIC, R)


def test_centralized_head_on_swap():
    sim, log = _head_on(_centralized(2))
    a = log.arrays()
    assert log.total_collisions == 0
    assert sim.all_arrived()
    gap = np.linalg.norm(a["robot_pos"][:, 0] - a["robot_pos"][:, 1], axis=1)
    assert gap.min() >= 2 * R
    # the robots pass each other, so somebody leaves the straight line
    assert np.abs(a["robot_pos"][:, :, 1:]).max() > 0.1


@pytest.mark.parametrize("make", [CvmPredictor, lambda: OraclePredictor(Blackboard())])
def test_decentralized_head_on(make):
    planner = DecentralizedPlanner(2, make(), MpcConfig(), Limits(), METRIC, R)
    sim, log = _head_on(planner)
    assert sim.all_arrived()
    assert log.total_collisions == 0


def test_centralized_sees_fresh_plans():
    planner = _centralized(2)
    pos = np.array([[-1.0, 0, 1.5], [1.0, 0, 1.5]])
    planner.step(pos, np.zeros((2, 3)), pos[::-1], tick=0)
    assert planner.plan_ticks == [0, 0]
    assert np.all(np.isfinite(planner.plans()))


def test_oracle_plans_published_after_tick():
    bb = Blackboard()
    planner = DecentralizedPlanner(2, OraclePredictor(bb), MpcConfig(), Limits(), METRIC, R)
    pos = np.array([[-1.0, 0, 1.5], [1.0, 0, 1.5]])
    planner.step(pos, np.zeros((2, 3)), pos[::-1], tick=0)
    assert planner.predictor.fallbacks == 2  # nothing published at tick 0
    assert bb.latest(0).tick == 0 and bb.latest(1).tick == 0
    planner.step(pos, np.zeros((2, 3)), pos[::-1], tick=1)
    assert planner.predictor.fallbacks == 2


def test_simulation_records_state_and_integrates():
    planner = _centralized(1)
    sim = Simulation(WORLD, planner, [[0.0, 0, 1.5]], [[1.0, 0, 1.5]])
    log = sim.run(20)
    a = log.arrays()
    dt = WORLD.dt
    p, v, u = a["robot_pos"], a["robot_vel"], a["inputs"]
    np.testing.assert_allclose(p[1:], p[:-1] + v[:-1] * dt + 0.5 * u[:-1] * dt * dt, atol=1e-12)
    np.testing.assert_allclose(v[1:], v[:-1] + u[:-1] * dt, atol=1e-12)
    assert len(log) == 20 and a["failed"].shape == (20, 1)


def test_resample_goals_and_obstacle_respawn():
    rng = np.random.default_rng(0)
    planner = _centralized(1)
    sim = Simulation(WORLD, planner, [[0.0, 0, 1.5]], [[0.0, 0, 1.5]], obstacle_pos=[[2.9, 0, 1.5]],
                     obstacle_vel=[[2.0, 0, 0]], rng=rng, goal_mode="resample", obstacle_noise_std=0.02)
    log = sim.run(5)
    kinds = [e[1] for e in log.events]
    assert "new_goal" in kinds and "respawn" in kinds
    assert WORLD.contains(sim.obs_pos[0])


def test_sample_free_point_clearance():
    rng = np.random.default_rng(1)
    robots = rng.uniform(-2, 2, size=(4, 3)) + [0, 0, 1.5]
    obstacles = np.array([[0.0, 0, 1.5]])
    for _ in range(50):
        p = sample_free_point(rng, WORLD, robots, obstacles, METRIC)
        assert np.all(np.linalg.norm(robots - p, axis=1) >= 2 * R)
        assert METRIC.norm(obstacles[0] - p) >= 1.0
        assert np.all(p >= WORLD.lo + 0.5) and np.all(p <= WORLD.hi - 0.5)


def test_planner_failure_gives_zero_input(monkeypatch):
    import mrnav.planners as P

    def boom(*a, **k):
        raise P.SolverFailure("forced")

    monkeypatch.setattr(P, "solve", boom)
    planner = _centralized(2)
    sim = Simulation(WORLD, planner, [[-1.0, 0, 1.5], [1.0, 0, 1.5]], [[1.0, 0, 1.5], [-1.0, 0, 1.5]])
    log = sim.run(3)
    a = log.arrays()
    assert a["failed"].all()
    assert np.all(a["inputs"] == 0)
    assert sum(e[1] == "planner_failure" for e in log.events) == 6
