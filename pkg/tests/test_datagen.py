import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import append_tick
from mrnav.datagen import (DatasetFormatError, SimRunConfig, concatenate, extract_arrays, extract_dataset,
                           generate, load_dataset, run_demonstration, save_dataset)
from mrnav.neural import collate
from mrnav.simulation import SimLog
from mrnav.world import WorldConfig


def synthetic_log(T, n, k=0, seed=0, dt=0.05):
    rng = np.random.default_rng(seed)
    log = SimLog(dt, 0.4)
    pos = rng.normal(size=(n, 3))
    obs = rng.normal(size=(k, 3))
    for _ in range(T):
        vel = rng.normal(size=(n, 3))
        append_tick(log, pos, vel, obs, rng.normal(size=(k, 3)))
        pos = pos + dt * rng.normal(size=(n, 3))
    return log


def test_window_count_minimal():
    recs = extract_dataset(synthetic_log(41, 1), 20, 20)
    assert len(recs) == 1 and recs[0].tick == 20


@given(T=st.integers(9, 30), n=st.integers(1, 4), k=st.integers(0, 2))
@settings(max_examples=20)
def test_record_count_and_vectorised_equivalence(T, n, k):
    log = synthetic_log(T, n, k, seed=T * 7 + n)
    recs = extract_dataset(log, 3, 4)
    m = T - 3 - 4
    assert len(recs) == n * m
    ts = extract_arrays(log, 3, 4, run=2)
    b = collate([r.observation for r in recs])
    for f in ("ego", "neighbors", "neighbor_mask", "obstacles", "obstacle_mask"):
        assert np.array_equal(getattr(b, f), getattr(ts.inputs, f)), f
    assert np.array_equal(np.array([r.future_velocities for r in recs]), ts.targets)
    assert np.array_equal(ts.meta, [[2, r.robot, r.tick] for r in recs])
    assert np.array_equal(ts.origins, [r.observation.ego_position for r in recs])


def test_short_log_rejected():
    with pytest.raises(ValueError):
        extract_dataset(synthetic_log(40, 2), 20, 20)


def test_targets_integrate_to_logged_positions():
    log = synthetic_log(30, 3, 1)
    pos = log.arrays()["robot_pos"]
    for r in extract_dataset(log, 5, 6):
        p = r.observation.ego_position + log.dt * np.cumsum(r.future_velocities, axis=0)
        np.testing.assert_allclose(p, pos[r.tick + 1:r.tick + 7, r.robot], atol=1e-12, rtol=0)


def test_history_window_is_past_only():
    log = synthetic_log(20, 2)
    arr = log.arrays()
    r = extract_dataset(log, 4, 3)[0]
    assert r.tick == 4
    np.testing.assert_array_equal(r.observation.ego_velocities, arr["robot_vel"][0:5, r.robot])


def test_config_validation():
    with pytest.raises(ValueError):
        SimRunConfig(n_sim_steps=40)
    with pytest.raises(ValueError):
        SimRunConfig(n_sim_steps=-1)
    SimRunConfig(n_sim_steps=0)


def test_zero_ticks_empty_log():
    log = run_demonstration(SimRunConfig(n_sim_steps=0))
    assert len(log) == 0 and log.total_collisions == 0


def test_single_robot_goal_to_goal():
    world = WorldConfig(n_robots=1, n_obstacles=0)
    cfg = SimRunConfig(world=world, n_sim_steps=200, rng_seed=4)
    log = run_demonstration(cfg)
    assert len(log) == 200 and log.total_collisions == 0
    assert any(e[1] == "new_goal" for e in log.events)


def test_demonstration_deterministic():
    cfg = SimRunConfig(n_sim_steps=60, rng_seed=9)
    a, b = run_demonstration(cfg).arrays(), run_demonstration(cfg).arrays()
    for key in a:
        assert np.array_equal(a[key], b[key]), key


def test_collision_runs_are_reseeded(monkeypatch):
    import mrnav.datagen as D
    calls = []
    real_run = D.Simulation.run

    def run(self, n):
        out = real_run(self, n)
        calls.append(1)
        if len(calls) == 1:
            out.collisions_rr[0] = 1  # pretend the first attempt collided
        return out

    monkeypatch.setattr(D.Simulation, "run", run)
    log = run_demonstration(SimRunConfig(n_sim_steps=50, rng_seed=1))
    assert len(calls) == 2
    assert log.events[0][1] == "rejected_run"
    assert log.seed != 1


def test_save_load_roundtrip(tmp_path):
    data = extract_arrays(synthetic_log(20, 3, 2), 4, 5)
    p = tmp_path / "d.ds"
    save_dataset(p, data, 0.05, provenance={"note": "x"})
    back, header = load_dataset(p)
    assert header["records"] == len(data) and header["obs_horizon"] == 4 and header["pred_horizon"] == 5
    assert header["dt"] == 0.05
    for f in ("ego", "neighbors", "neighbor_mask", "obstacles", "obstacle_mask"):
        assert np.array_equal(getattr(back.inputs, f), getattr(data.inputs, f))
    assert np.array_equal(back.targets, data.targets) and np.array_equal(back.meta, data.meta)
    assert np.array_equal(back.origins, data.origins)
    side = json.loads((tmp_path / "d.ds.json").read_text())
    assert side["records"] == len(data) and side["provenance"] == {"note": "x"}


def test_load_rejects_bad_files(tmp_path):
    data = extract_arrays(synthetic_log(20, 2), 4, 5)
    p = tmp_path / "d.ds"
    save_dataset(p, data, 0.05)
    raw = p.read_bytes()
    for bad in (raw[:10], raw[:-1], raw + b"\0", b"NOTADATA" + raw[8:]):
        p.write_bytes(bad)
        with pytest.raises(DatasetFormatError):
            load_dataset(p)


def test_concatenate_pads_branches():
    a = extract_arrays(synthetic_log(15, 2, 0), 3, 3, run=0)
    b = extract_arrays(synthetic_log(15, 4, 2), 3, 3, run=1)
    c = concatenate([a, b])
    assert len(c) == len(a) + len(b)
    assert c.inputs.neighbors.shape[1] == 3 and c.inputs.obstacles.shape[1] == 2
    assert not c.inputs.neighbor_mask[: len(a), 1:].any()
    assert not c.inputs.obstacle_mask[: len(a)].any()


def test_generate_pools_runs():
    cfg = SimRunConfig(n_sim_steps=50, rng_seed=20)
    data, logs = generate(cfg, n_runs=2)
    assert len(logs) == 2 and sorted(set(data.meta[:, 0])) == [0, 1]
    assert len(data) == 2 * 4 * (50 - 40)
