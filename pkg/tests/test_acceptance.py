"""End-to-end acceptance checks at desk scale.

The pipeline (demonstrations, training, prediction study, planner benchmark)
runs once per session through the command-line entry point. Setting
MRNAV_ACCEPTANCE_DIR keeps its artifacts there and reuses them on later runs.
"""
import datetime
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from _oracles import gradient_check, random_history
from mrnav.cli import main
from mrnav.datagen import SimRunConfig, extract_dataset, load_dataset, run_demonstration
from mrnav.dynamics import Limits, rollout, step
from mrnav.evaluation import load_summary
from mrnav.mpc import MpcConfig, NeighborPrediction, solve
from mrnav.neural import ModelWeights, forward
from mrnav.observation import ObservationHistory
from mrnav.world import RobotState, WorldConfig

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
CONFIG = str(ROOT / "configs" / "desk.toml")
TRAIN_SEED = 0
TEST_SEED = 1000  # disjoint from the training seed and its reseeds
TEST_RUNS, TEST_TICKS = 2, 3000

RESULTS = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"mrnav {' '.join(map(str, argv))} exited with {code}"


def _manifest(path):
    with open(path) as f:
        return json.load(f)


def _elapsed(man):
    t0 = datetime.datetime.fromisoformat(man["started"])
    t1 = datetime.datetime.fromisoformat(man["finished"])
    return (t1 - t0).total_seconds()


def _cached(manifest_path):
    return os.environ.get("MRNAV_ACCEPTANCE_DIR") and os.path.exists(manifest_path)


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    d = os.environ.get("MRNAV_ACCEPTANCE_DIR")
    if d:
        os.makedirs(d, exist_ok=True)
        return Path(d)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def train_data(workdir):
    out = workdir / "train.ds"
    if not _cached(f"{out}.manifest.json"):
        _cli("gen-data", "--config", CONFIG, "--seed", TRAIN_SEED, "--out", out)
    return out


@pytest.fixture(scope="session")
def test_data(workdir):
    out = workdir / "test.ds"
    if not _cached(f"{out}.manifest.json"):
        _cli("gen-data", "--config", CONFIG, "--seed", TEST_SEED, "--runs", TEST_RUNS,
             "--ticks", TEST_TICKS, "--out", out)
    return out


@pytest.fixture(scope="session")
def weights(workdir, train_data):
    out = workdir / "weights.bin"
    if not _cached(f"{out}.manifest.json"):
        _cli("train", "--config", CONFIG, "--data", train_data, "--out", out)
    return out


@pytest.fixture(scope="session")
def prediction(workdir, test_data, weights):
    out = workdir / "prediction"
    if not _cached(out / "manifest.json"):
        _cli("eval-pred", "--data", test_data, "--weights", weights, "--out", out)
    _, pm = load_summary(out)
    return {m.subset: m for m in pm}


@pytest.fixture(scope="session")
def planning(workdir, weights):
    out = workdir / "planning"
    if not _cached(out / "manifest.json"):
        _cli("bench-plan", "--config", CONFIG, "--scenario", "asymmetric", "--planner", "centralized,cvm,rnn",
             "--instances", 10, "--robots", 4, "--weights", weights, "--out", out)
    pl, _ = load_summary(out)
    return {m.planner: m for m in pl}


@pytest.fixture(scope="module")
def demo():
    """A shorter in-process demonstration whose full log is kept."""
    cfg = SimRunConfig(world=WorldConfig(), mpc=MpcConfig(), limits=Limits(), n_sim_steps=1000, rng_seed=3)
    return cfg, run_demonstration(cfg)


def test_c1_gradient_check():
    t0 = time.perf_counter()
    errs = [gradient_check(seed)[0] for seed in range(3)]
    dt = time.perf_counter() - t0
    report(1, max(errs) < 1e-4 and dt < 10.0,
           f"max relative error {max(errs):.2e} over 3 seeds (< 1e-4) in {dt:.1f} s (< 10 s)")


def test_c2_permutation_and_duplication():
    rng = np.random.default_rng(2)
    w = ModelWeights.init(seed=2)
    w = w.map(lambda a: a + rng.normal(scale=0.1, size=a.shape))  # non-zero biases too
    t0 = time.perf_counter()
    bad = 0
    for _ in range(100):
        nn, no = int(rng.integers(1, 6)), int(rng.integers(0, 4))
        h = random_history(rng, 21, nn, no, scale=2.0)
        base = forward(h, w)
        p, q = rng.permutation(nn), rng.permutation(no)
        hp = ObservationHistory(h.ego_velocities, h.neighbor_rel_positions[p], h.neighbor_rel_velocities[p],
                                h.obstacle_rel_positions[q], h.obstacle_rel_velocities[q], h.ego_position)
        dup = np.r_[np.arange(nn), rng.integers(nn)]
        hd = ObservationHistory(h.ego_velocities, h.neighbor_rel_positions[dup], h.neighbor_rel_velocities[dup],
                                h.obstacle_rel_positions, h.obstacle_rel_velocities, h.ego_position)
        bad += not (np.array_equal(base, forward(hp, w)) and np.array_equal(base, forward(hd, w)))
    dt = time.perf_counter() - t0
    report(2, bad == 0 and dt < 5.0, f"{100 - bad}/100 trials bitwise invariant in {dt:.2f} s (< 5 s)")


def test_c3_dataset_consistency(demo, train_data):
    cfg, log = demo
    recs = extract_dataset(log, cfg.obs_horizon, cfg.pred_horizon)
    pos = log.arrays()["robot_pos"]
    worst = 0.0
    for r in recs:
        p = r.observation.ego_position + cfg.world.dt * np.cumsum(r.future_velocities, axis=0)
        worst = max(worst, float(np.abs(p - pos[r.tick + 1:r.tick + 1 + cfg.pred_horizon, r.robot]).max()))
    # the pipeline dataset: integrating from one record must land on the origins of later records
    data, header = load_dataset(train_data)
    key = {(int(m[0]), int(m[1]), int(m[2])): i for i, m in enumerate(data.meta)}
    worst_file, checked = 0.0, 0
    for i, (run, robot, tick) in enumerate(data.meta):
        p = data.origins[i] + header["dt"] * np.cumsum(data.targets[i], axis=0)
        for k in range(header["pred_horizon"]):
            j = key.get((int(run), int(robot), int(tick) + k + 1))
            if j is not None:
                worst_file = max(worst_file, float(np.abs(p[k] - data.origins[j]).max()))
                checked += 1
    ok = worst <= 1e-9 and worst_file <= 1e-9 and len(recs) > 0 and checked > 0
    report(3, ok, f"{len(recs)} records vs log: max {worst:.1e} m; {checked} future positions in the "
                  f"training set: max {worst_file:.1e} m (<= 1e-9)")


def test_c4_demonstration_safety(train_data):
    man = _manifest(f"{train_data}.manifest.json")
    s = man["summary"]
    data, header = load_dataset(train_data)
    world = WorldConfig()
    metric = world.metric()
    # independent recheck of every recorded tick from the stored relative positions
    nb = data.inputs.neighbors[:, :, -1, :3]
    d_rr = np.where(data.inputs.neighbor_mask, np.linalg.norm(nb, axis=2), np.inf)
    ob = data.inputs.obstacles[:, :, :3]
    d_ro = np.where(data.inputs.obstacle_mask, metric.norm(-ob), np.inf)
    rechecked = int(np.sum(d_rr < 2 * world.robot_radius) + np.sum(d_ro < 1.0))
    elapsed = _elapsed(man)
    eff = man["effective_config"]["run"]
    ok = (s["collisions"] == 0 and rechecked == 0 and s["ticks"] == 20000 and eff["world"]["n_robots"] == 4
          and eff["world"]["n_obstacles"] == 2 and elapsed < 900)
    report(4, ok, f"{s['ticks']} ticks, 4 robots, 2 obstacles: {s['collisions']} collisions logged, "
                  f"{rechecked} in the records; min robot gap {d_rr.min():.3f} m, min obstacle "
                  f"clearance {d_ro.min():.3f}; {elapsed:.0f} s (< 900 s)")


def test_c5_prediction_ordering(prediction):
    allm, rich = prediction["all"], prediction["interaction_rich"]
    cvm, rnn = np.array(allm.mean["cvm"]), np.array(allm.mean["rnn"])
    below = int(np.sum(rnn[-10:] < cvm[-10:]))
    ratio = rnn[-1] / cvm[-1]
    r_rnn, r_simple = rich.mean["rnn"][-1], rich.mean["rnn_simple"][-1]
    ok = ratio <= 0.9 and below == 10 and r_rnn <= r_simple
    report(5, ok, f"final step RNN {rnn[-1]:.3f} m vs CVM {cvm[-1]:.3f} m (ratio {ratio:.2f} <= 0.9), "
                  f"RNN below CVM on {below}/10 last steps; interaction-rich ({rich.records} records) "
                  f"RNN {r_rnn:.3f} m vs zeroed-environment {r_simple:.3f} m")


def test_c6_planner_trend(planning):
    c, r, v = planning["centralized"], planning["rnn"], planning["cvm"]
    ok = (c.instances == r.instances == v.instances == 10
          and c.collision_instances <= r.collision_instances <= v.collision_instances
          and r.trajectory_duration.avg <= v.trajectory_duration.avg)
    report(6, ok, f"collision instances centralized {c.collision_instances} <= RNN {r.collision_instances} "
                  f"<= CVM {v.collision_instances}; duration RNN {r.trajectory_duration.avg:.2f} s <= "
                  f"CVM {v.trajectory_duration.avg:.2f} s")


def test_c7_single_robot_mpc():
    cfg, lim, world = MpcConfig(), Limits(), WorldConfig()
    state = RobotState((-1.0, -1.0, 1.0), np.zeros(3))
    goal = np.array([2.0, 2.0, 1.5])
    goal = state.position + 2.0 * (goal - state.position) / np.linalg.norm(goal - state.position)
    sol, reached, dyn_err, max_slack = None, None, 0.0, 0.0
    for k in range(int(round(6.0 / cfg.dt))):
        sol = solve(state, goal, NeighborPrediction(), cfg, lim, world.metric(), world.robot_radius, sol)
        pos, vel = rollout(state.position, state.velocity, sol.inputs, cfg.dt)
        dyn_err = max(dyn_err, float(np.abs(pos - sol.positions).max()), float(np.abs(vel - sol.velocities).max()))
        max_slack = max(max_slack, float(sol.max_slack))
        state = step(state, sol.inputs[0], cfg.dt)
        if reached is None and np.linalg.norm(state.position - goal) <= 0.1:
            reached = (k + 1) * cfg.dt
    ok = reached is not None and reached <= 6.0 and dyn_err <= 1e-9 and max_slack <= 1e-6
    report(7, ok, f"within 0.1 m of the goal after {reached} s (<= 6 s); re-simulation error {dyn_err:.1e} "
                  f"(<= 1e-9); max slack {max_slack:.1e} (<= 1e-6)")


def test_c8_solve_time(demo):
    _, log = demo
    times = np.asarray(log.solve_times, dtype=float)
    mean_ms = 1e3 * times.mean()
    report(8, mean_ms < 100.0, f"mean per-robot solve {mean_ms:.1f} ms over {times.size} solves "
                               f"(4 robots, 2 obstacles, N=20; < 100 ms)")


def test_c9_determinism(tmp_path):
    digests = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir()
        _cli("gen-data", "--config", CONFIG, "--seed", 11, "--ticks", 200, "--out", d / "data.ds")
        _cli("train", "--config", CONFIG, "--data", d / "data.ds", "--epochs", 2, "--stride", 4,
             "--seed", 5, "--out", d / "w.bin")
        _cli("simulate", "--config", CONFIG, "--scenario", "asymmetric", "--planner", "rnn",
             "--weights", d / "w.bin", "--seed", 3, "--ticks", 60, "--out", d / "sim.log")
        digests.append({f: (d / f).read_bytes() for f in ("data.ds", "data.ds.json", "w.bin", "w.bin.curve.csv",
                                                          "sim.log")})
    same = [f for f in digests[0] if digests[0][f] == digests[1][f]]
    report(9, len(same) == len(digests[0]), f"bit-identical across two runs: {', '.join(same)}")
