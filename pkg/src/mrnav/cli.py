"""Command-line entry point: mrnav <subcommand> ...

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import config as C

log = logging.getLogger("mrnav")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SIMLOG_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# provenance


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return _jsonable(dataclasses.asdict(x))
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if hasattr(x, "value") and isinstance(getattr(x, "value"), str):
        return x.value
    return x


def input_hash(command, effective_config, inputs):
    """Hash of everything that determines an artifact: command, effective config, input file hashes.

    Only the contents of input files count, not where they live.
    """
    blob = json.dumps(_jsonable(dict(command=command, config=effective_config, inputs=sorted(inputs.values()))),
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclasses.dataclass
class PipelineManifest:
    command: str
    config_path: str | None
    effective_config: dict
    seeds: dict
    inputs: dict  # path -> sha256
    artifacts: dict = dataclasses.field(default_factory=dict)  # path -> sha256
    input_hash: str = ""
    tool_version: str = __version__
    started: str = ""
    finished: str = ""
    summary: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.input_hash = input_hash(self.command, self.effective_config, self.inputs)
        self.started = _now()

    def finish(self, artifacts, path, summary=None):
        self.artifacts = {p: sha256_file(p) for p in artifacts}
        self.summary = summary or {}
        self.finished = _now()
        with open(path, "w") as f:
            json.dump(_jsonable(dataclasses.asdict(self)), f, indent=2, sort_keys=True)
        return path


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _manifest_path(out):
    return str(out) + ".manifest.json"


def _load_config(path):
    return C.load(path) if path else {}


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    from .datagen import generate, save_dataset
    raw = _load_config(args.config)
    cfg, runs = C.sim_run_config(raw, seed=args.seed, ticks=args.ticks)
    runs = args.runs if args.runs is not None else runs
    eff = dict(run=_jsonable(cfg), runs=runs)
    man = PipelineManifest("gen-data", args.config, eff, dict(rng_seed=cfg.rng_seed), {})
    data, logs = generate(cfg, n_runs=runs, jobs=args.jobs)
    collisions = sum(lg.total_collisions for lg in logs)
    rejected = sum(1 for lg in logs for e in lg.events if e[1] == "rejected_run")
    if data is None:
        raise RuntimeError(f"runs of {cfg.n_sim_steps} ticks are too short to yield any record")
    save_dataset(args.out, data, cfg.world.dt,
                 provenance=dict(input_hash=man.input_hash, config=eff, tool_version=__version__,
                                 run_seeds=[lg.seed for lg in logs]))
    summary = dict(records=len(data), runs=runs, collisions=collisions, rejected_runs=rejected,
                   collision_free=collisions == 0, ticks=sum(len(lg) for lg in logs))
    man.finish([args.out, str(args.out) + ".json"], _manifest_path(args.out), summary)
    print(f"records {len(data)}")
    print(f"collision_free {collisions == 0} (rejected runs {rejected})")
    print(f"dataset {args.out} sha256 {sha256_file(args.out)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def subsample(data, stride):
    if stride <= 1:
        return data
    return data.take(np.nonzero(data.meta[:, 2] % stride == 0)[0])


def cmd_train(args):
    from .datagen import DatasetFormatError, load_dataset
    from .neural.io import load_weights, save_weights
    from .neural.train import TrainingFailure, train
    raw = _load_config(args.config)
    cfg, model_kw, stride = C.train_config(raw, epochs=args.epochs, learning_rate=args.lr,
                                           batch_size=args.batch_size, rng_seed=args.seed,
                                           patience=args.patience, zero_env=True if args.simple else None)
    stride = args.stride if args.stride is not None else stride
    try:
        data, header = load_dataset(args.data)
    except DatasetFormatError as e:
        raise UsageError(str(e)) from e
    data = subsample(data, stride)
    init = load_weights(args.init) if args.init else None
    if init is not None and init.pred_horizon != header["pred_horizon"]:
        raise UsageError(f"weights predict {init.pred_horizon} steps, dataset has {header['pred_horizon']}")
    inputs = {args.data: sha256_file(args.data)}
    if args.init:
        inputs[args.init] = sha256_file(args.init)
    eff = dict(train=_jsonable(cfg), model=model_kw, tick_stride=stride)
    man = PipelineManifest("train", args.config, eff, dict(rng_seed=cfg.rng_seed), inputs)

    def progress(epoch, tr, va):
        if args.verbose:
            print(f"epoch {epoch} train {tr:.6f} val {va:.6f}", flush=True)

    try:
        res = train(data, cfg, init=init, model_kwargs=model_kw, obs_len=header["obs_horizon"],
                    callback=progress)
    except TrainingFailure as e:
        print(f"training diverged: {e} (last finite epoch {e.last_finite_epoch})", file=sys.stderr)
        return EXIT_RUNTIME
    save_weights(args.out, res.weights)
    curve_path = str(args.out) + ".curve.csv"
    with open(curve_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tr, va in res.curve:
            w.writerow([e, repr(float(tr)), repr(float(va))])
    best_val = min([va for _, _, va in res.curve], default=res.initial_val_loss)
    best_val = min(best_val, res.initial_val_loss)
    summary = dict(records=len(data), epochs_run=len(res.curve), best_epoch=res.best_epoch,
                   initial_val_loss=res.initial_val_loss, best_val_loss=best_val)
    man.finish([args.out, curve_path], _manifest_path(args.out), summary)
    print(f"records {len(data)} epochs {len(res.curve)} best_epoch {res.best_epoch}")
    print(f"initial_val_loss {res.initial_val_loss!r}")
    print(f"best_val_loss {best_val!r}")
    print(f"weights {args.out} sha256 {sha256_file(args.out)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _simlog_columns(n, k, N, plans):
    cols = ["tick"]
    for i in range(n):
        cols += [f"r{i}_{q}{a}" for q in ("p", "v", "u", "g") for a in "xyz"]
        cols += [f"r{i}_slack", f"r{i}_failed"]
    for o in range(k):
        cols += [f"o{o}_{q}{a}" for q in ("p", "v") for a in "xyz"]
    if plans:
        for i in range(n):
            cols += [f"r{i}_plan{s}_{a}" for s in range(1, N + 1) for a in "xyz"]
    return cols


def write_simlog(path, sim, header):
    """Whitespace-separated columns, one row per tick, '#' comment header.

    Row t holds the state at the start of tick t, the input applied during it
    and (with plans) the N planned positions computed at tick t.
    """
    L = sim.log
    arr = L.arrays()
    n, k = sim.n, len(sim.obs_pos)
    N = sim.planner.cfg.horizon_steps
    plans = sim.record_plans
    cols = _simlog_columns(n, k, N, plans)
    with open(path, "w") as f:
        f.write(f"# mrnav-simlog version {SIMLOG_VERSION}\n")
        for key in sorted(header):
            f.write(f"# {key} {header[key]}\n")
        f.write(" ".join(cols) + "\n")
        for t in range(len(L)):
            row = [str(t)]
            for i in range(n):
                for a in (arr["robot_pos"], arr["robot_vel"], arr["inputs"], arr["goals"]):
                    row += [repr(float(x)) for x in a[t, i]]
                row += [repr(float(arr["max_slack"][t, i])), str(int(arr["failed"][t, i]))]
            for o in range(k):
                row += [repr(float(x)) for x in arr["obstacle_pos"][t, o]]
                row += [repr(float(x)) for x in arr["obstacle_vel"][t, o]]
            if plans:
                for i in range(n):
                    row += [repr(float(x)) for x in np.asarray(L.plans[t][i]).ravel()]
            f.write(" ".join(row) + "\n")


def read_simlog(path):
    """Parse a simulate log into arrays keyed like ``SimLog.arrays``, plus the header dict."""
    header = {}
    with open(path) as f:
        lines = f.read().splitlines()
    body = []
    cols = None
    for line in lines:
        if line.startswith("#"):
            parts = line[1:].strip().split(" ", 1)
            header[parts[0]] = parts[1] if len(parts) > 1 else ""
        elif cols is None:
            cols = line.split()
        else:
            body.append([float(x) for x in line.split()])
    n, k = int(header["robots"]), int(header["obstacles"])
    data = np.asarray(body, dtype=float).reshape(-1, len(cols))
    idx = {c: j for j, c in enumerate(cols)}

    def block(prefix, count, q):
        return np.stack([data[:, [idx[f"{prefix}{i}_{q}{a}"] for a in "xyz"]] for i in range(count)], axis=1) \
            if count else np.zeros((len(data), 0, 3))

    out = dict(tick=data[:, 0].astype(int), robot_pos=block("r", n, "p"), robot_vel=block("r", n, "v"),
               inputs=block("r", n, "u"), goals=block("r", n, "g"),
               obstacle_pos=block("o", k, "p"), obstacle_vel=block("o", k, "v"),
               max_slack=data[:, [idx[f"r{i}_slack"] for i in range(n)]] if n else np.zeros((len(data), 0)))
    return out, header


def cmd_simulate(args):
    from .evaluation import PlannerKind, Scenario, simulate_instance
    from .neural.io import load_weights
    raw = _load_config(args.config)
    n_obstacles = args.obstacles
    bench, n_robots = C.bench_config(raw, **({} if n_obstacles is None else {"n_obstacles": n_obstacles}))
    n_robots = args.robots if args.robots is not None else n_robots
    planner = PlannerKind(args.planner)
    weights = None
    inputs = {}
    if planner is PlannerKind.RNN:
        if not args.weights:
            raise UsageError("--weights is required with --planner rnn")
        weights = load_weights(args.weights)
        inputs[args.weights] = sha256_file(args.weights)
    scenario = Scenario(args.scenario, n_robots, bench.world.n_obstacles, args.seed)
    eff = dict(bench=_jsonable(bench), scenario=_jsonable(scenario), planner=planner.value, ticks=args.ticks)
    man = PipelineManifest("simulate", args.config, eff, dict(instance_seed=args.seed), inputs)
    sim = simulate_instance(scenario, planner, bench, weights, max_ticks=args.ticks, record_plans=True)
    from .world import count_collisions
    final = count_collisions(sim.pos, sim.obs_pos, bench.world.robot_radius, sim.metric)
    collisions = sim.log.total_collisions + int(sum(final) > 0)
    header = dict(robots=sim.n, obstacles=len(sim.obs_pos), dt=bench.world.dt,
                  horizon=bench.mpc.horizon_steps, planner=planner.value, scenario=scenario.kind.value,
                  seed=args.seed, input_hash=man.input_hash)
    write_simlog(args.out, sim, header)
    arrived = sim.all_arrived()
    summary = dict(ticks=len(sim.log), collisions=collisions, arrived=arrived,
                   arrival_ticks=[int(a) for a in sim.arrival_tick])
    man.finish([args.out], _manifest_path(args.out), summary)
    print(f"ticks {len(sim.log)} collisions {collisions} arrived {arrived}")
    print(f"log {args.out} sha256 {sha256_file(args.out)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval-pred / bench-plan


def cmd_eval_pred(args):
    from .datagen import DatasetFormatError, load_dataset
    from .evaluation import INTERACTION_RADIUS, eval_prediction_subsets, export_results, standard_predictors
    from .neural.io import load_weights
    try:
        data, header = load_dataset(args.data)
    except DatasetFormatError as e:
        raise UsageError(str(e)) from e
    if args.simple_weights and not args.weights:
        raise UsageError("--simple-weights needs --weights")
    weights = load_weights(args.weights) if args.weights else None
    simple = load_weights(args.simple_weights) if args.simple_weights else None
    available = standard_predictors(weights, simple)
    names = args.predictors.split(",") if args.predictors else sorted(available)
    for nm in names:
        if nm not in available:
            raise UsageError(f"unknown predictor '{nm}' (available: {', '.join(sorted(available))})")
    inputs = {args.data: sha256_file(args.data)}
    for path in (args.weights, args.simple_weights):
        if path:
            inputs[path] = sha256_file(path)
    radius = INTERACTION_RADIUS if args.radius is None else args.radius
    man = PipelineManifest("eval-pred", None, dict(predictors=names, interaction_radius=radius), {}, inputs)
    metrics = eval_prediction_subsets(data, {nm: available[nm] for nm in names}, header["dt"], radius)
    export_results(args.out, [], metrics)
    files = [os.path.join(args.out, f) for f in ("planning.csv", "prediction.csv", "summary.json")]
    man.finish(files, os.path.join(args.out, "manifest.json"))
    for pm in metrics:
        for nm in names:
            err = pm.mean[nm][-1] if pm.records else float("nan")
            print(f"{pm.subset} ({pm.records} records) {nm} final-step error {err:.4f} m")
    return EXIT_OK


def cmd_bench_plan(args):
    from .evaluation import PlannerKind, export_results, run_planning_benchmark
    from .neural.io import load_weights
    raw = _load_config(args.config)
    bench, n_robots = C.bench_config(raw, **({} if args.obstacles is None else {"n_obstacles": args.obstacles}))
    if args.timeout is not None:
        bench = dataclasses.replace(bench, timeout=args.timeout)
    n_robots = args.robots if args.robots is not None else n_robots
    planners = [PlannerKind(p) for p in args.planner.split(",")]
    weights, inputs = None, {}
    if PlannerKind.RNN in planners:
        if not args.weights:
            raise UsageError("--weights is required with --planner rnn")
        weights = load_weights(args.weights)
        inputs[args.weights] = sha256_file(args.weights)
    scenarios = args.scenario.split(",")
    eff = dict(bench=_jsonable(bench), scenarios=scenarios, planners=[p.value for p in planners],
               instances=args.instances, robots=n_robots)
    man = PipelineManifest("bench-plan", args.config, eff, dict(seed=args.seed), inputs)
    all_metrics = []
    for sc in scenarios:
        metrics, _ = run_planning_benchmark(sc, args.instances, planners, bench, weights, n_robots,
                                            bench.world.n_obstacles, args.seed, args.jobs)
        for p in planners:
            m = metrics[p.value]
            all_metrics.append(m)
            print(f"{m.scenario} {m.planner}: collision instances {m.collision_instances}/{m.instances}, "
                  f"timeouts {m.timeouts}, duration avg {m.trajectory_duration.avg:.3f} s")
    export_results(args.out, all_metrics, None)
    files = [os.path.join(args.out, f) for f in ("planning.csv", "prediction.csv", "summary.json")]
    man.finish(files, os.path.join(args.out, "manifest.json"))
    return EXIT_OK


def cmd_plot(args):
    from .evaluation import load_summary
    from .report import render_all
    prediction, planning, sim, curve = [], [], None, None
    if args.results:
        planning, prediction = load_summary(args.results)
    if args.log:
        sim, _ = read_simlog(args.log)
    if args.curve:
        with open(args.curve) as f:
            rows = list(csv.reader(f))[1:]
        curve = [[float(x) for x in r] for r in rows]
    if not (args.results or args.log or args.curve):
        raise UsageError("nothing to plot: give --results, --log or --curve")
    for path in render_all(args.out, prediction, planning, sim, curve):
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="mrnav", description="Multi-robot MPC navigation with learned neighbour prediction.")
    p.add_argument("--version", action="version", version=__version__, help="print the version and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="run centralized demonstrations and write a dataset")
    g.add_argument("--config", required=True, help="TOML config; datagen.n_sim_steps is required")
    g.add_argument("--out", required=True, help="dataset path; a .json sidecar and manifest are written next to it")
    g.add_argument("--seed", type=int, help="override datagen.rng_seed")
    g.add_argument("--ticks", type=int, help="override datagen.n_sim_steps")
    g.add_argument("--runs", type=int, help="number of runs with consecutive seeds (default datagen.runs or 1)")
    g.add_argument("--jobs", type=int, default=1, help="runs executed in parallel processes")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the predictor on a dataset")
    t.add_argument("--data", required=True, help="dataset written by gen-data")
    t.add_argument("--out", required=True, help="weights path; a .curve.csv and manifest are written next to it")
    t.add_argument("--config", help="TOML config with a [train] section")
    t.add_argument("--epochs", type=int, help="maximum epochs")
    t.add_argument("--lr", type=float, help="learning rate")
    t.add_argument("--batch-size", type=int, help="minibatch size")
    t.add_argument("--patience", type=int, help="early-stopping patience in epochs")
    t.add_argument("--seed", type=int, help="initialisation and shuffling seed")
    t.add_argument("--stride", type=int, help="keep records whose tick is a multiple of this")
    t.add_argument("--init", help="resume from these weights")
    t.add_argument("--simple", action="store_true", help="train the query-only ablation (environment encoding zeroed)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="run one scenario instance and write a tick log")
    s.add_argument("--scenario", default="symmetric", choices=["symmetric", "asymmetric", "pairwise", "random"],
                   help="scenario kind")
    s.add_argument("--planner", default="centralized", choices=["centralized", "cvm", "rnn", "oracle"],
                   help="centralized, or decentralized with the named predictor")
    s.add_argument("--weights", help="model weights (required for --planner rnn)")
    s.add_argument("--seed", type=int, default=0, help="scenario instance seed")
    s.add_argument("--ticks", type=int, help="tick limit (default: run to arrival or the bench timeout)")
    s.add_argument("--robots", type=int, help="number of robots")
    s.add_argument("--obstacles", type=int, help="number of moving obstacles")
    s.add_argument("--config", help="TOML config")
    s.add_argument("--out", required=True, help="log path")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval-pred", help="per-step prediction error on a held-out dataset")
    e.add_argument("--data", required=True, help="test dataset")
    e.add_argument("--weights", help="model weights (adds rnn and rnn_simple)")
    e.add_argument("--simple-weights", help="separately trained query-only model for rnn_simple "
                   "(default: zero the environment encoding of --weights)")
    e.add_argument("--predictors", help="comma-separated subset of cvm,rnn,rnn_simple")
    e.add_argument("--radius", type=float, help="interaction-rich neighbour distance in m")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval_pred)

    b = sub.add_parser("bench-plan", help="planner comparison over scenario instances")
    b.add_argument("--scenario", default="asymmetric", help="comma-separated scenario kinds")
    b.add_argument("--planner", default="centralized,cvm", help="comma-separated planners")
    b.add_argument("--instances", type=int, default=10, help="instances per scenario and planner")
    b.add_argument("--seed", type=int, default=0, help="first instance seed")
    b.add_argument("--weights", help="model weights (required for rnn)")
    b.add_argument("--robots", type=int, help="number of robots")
    b.add_argument("--obstacles", type=int, help="number of moving obstacles")
    b.add_argument("--timeout", type=float, help="simulated seconds per instance")
    b.add_argument("--jobs", type=int, default=1, help="instances run concurrently")
    b.add_argument("--config", help="TOML config")
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_bench_plan)

    pl = sub.add_parser("plot", help="render figures from results, a simulate log or a training curve")
    pl.add_argument("--results", help="directory written by eval-pred or bench-plan")
    pl.add_argument("--log", help="log written by simulate")
    pl.add_argument("--curve", help="curve CSV written by train")
    pl.add_argument("--out", required=True, help="output directory for PNG files")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, C.ConfigError, ValueError) as e:
        print(f"mrnav {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RuntimeError) as e:
        print(f"mrnav {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
