import csv
import json

import numpy as np
import pytest

from _oracles import small_model
import argparse

from mrnav.cli import build_parser, main, read_simlog
from mrnav.neural.io import load_weights, save_weights

MINIMAL = """
[datagen]
n_sim_steps = 100
"""

SUBCOMMANDS = ("gen-data", "train", "simulate", "eval-pred", "bench-plan", "plot")


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "min.toml"
    cfg.write_text(MINIMAL)
    assert main(["gen-data", "--config", str(cfg), "--seed", "2", "--out", str(d / "data.ds")]) == 0
    return d


def _weights(d, name="w.bin", *extra):
    out = d / name
    assert main(["train", "--data", str(d / "data.ds"), "--epochs", "2", "--batch-size", "32",
                 "--out", str(out), *extra]) == 0
    return out


def test_help_lists_flags(capsys):
    for sub in SUBCOMMANDS:
        with pytest.raises(SystemExit) as e:
            main([sub, "--help"])
        assert e.value.code == 0
        assert "--out" in capsys.readouterr().out


def test_every_flag_has_help():
    parser = build_parser()
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    assert set(subs.choices) == set(SUBCOMMANDS)
    for name, sp in [("mrnav", parser), *subs.choices.items()]:
        for action in sp._actions:
            if action.option_strings:
                assert action.help, f"{name} {action.option_strings}"


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["simulate", "--out", "x", "--bogus"])
    assert e.value.code == 1


def test_gen_data_smoke(tiny, capsys):
    out = tiny / "again.ds"
    assert main(["gen-data", "--config", str(tiny / "min.toml"), "--seed", "2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "records 240" in text and "collision_free True" in text
    assert out.read_bytes() == (tiny / "data.ds").read_bytes()
    man = json.loads((tiny / "again.ds.manifest.json").read_text())
    side = json.loads((tiny / "again.ds.json").read_text())
    assert side["provenance"]["input_hash"] == man["input_hash"]


def test_gen_data_missing_field(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[datagen]\nruns = 1\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d.ds")]) == 1
    assert "n_sim_steps" in capsys.readouterr().err


def test_gen_data_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[datagen]\nn_sim_steps = 100\n[mpc]\nhorizon = 20\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d.ds")]) == 1
    assert "horizon" in capsys.readouterr().err


def test_gen_data_different_seed_differs(tiny):
    out = tiny / "other.ds"
    assert main(["gen-data", "--config", str(tiny / "min.toml"), "--seed", "3", "--out", str(out)]) == 0
    assert out.read_bytes() != (tiny / "data.ds").read_bytes()


def test_train_smoke_and_curve(tiny):
    w = _weights(tiny)
    rows = list(csv.reader(open(f"{w}.curve.csv")))
    assert rows[0] == ["epoch", "train_loss", "val_loss"] and len(rows) == 3
    load_weights(w).check_consistent()


def test_train_zero_lr_flat(tiny):
    w = _weights(tiny, "flat.bin", "--lr", "0")
    vals = [float(r[2]) for r in list(csv.reader(open(f"{w}.curve.csv")))[1:]]
    man = json.loads(open(f"{w}.manifest.json").read())
    assert vals == [man["summary"]["initial_val_loss"]] * 2


def test_train_resume_continuity(tiny):
    w = _weights(tiny, "first.bin")
    best = json.loads(open(f"{w}.manifest.json").read())["summary"]["best_val_loss"]
    w2 = _weights(tiny, "second.bin", "--init", str(w))
    init = json.loads(open(f"{w2}.manifest.json").read())["summary"]["initial_val_loss"]
    assert abs(init - best) <= 1e-12


def test_train_divergence_exit_code(tiny):
    bad = load_weights(_weights(tiny, "base.bin"))
    bad.output_layer.b[:] = np.nan
    save_weights(tiny / "nan.bin", bad)
    code = main(["train", "--data", str(tiny / "data.ds"), "--epochs", "1", "--init", str(tiny / "nan.bin"),
                 "--out", str(tiny / "never.bin")])
    assert code == 2


def test_train_bad_dataset(tmp_path):
    p = tmp_path / "junk.ds"
    p.write_bytes(b"junk")
    assert main(["train", "--data", str(p), "--out", str(tmp_path / "w.bin")]) == 1


def test_simulate_centralized_symmetric(tmp_path, capsys):
    out = tmp_path / "sim.log"
    assert main(["simulate", "--scenario", "symmetric", "--planner", "centralized", "--seed", "1",
                 "--out", str(out)]) == 0
    assert "collisions 0 arrived True" in capsys.readouterr().out
    arr, header = read_simlog(out)
    assert arr["robot_pos"].shape[1] == 4 and arr["robot_pos"].shape[2] == 3
    assert header["planner"] == "centralized"


def test_simulate_header_only(tmp_path):
    out = tmp_path / "sim.log"
    assert main(["simulate", "--ticks", "0", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# mrnav-simlog version")
    body = [x for x in lines if not x.startswith("#")]
    assert len(body) == 1 and body[0].startswith("tick ")
    arr, _ = read_simlog(out)
    assert len(arr["robot_pos"]) == 0


def test_simulate_rnn_needs_weights(tmp_path):
    assert main(["simulate", "--planner", "rnn", "--out", str(tmp_path / "s.log")]) == 1


def test_simulate_cvm_and_rnn_differ(tiny, tmp_path):
    w = _weights(tiny, "sim.bin")
    a, b = tmp_path / "cvm.log", tmp_path / "rnn.log"
    common = ["--scenario", "asymmetric", "--seed", "2", "--ticks", "30"]
    assert main(["simulate", "--planner", "cvm", *common, "--out", str(a)]) == 0
    assert main(["simulate", "--planner", "rnn", "--weights", str(w), *common, "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_simulate_log_columns(tmp_path):
    out = tmp_path / "sim.log"
    assert main(["simulate", "--robots", "2", "--obstacles", "1", "--ticks", "5", "--out", str(out)]) == 0
    arr, header = read_simlog(out)
    assert arr["robot_pos"].shape == (5, 2, 3)
    assert arr["obstacle_pos"].shape == (5, 1, 3)
    assert arr["inputs"].shape == arr["goals"].shape == (5, 2, 3)
    assert arr["max_slack"].shape == (5, 2) and arr["tick"].tolist() == list(range(5))


def test_eval_pred_and_plot(tiny, tmp_path, capsys):
    w = _weights(tiny, "eval.bin")
    out = tmp_path / "pred"
    assert main(["eval-pred", "--data", str(tiny / "data.ds"), "--weights", str(w), "--out", str(out)]) == 0
    assert "rnn final-step error" in capsys.readouterr().out
    rows = list(csv.reader(open(out / "prediction.csv")))
    assert rows[0][0] == "subset"
    figs = tmp_path / "figs"
    assert main(["plot", "--results", str(out), "--curve", f"{w}.curve.csv", "--out", str(figs)]) == 0
    assert (figs / "prediction_error.png").stat().st_size > 0
    assert (figs / "training_curve.png").stat().st_size > 0


def test_eval_pred_unknown_predictor(tiny, tmp_path):
    assert main(["eval-pred", "--data", str(tiny / "data.ds"), "--predictors", "rnn",
                 "--out", str(tmp_path / "p")]) == 1


def test_bench_plan_and_plot(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench-plan", "--scenario", "pairwise", "--planner", "cvm", "--instances", "1",
                 "--robots", "2", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "planning.csv")))
    assert len(rows) == 2 and rows[1][:3] == ["pairwise", "cvm", "1"]
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["artifacts"]) == {str(out / f) for f in ("planning.csv", "prediction.csv", "summary.json")}
    sim = tmp_path / "s.log"
    assert main(["simulate", "--ticks", "10", "--out", str(sim)]) == 0
    assert main(["plot", "--results", str(out), "--log", str(sim), "--out", str(tmp_path / "f")]) == 0
    assert (tmp_path / "f" / "planning.png").exists() and (tmp_path / "f" / "trajectories.png").exists()


def test_bench_plan_rnn_needs_weights(tmp_path):
    assert main(["bench-plan", "--planner", "rnn", "--instances", "1", "--out", str(tmp_path / "b")]) == 1


def test_plot_needs_input(tmp_path):
    assert main(["plot", "--out", str(tmp_path / "f")]) == 1


def test_weights_loadable_by_predictor(tmp_path):
    p = tmp_path / "w.bin"
    save_weights(p, small_model(0, horizon=20))
    assert main(["simulate", "--planner", "rnn", "--weights", str(p), "--ticks", "3", "--robots", "2",
                 "--out", str(tmp_path / "s.log")]) == 0
