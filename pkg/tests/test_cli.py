import csv
import json

import numpy as np
import pytest

from dgqn import cli
from dgqn.network import save_network


@pytest.fixture
def toy_setup(tmp_path, toy2):
    net_path = tmp_path / "toy.json"
    save_network(toy2, net_path)
    cfg = {
        "network": str(net_path),
        "actors": 1,
        "sim": {"t_max_s": 1000},
        "checkpoint_every": 0,
        "hyper": {"replay_warm_start": 32, "max_episodes": 2, "exploration_decay": [500.0]},
    }
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(cfg))
    return tmp_path, net_path, cfg_path


def run(*argv):
    return cli.main([str(a) for a in argv])


def train_toy(cfg_path, out, *extra):
    assert run("train", "--config", cfg_path, "--out-dir", out, *extra) == 0
    return out


# ------------------------------------------------------------------ train


def test_train_four_actor_streams(toy_setup):
    tmp, _, cfg_path = toy_setup
    out = train_toy(cfg_path, tmp / "run4", "--actors", 4, "--episodes", 2)
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert sorted({int(r["actor_id"]) for r in rows}) == [0, 1, 2, 3]
    assert all((out / f"metrics_actor{k}.csv").exists() for k in range(4))
    assert (out / "final.ckpt").exists()


def test_train_is_deterministic(toy_setup):
    tmp, _, cfg_path = toy_setup
    # same output directory both times, since the checkpoint header records it
    out = tmp / "run"
    outputs = []
    for _ in range(2):
        train_toy(cfg_path, out, "--actors", 1, "--seed", 7)
        outputs.append([(out / f).read_bytes() for f in ("final.ckpt", "metrics.csv", "intervals.csv")])
    assert outputs[0] == outputs[1]


def test_train_missing_network(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "net.json"
    out = tmp_path / "out"
    assert run("train", "--network", missing, "--out-dir", out) == 2
    assert str(missing) in capsys.readouterr().err
    assert not out.exists()


def test_train_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"actors": 2, "hyperparameters": {}}))
    assert run("train", "--config", bad, "--out-dir", tmp_path / "out") == 2
    assert "hyperparameters" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_train_rejects_bad_thread_cap(toy_setup, monkeypatch):
    tmp, _, cfg_path = toy_setup
    monkeypatch.setenv("DGQN_THREADS", "-1")
    assert run("train", "--config", cfg_path, "--out-dir", tmp / "o") == 2
    assert not (tmp / "o").exists()


def test_argument_errors_exit_2():
    assert run("train", "--episodes", 0) == 2
    assert run("frobnicate") == 2


# ------------------------------------------------------------------ eval


def test_eval_fixed_seoul15(tmp_path):
    assert run("eval", "--model", "fixed", "--network", "seoul15", "--episodes", 20, "--out-dir", tmp_path) == 0
    report = json.loads((tmp_path / "eval_fixed.json").read_text())
    agg = report["aggregates"]
    assert agg["episodes"] == 20 and np.isfinite(agg["mean_total_delay_h"])
    delays = [r["total_delay_h"] for r in report["rows"]]
    assert abs(agg["mean_total_delay_h"] - np.mean(delays)) <= 1e-9
    assert abs(agg["std_total_delay_h"] - np.std(delays, ddof=1)) <= 1e-9
    assert abs(agg["mean_max_queue_m"] - np.mean([r["max_queue_m"] for r in report["rows"]])) <= 1e-9
    rows = list(csv.DictReader(open(tmp_path / "eval_fixed.csv")))
    assert [float(r["total_delay_h"]) for r in rows] == pytest.approx(delays, abs=0)


def test_eval_rejects_zero_episodes(tmp_path):
    assert run("eval", "--model", "fixed", "--episodes", 0, "--out-dir", tmp_path / "e") == 2
    assert not (tmp_path / "e").exists()


def test_eval_needs_a_controller(tmp_path):
    assert run("eval", "--out-dir", tmp_path / "e") == 2


def test_eval_checkpoint(toy_setup):
    tmp, net_path, cfg_path = toy_setup
    out = train_toy(cfg_path, tmp / "run")
    assert run("eval", "--checkpoint", out / "final.ckpt", "--network", net_path, "--episodes", 3,
               "--out-dir", tmp / "ev") == 0
    report = json.loads((tmp / "ev" / "eval_dgqn.json").read_text())
    assert report["aggregates"]["episodes"] == 3
    assert all(r["decisions"] <= 30 for r in report["rows"])  # checkpoint carries the short horizon


def test_eval_shape_mismatch(toy_setup, capsys):
    tmp, _, cfg_path = toy_setup
    out = train_toy(cfg_path, tmp / "run")
    assert run("eval", "--checkpoint", out / "final.ckpt", "--network", "seoul15", "--out-dir", tmp / "ev") == 2
    assert "does not fit" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert run("eval", "--checkpoint", bad, "--out-dir", tmp_path / "e") == 2


# ------------------------------------------------------------------ simulate


def test_simulate_zero_demand_all_green(tmp_path):
    assert run("simulate", "--controller", "all_green", "--zero-demand", "--out-dir", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "intervals.csv")))
    assert rows and all(float(r["delay_veh_s"]) == 0.0 for r in rows)


def test_simulate_fixed_seoul15(tmp_path):
    assert run("simulate", "--network", "seoul15", "--controller", "fixed", "--duration", 4000,
               "--out-dir", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "intervals.csv")))
    assert 0 < len(rows) <= 180
    assert all(int(r["end_s"]) - int(r["start_s"]) == 20 for r in rows)
    assert (tmp_path / "events.csv").stat().st_size > 0


def test_simulate_replays_deterministically(tmp_path):
    for name in ("a", "b"):
        assert run("simulate", "--duration", 1000, "--seed", 3, "--out-dir", tmp_path / name) == 0
    assert (tmp_path / "a" / "events.csv").read_bytes() == (tmp_path / "b" / "events.csv").read_bytes()


def test_simulate_bad_duration(tmp_path):
    assert run("simulate", "--duration", 410, "--out-dir", tmp_path / "s") == 2
    assert not (tmp_path / "s").exists()


# ------------------------------------------------------------------ describe


def test_describe_seoul15_lists_six_adjacencies(capsys):
    assert run("describe", "--model", "dgqn", "--network", "seoul15", "--json") == 0
    d = json.loads(capsys.readouterr().out)
    adj = {k: v for k, v in d["shapes"].items() if k.startswith("adj_")}
    assert len(adj) == 6 and all(v == [77, 77] for v in adj.values())
    assert d["parameter_counts"]["adjacency"] == 6 * 77 * 77
    assert d["config"]["gamma"] == 0.95


def test_describe_ogcn_and_fc(capsys):
    counts = {}
    for kind in ("dgqn", "dqn_ogcn", "dqn_fc"):
        assert run("describe", "--model", kind, "--network", "seoul15", "--json") == 0
        d = json.loads(capsys.readouterr().out)
        counts[kind] = d["total_parameters"]
        if kind == "dqn_ogcn":
            assert d["parameter_counts"]["adjacency"] == 0
    assert abs(counts["dqn_fc"] - counts["dgqn"]) < 0.02 * counts["dgqn"]


def test_describe_text_and_checkpoint(toy_setup, capsys):
    tmp, _, cfg_path = toy_setup
    out = train_toy(cfg_path, tmp / "run")
    capsys.readouterr()
    assert run("describe", "--checkpoint", out / "final.ckpt") == 0
    text = capsys.readouterr().out
    assert "adjacency" in text and "gamma=0.95" in text
    assert run("describe", "--checkpoint", tmp / "missing.ckpt") == 2
