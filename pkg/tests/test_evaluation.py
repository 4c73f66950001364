import json

import numpy as np
import pytest

from dgqn import baselines as B
from dgqn import sim
from dgqn.evaluation import EVAL_STREAM, EvalReport, EpisodeResult, episode_seed, evaluate, run_episode

SHORT = sim.SimConfig(t_max_s=1000)


def test_same_seed_same_demand_for_every_controller(toy2):
    a = evaluate(toy2, 3, seed=4, sim_config=SHORT)
    b = evaluate(toy2, 3, seed=4, sim_config=SHORT)
    assert [e.total_delay_h for e in a.episodes] == [e.total_delay_h for e in b.episodes]
    m = B.make_model("dgqn", toy2)
    params = m.init_params(0).params
    # demand scales are drawn in reset, before any controller acts
    scales = []
    for model in (None, m):
        rng = np.random.default_rng(episode_seed(4, 1))
        state = sim.reset(toy2, SHORT, rng=rng)
        scales.append(state.episode_entry_scale.copy())
    assert np.array_equal(*scales)
    assert evaluate(toy2, 2, seed=4, model=m, params=params, sim_config=SHORT).n_episodes == 2


def test_episode_seeds_are_distinct():
    seeds = {episode_seed(0, k).generate_state(2).tobytes() for k in range(50)}
    assert len(seeds) == 50
    assert list(episode_seed(0, 0).entropy) == [0, EVAL_STREAM, 0]


def jam_network(toy2):
    from dataclasses import replace

    from dgqn.network import RoadNetwork

    lgs = tuple(replace(lg, entry_volume_vph=lg.entry_volume_vph * 6) for lg in toy2.lane_groups)
    return RoadNetwork(lgs, toy2.intersections, name="jam")


def test_run_to_horizon_scores_the_full_period(toy2):
    net = jam_network(toy2)
    cfg = sim.SimConfig(t_max_s=2000)
    m = B.make_model("dgqn", net)
    params = m.init_params(0).params
    full = evaluate(net, 2, seed=1, model=m, params=params, sim_config=cfg)
    short = evaluate(net, 2, seed=1, model=m, params=params, sim_config=cfg, run_to_horizon=False)
    assert any(s.termination_cause != sim.CAUSE_HORIZON for s in short.episodes)
    for f, s in zip(full.episodes, short.episodes):
        assert f.decisions == (2000 - 400) // 20
        assert f.termination_cause == s.termination_cause
        if s.termination_cause != sim.CAUSE_HORIZON:
            assert s.decisions < f.decisions and f.total_delay_h > s.total_delay_h
            assert f.terminal_at_s == 400 + 20 * s.decisions


def test_fixed_episode_without_jam_reports_horizon(grid2x2):
    report = evaluate(grid2x2, 2, seed=0, sim_config=SHORT)
    assert all(e.termination_cause == "horizon" and e.terminal_at_s == -1 for e in report.episodes)


def test_aggregates_recompute_from_rows(tmp_path):
    rows = [EpisodeResult(k, 0, float(v), float(q), "horizon", 180) for k, (v, q) in enumerate([(1, 5), (3, 7), (8, 2)])]
    report = EvalReport("fixed", "toy", 0, rows)
    agg = report.aggregates()
    assert agg["mean_total_delay_h"] == pytest.approx(4.0, abs=1e-12)
    assert agg["std_total_delay_h"] == pytest.approx(np.std([1, 3, 8], ddof=1), abs=1e-12)
    assert agg["mean_max_queue_m"] == pytest.approx(14 / 3, abs=1e-12)
    assert agg["termination_causes"] == {"horizon": 3}
    jpath, cpath = report.write(tmp_path)
    doc = json.loads(jpath.read_text())
    assert doc["aggregates"] == agg and len(doc["rows"]) == 3
    assert cpath.read_text().splitlines()[0].startswith("episode,seed,total_delay_h")


def test_zero_episodes_rejected(toy2):
    with pytest.raises(ValueError):
        evaluate(toy2, 0)
