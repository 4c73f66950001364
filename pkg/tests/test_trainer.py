import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dgqn import model as M
from dgqn import sim
from dgqn import trainer as T
from dgqn.network import grid_network

SHORT = sim.SimConfig(t_max_s=1000)  # 30 decisions per episode


def toy_config(**hyper):
    h = dict(replay_capacity=2000, replay_warm_start=32, target_interval=100, max_episodes=3,
             exploration_decay=(2000.0, 2000.0, 2000.0, 2000.0))
    h.update(hyper)
    return T.RunConfig(network="toy", actors=1, hyper=T.desk_hyper(**h), sim=SHORT, checkpoint_every=0)


def consume(gen, steps):
    n = 0
    for item in gen:
        if item is None:
            n += 1
            if n == steps:
                return n
    return n


# ------------------------------------------------------------------ exploration and reward


def test_epsilon_examples():
    assert T.epsilon(0, 2.3e6) == 1.0
    assert abs(T.epsilon(2.3e6, 2.3e6) - math.exp(-1)) <= 1e-12
    assert T.epsilon(23_000_000, 2.3e6) < 1e-43
    assert T.epsilon(10**7, 5.0, eps_max=1.0, eps_min=0.1) == pytest.approx(0.1)


@settings(max_examples=200)
@given(st.integers(0, 10**8), st.integers(0, 10**8), st.sampled_from(T.FULL_SCALE_EXPLORATION))
def test_epsilon_monotone(a, b, decay):
    lo, hi = sorted((a, b))
    assert T.epsilon(hi, decay) <= T.epsilon(lo, decay)


@pytest.mark.parametrize("counter,decay", [(-1, 10.0), (5, 0.0), (5, -2.0)])
def test_epsilon_rejects_bad_input(counter, decay):
    with pytest.raises(ValueError):
        T.epsilon(counter, decay)


def test_reward_examples():
    assert T.reward(100, 120) == 1
    assert T.reward(120, 100) == -1
    assert T.reward(100, 100) == -1


def test_full_scale_decays_assigned_per_actor():
    h = T.Hyper()
    assert [h.decay_for(k) for k in range(4)] == [2.3e6, 2.6e6, 2.9e6, 3.2e6]
    assert (h.replay_capacity, h.replay_warm_start, h.batch_size, h.target_interval) == (30000, 3000, 32, 2500)


# ------------------------------------------------------------------ replay buffer


def test_replay_fifo_eviction():
    buf = T.ReplayBuffer(capacity=50, warm_start=10)
    for k in range(150):
        buf.add(k)
    assert len(buf) == 50
    assert list(buf) == list(range(100, 150))
    assert buf.inserted == 150


def test_replay_sampling_is_without_replacement(rng):
    buf = T.ReplayBuffer(capacity=40, warm_start=0)
    for k in range(40):
        buf.add(k)
    for _ in range(50):
        batch = buf.sample(32, rng)
        assert len(set(batch)) == 32
    with pytest.raises(ValueError):
        buf.sample(41, rng)


def test_replay_ready_and_validation():
    buf = T.ReplayBuffer(capacity=5, warm_start=3)
    for k in range(2):
        buf.add(k)
    assert not buf.ready
    buf.add(2)
    assert buf.ready
    with pytest.raises(ValueError):
        T.ReplayBuffer(capacity=5, warm_start=6)


# ------------------------------------------------------------------ action selection


def toy_model(net):
    cfg = M.model_config_for(net, embed_dim=8)
    m = M.DGQN(cfg, net.mask, net.feasibility(cfg.n_phases))
    return m, m.init_params(0)


def test_random_actions_are_uniform(toy2):
    m, store = toy_model(toy2)
    rng = np.random.default_rng(7)
    S = np.zeros((toy2.N, 2, 3))
    counts = np.zeros(4)
    for _ in range(10_000):
        a = T.select_action(S, m, store.params, 1.0, rng)
        counts[a[0] * 2 + a[1]] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_greedy_action_with_zero_params(toy2):
    m, store = toy_model(toy2)
    for name in store.names():
        store.params[name] = np.zeros_like(store.params[name])
    a = T.select_action(np.random.default_rng(0).uniform(size=(toy2.N, 2, 3)), m, store.params, 0.0,
                        np.random.default_rng(1))
    assert a.tolist() == [0, 0]


def test_greedy_action_is_deterministic(toy2, rng):
    m, store = toy_model(toy2)
    S = rng.uniform(size=(toy2.N, 2, 3))
    picks = {tuple(T.select_action(S, m, store.params, 0.0, np.random.default_rng(s))) for s in range(20)}
    assert len(picks) == 1


def test_random_actions_respect_feasibility(rng):
    net = grid_network(1, 2)
    cfg = M.model_config_for(net, n_phases=4, embed_dim=8)
    m = M.DGQN(cfg, net.mask, net.feasibility(4))
    store = m.init_params(0)
    draws = np.array([T.select_action(np.zeros((net.N, 2, 3)), m, store.params, 1.0, rng) for _ in range(500)])
    assert draws.max() <= 1


# ------------------------------------------------------------------ shared parameters


def test_async_apply_counts_and_checks_shapes(toy2):
    m, store = toy_model(toy2)
    shared = T.SharedParams(store)
    grads = {k: np.ones_like(v) for k, v in store.params.items()}
    assert T.async_apply_gradients(shared, grads, 1e-3) == 1
    bad = dict(grads)
    bad["heads"] = np.ones((1, 1))
    with pytest.raises(ValueError):
        T.async_apply_gradients(shared, bad, 1e-3)
    assert shared.updates == 1


def test_target_is_a_past_incumbent(toy2):
    m, store = toy_model(toy2)
    shared = T.SharedParams(store)
    before = {k: v.copy() for k, v in store.params.items()}
    T.async_apply_gradients(shared, {k: np.ones_like(v) for k, v in store.params.items()}, 1e-2)
    assert all(np.array_equal(shared.target.params[k], before[k]) for k in before)
    shared.refresh_target()
    assert all(np.array_equal(shared.target.params[k], shared.incumbent.params[k]) for k in before)
    assert shared.target_refreshes == 1


def test_four_actors_hundred_updates_each(toy2):
    cfg = toy_config(max_episodes=100)
    net, model, shared = T.prepare(cfg, toy2)
    logs = [T.ActorLog() for _ in range(4)]
    gens = [T.actor_loop(k, net, cfg.sim, shared, cfg.hyper, model, 0, logs[k], False) for k in range(4)]
    live = list(range(4))
    while live:
        for k in list(live):
            next(gens[k])
            if len(logs[k].updates) == 100:
                live.remove(k)
    assert shared.updates == 400


def test_gradients_come_from_snapshot_only(toy2, rng):
    m, store = toy_model(toy2)
    shared = T.SharedParams(store)
    batch = [M.Transition(rng.uniform(size=(toy2.N, 2, 3)), np.array([0, 1]), rng.uniform(size=(toy2.N, 2, 3)), 1.0)
             for _ in range(4)]
    grads, loss = T.gradients(m, batch, shared.read(), shared.target, 0.95)
    assert loss > 0 and set(grads) == set(store.names())
    assert all(not g.any() for g in shared.target.grads.values())
    assert all(not g.any() for g in shared.incumbent.grads.values())


# ------------------------------------------------------------------ actor loop


def test_no_gradient_before_warm_start(toy2):
    cfg = toy_config(replay_warm_start=100, max_episodes=10)
    net, model, shared = T.prepare(cfg, toy2)
    alog = T.ActorLog()
    consume(T.actor_loop(0, net, cfg.sim, shared, cfg.hyper, model, 0, alog, False), 150)
    assert alog.updates and min(size for _, size in alog.updates) >= 100
    assert alog.updates[0] == (99, 100)


def test_episode_decisions_bounded_by_horizon(toy2):
    cfg = toy_config(max_episodes=3)
    net, model, shared = T.prepare(cfg, toy2)
    episodes = [s for s in T.actor_loop(0, net, cfg.sim, shared, cfg.hyper, model, 0) if s is not None]
    assert len(episodes) == 3
    assert all(e.decisions <= (1000 - 400) // 20 for e in episodes)


def test_refresh_count_follows_local_steps(toy2):
    cfg = toy_config(target_interval=100, max_episodes=100)
    net, model, shared = T.prepare(cfg, toy2)
    alog = T.ActorLog()
    consume(T.actor_loop(0, net, cfg.sim, shared, cfg.hyper, model, 0, alog, False), 200)
    assert alog.refreshes == [100, 200] and shared.target_refreshes == 2


def test_stops_once_exploration_has_decayed(toy2):
    cfg = toy_config(exploration_decay=(10.0,), max_episodes=50)
    net, model, shared = T.prepare(cfg, toy2)
    episodes = [s for s in T.actor_loop(0, net, cfg.sim, shared, cfg.hyper, model, 0) if s is not None]
    assert len(episodes) == 1  # eps(30) = e^-9 < 1e-3 after the first episode


def test_nan_gradient_aborts_episode(toy2, monkeypatch):
    cfg = toy_config(max_episodes=3)
    net, model, shared = T.prepare(cfg, toy2)
    real = T.gradients
    calls = {"n": 0}

    def poisoned(*args, **kw):
        grads, loss = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 1:
            grads = {k: np.full_like(v, np.nan) for k, v in grads.items()}
        return grads, loss

    monkeypatch.setattr(T, "gradients", poisoned)
    alog = T.ActorLog()
    before = {k: v.copy() for k, v in shared.incumbent.params.items()}
    episodes = [s for s in T.actor_loop(0, net, cfg.sim, shared, cfg.hyper, model, 0, alog) if s is not None]
    # 30 decisions per episode, so the first batch of 32 is drawn on the second step of episode 1
    assert [e.termination_cause for e in episodes] == ["horizon", "nan_gradient", "horizon"]
    assert episodes[1].decisions == 2 and alog.aborted == 1
    assert all(np.isfinite(v).all() for v in shared.incumbent.params.values())
    assert shared.updates == len(alog.updates) and shared.updates > 0
    assert any(not np.array_equal(before[k], shared.incumbent.params[k]) for k in before)


def test_interval_log_matches_reward_rule(toy2):
    cfg = toy_config(max_episodes=2)
    net, model, shared = T.prepare(cfg, toy2)
    alog = T.ActorLog()
    consume(T.actor_loop(0, net, cfg.sim, shared, cfg.hyper, model, 0, alog), 10**6)
    assert len(alog.intervals) == 60
    for rec in alog.intervals:
        assert rec.reward == (1 if rec.delay_cur_s < rec.delay_prev_s else -1)
        assert rec.elapsed_s == 20


# ------------------------------------------------------------------ train entry point


def test_train_writes_outputs(tmp_path, toy2):
    cfg = T.RunConfig(network="toy", actors=2, out_dir=str(tmp_path), sim=SHORT, checkpoint_every=20,
                      hyper=toy_config(max_episodes=12).hyper)
    result = T.train(cfg, toy2)
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert list(rows[0]) == T.METRIC_FIELDS
    assert len(rows) == 24
    for k in range(2):
        mine = [r for r in rows if int(r["actor_id"]) == k]
        assert mine == list(csv.DictReader(open(tmp_path / f"metrics_actor{k}.csv")))
        rewards = [float(r["mean_reward"]) for r in mine]
        for j, r in enumerate(mine):
            assert float(r["moving_avg_10"]) == pytest.approx(np.mean(rewards[max(0, j - 9): j + 1]))
    assert json.loads((tmp_path / "run_config.json").read_text()) == cfg.to_dict()
    assert result.checkpoints and all(p.exists() for p in result.checkpoints)
    _, store, target, meta = M.load_params(tmp_path / "final.ckpt")
    assert meta["updates"] == result.shared.updates
    assert all(np.array_equal(store.params[k], result.shared.incumbent.params[k]) for k in store.names())
    intervals = list(csv.DictReader(open(tmp_path / "intervals.csv")))
    assert len(intervals) == sum(e.decisions for e in result.episodes)
    refresh = list(csv.DictReader(open(tmp_path / "target_refresh.csv")))
    assert all(int(r["local_step"]) % 100 == 0 for r in refresh)


def test_single_actor_training_is_deterministic(toy2):
    cfg = toy_config(max_episodes=2)
    a = T.train(cfg, toy2, write=False)
    b = T.train(cfg, toy2, write=False)
    assert a.shared.updates == b.shared.updates > 0
    assert all(a.shared.incumbent.params[k].tobytes() == b.shared.incumbent.params[k].tobytes()
               for k in a.shared.incumbent.names())
    assert [e.mean_reward for e in a.episodes] == [e.mean_reward for e in b.episodes]


def test_threaded_executor_runs_all_actors(toy2):
    cfg = T.RunConfig(network="toy", actors=3, sim=SHORT, executor="threads", threads=2, checkpoint_every=0,
                      hyper=toy_config(max_episodes=2).hyper)
    result = T.train(cfg, toy2, write=False)
    assert sorted((e.actor_id, e.episode) for e in result.episodes) == [(k, j) for k in range(3) for j in range(2)]
    assert result.shared.updates == sum(len(result.logs[k].updates) for k in range(3))


def test_async_single_actor_matches_synchronous_reference(toy2):
    cfg = toy_config(max_episodes=10, target_interval=40)
    _, theta, theta_target, n = T.train_synchronous(cfg, toy2, max_updates=30)
    shared = T.train_until_updates(cfg, 30, toy2)
    assert n == shared.updates == 30
    for k in theta.names():
        assert theta.params[k].tobytes() == shared.incumbent.params[k].tobytes()
        assert theta_target.params[k].tobytes() == shared.target.params[k].tobytes()


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("DGQN_THREADS", "2")
    assert T.thread_cap() == 2
    monkeypatch.setenv("DGQN_THREADS", "zero")
    with pytest.raises(T.ConfigError):
        T.thread_cap()
    monkeypatch.delenv("DGQN_THREADS")
    assert T.thread_cap() is None


# ------------------------------------------------------------------ run config


def test_run_config_roundtrip():
    cfg = T.RunConfig(actors=2, seed=5, hyper=T.desk_hyper(batch_size=16), model_overrides={"embed_dim": 64})
    assert T.RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("doc", [
    {"actors": 0},
    {"model": "lstm"},
    {"learning_rate": 1e-3},
    {"hyper": {"batch_size": 0}},
    {"hyper": {"warmup": 3}},
    {"sim": {"delta_t_s": 2}},
])
def test_run_config_errors(doc):
    with pytest.raises(T.ConfigError):
        T.RunConfig.from_dict(doc)


def test_load_run_config_errors(tmp_path):
    with pytest.raises(T.ConfigError, match="cannot read"):
        T.load_run_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"actors\": ,\n}")
    with pytest.raises(T.ConfigError, match="line 2"):
        T.load_run_config(bad)


def test_full_scale_defaults():
    cfg = T.full_scale_config()
    assert cfg.network == "seoul15" and cfg.actors == 4
    assert cfg.hyper.exploration_decay == T.FULL_SCALE_EXPLORATION and cfg.hyper.learning_rate == 1e-4
