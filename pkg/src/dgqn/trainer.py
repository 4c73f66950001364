"""Asynchronous actor-learner training with per-actor replay, exploration and target refresh.

Each actor owns a simulator, an RNG family, a FIFO replay buffer and a local
step counter. Actors share one incumbent and one target parameter store.
Gradients are computed against a read snapshot of the incumbent and applied
under the store's lock, so readers always see whole tensors from one version.

Actors are generators that yield after every decision step. The default
executor round-robins them in one thread, which keeps runs bit-reproducible;
``executor="threads"`` spreads them over OS threads.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import threading
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from dgqn import sim
from dgqn.baselines import MODEL_KINDS, make_model
from dgqn.model import (
    Batch,
    ModelConfig,
    QNetwork,
    Transition,
    build_state,
    greedy_joint_action,
    loss_batch,
    q_values,
    save_model,
)
from dgqn.network import RoadNetwork, resolve_network
from dgqn.numerics import ParamStore, backward, optimizer_step

log = logging.getLogger(__name__)

FULL_SCALE_EXPLORATION = (2.3e6, 2.6e6, 2.9e6, 3.2e6)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ small pieces


def epsilon(counter: int, decay: float, eps_max: float = 1.0, eps_min: float = 0.0) -> float:
    """Exploration probability after ``counter`` local steps: Gaussian-shaped decay from eps_max."""
    if counter < 0 or decay <= 0:
        raise ValueError("counter must be >= 0 and decay > 0")
    return (eps_max - eps_min) * math.exp(-((counter / decay) ** 2)) + eps_min


def reward(delay_cur: float, delay_prev: float) -> int:
    """+1 when this interval's delay is strictly below the previous interval's, else -1."""
    return 1 if delay_cur < delay_prev else -1


class ReplayBuffer:
    """Bounded FIFO of transitions; batches are drawn uniformly without replacement."""

    def __init__(self, capacity: int = 30000, warm_start: int = 3000, owner: int = 0):
        if capacity <= 0 or not 0 <= warm_start <= capacity:
            raise ValueError("need capacity > 0 and 0 <= warm_start <= capacity")
        self.capacity = capacity
        self.warm_start = warm_start
        self.owner = owner
        self._items: deque = deque(maxlen=capacity)
        self.inserted = 0

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add(self, transition) -> None:
        self._items.append(transition)
        self.inserted += 1

    @property
    def ready(self) -> bool:
        return len(self._items) >= self.warm_start

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        if batch_size > len(self._items):
            raise ValueError(f"cannot draw {batch_size} from {len(self._items)} transitions")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


@dataclass
class ExplorationSchedule:
    decay: float
    eps_max: float = 1.0
    eps_min: float = 0.0
    counter: int = 0

    @property
    def value(self) -> float:
        return epsilon(self.counter, self.decay, self.eps_max, self.eps_min)


class SharedParams:
    """Incumbent and target stores plus the global update counter, guarded by one lock."""

    def __init__(self, incumbent: ParamStore):
        self.lock = threading.RLock()
        self.incumbent = incumbent
        incumbent.lock = self.lock
        self.target = incumbent.copy()
        self.target.opt_state = {}
        self.target.lock = self.lock
        self.updates = 0
        self.target_refreshes = 0

    def read(self) -> ParamStore:
        """Read snapshot of the incumbent with private gradient buffers."""
        return self.incumbent.view()

    def refresh_target(self) -> None:
        with self.lock:
            self.target.assign(self.incumbent)
            self.target_refreshes += 1


def async_apply_gradients(shared: SharedParams, grads: dict, learning_rate: float,
                          decay: float = 0.99, eps: float = 1e-8) -> int:
    """Apply one optimizer step to the shared incumbent; returns the new global update count."""
    for name, g in grads.items():
        if g.shape != shared.incumbent.params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name}")
    with shared.lock:
        optimizer_step(shared.incumbent, learning_rate, grads=grads, decay=decay, eps=eps)
        shared.updates += 1
        return shared.updates


def feasible_choices(model: QNetwork) -> list[np.ndarray]:
    return [np.flatnonzero(row) for row in model.feasible]


def select_action(state: np.ndarray, model: QNetwork, params, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Epsilon-greedy joint action: all-random with probability eps, otherwise the greedy one."""
    if rng.random() < eps:
        return np.array([rng.choice(opts) for opts in feasible_choices(model)], dtype=np.int64)
    action, _ = greedy_joint_action(q_values(model, state, params))
    return action.astype(np.int64)


def gradients(model: QNetwork, batch, params: ParamStore, target, gamma: float) -> tuple[dict, float]:
    """Loss gradients accumulated into ``params``' buffers (pass a read snapshot)."""
    loss, trace = loss_batch(model, batch, params, target, gamma)
    if any(store is not params for _, store, _ in trace.leaves):
        raise RuntimeError("loss trace reaches parameters outside the incumbent snapshot")
    params.zero_grad()
    backward(trace, loss)
    return dict(params.grads), float(loss.data)


# ------------------------------------------------------------------ configuration


@dataclass(frozen=True)
class Hyper:
    replay_capacity: int = 30000
    replay_warm_start: int = 3000
    batch_size: int = 32
    target_interval: int = 2500
    learning_rate: float = 1e-4
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    gamma: float = 0.95
    eps_max: float = 1.0
    eps_min: float = 0.0
    exploration_decay: tuple[float, ...] = FULL_SCALE_EXPLORATION
    eps_stop: float = 1e-3
    max_episodes: int = 2000

    def __post_init__(self):
        if self.batch_size <= 0 or self.batch_size > self.replay_capacity:
            raise ConfigError("batch_size must be in [1, replay_capacity]")
        if not 0 <= self.replay_warm_start <= self.replay_capacity:
            raise ConfigError("replay_warm_start must be in [0, replay_capacity]")
        if self.replay_warm_start and self.replay_warm_start < self.batch_size:
            raise ConfigError("replay_warm_start must be at least batch_size")
        if self.target_interval <= 0 or self.max_episodes <= 0:
            raise ConfigError("target_interval and max_episodes must be positive")
        if not self.exploration_decay or min(self.exploration_decay) <= 0:
            raise ConfigError("exploration_decay needs positive entries")
        if not 0 <= self.gamma <= 1 or self.learning_rate <= 0:
            raise ConfigError("gamma must be in [0, 1] and learning_rate > 0")

    def decay_for(self, actor_id: int) -> float:
        return self.exploration_decay[actor_id % len(self.exploration_decay)]


def desk_hyper(**overrides) -> Hyper:
    """Minutes-scale preset: exploration decays 1000x faster and the replay is proportionally smaller."""
    base = dict(
        exploration_decay=tuple(e / 1000.0 for e in FULL_SCALE_EXPLORATION),
        replay_capacity=10000,
        replay_warm_start=500,
        target_interval=500,
        learning_rate=5e-4,
        max_episodes=50,
    )
    base.update(overrides)
    return Hyper(**base)


@dataclass(frozen=True)
class RunConfig:
    network: str = "grid2x2"
    model: str = "dgqn"
    actors: int = 4
    seed: int = 0
    out_dir: str = "runs/dgqn"
    hyper: Hyper = field(default_factory=desk_hyper)
    sim: sim.SimConfig = field(default_factory=sim.SimConfig)
    model_overrides: dict = field(default_factory=dict)
    checkpoint_every: int = 1000
    executor: str = "interleaved"
    log_intervals: bool = True
    threads: Optional[int] = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.actors <= 0:
            raise ConfigError("actors must be positive")
        if self.executor not in ("interleaved", "threads"):
            raise ConfigError("executor must be 'interleaved' or 'threads'")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyper"]["exploration_decay"] = list(self.hyper.exploration_decay)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        try:
            if "hyper" in d:
                h = dict(d["hyper"])
                if "exploration_decay" in h:
                    h["exploration_decay"] = tuple(float(e) for e in h["exploration_decay"])
                d["hyper"] = desk_hyper(**h)
            if "sim" in d:
                d["sim"] = sim.SimConfig(**d["sim"])
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**d)


def full_scale_config(**overrides) -> RunConfig:
    base = dict(network="seoul15", actors=4, hyper=Hyper(), checkpoint_every=10000)
    base.update(overrides)
    return RunConfig(**base)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read run config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(doc)


# ------------------------------------------------------------------ actor-learner


@dataclass
class EpisodeStats:
    actor_id: int
    episode: int
    mean_reward: float
    total_delay_h: float
    max_queue_m: float
    termination_cause: str
    decisions: int
    epsilon: float
    updates: int


@dataclass
class IntervalRecord:
    actor_id: int
    episode: int
    step: int
    clock_s: int
    elapsed_s: int
    delay_prev_s: float
    delay_cur_s: float
    reward: int
    epsilon: float


@dataclass
class ActorLog:
    """What one actor reports besides episode stats (kept in memory; written by :func:`train`)."""

    intervals: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)  # local counter at each target copy
    updates: list = field(default_factory=list)  # (local counter, buffer size) per gradient step
    target_grad_abs: float = 0.0
    aborted: int = 0


def actor_streams(seed: int, actor_id: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (simulator, policy, replay) generators for one actor."""
    ss = np.random.SeedSequence([int(seed), int(actor_id)])
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


def actor_loop(actor_id: int, network: RoadNetwork, sim_config: sim.SimConfig, shared: SharedParams,
               hyper: Hyper, model: QNetwork, seed: int = 0, actor_log: Optional[ActorLog] = None,
               log_intervals: bool = True) -> Iterator[Optional[EpisodeStats]]:
    """Run episodes until exploration has decayed or the episode budget is spent.

    Yields ``None`` after every decision step and an :class:`EpisodeStats` at
    the end of each episode.
    """
    sim_rng, policy_rng, replay_rng = actor_streams(seed, actor_id)
    buffer = ReplayBuffer(hyper.replay_capacity, hyper.replay_warm_start, owner=actor_id)
    schedule = ExplorationSchedule(hyper.decay_for(actor_id), hyper.eps_max, hyper.eps_min)
    alog = actor_log if actor_log is not None else ActorLog()
    cfg = model.config

    for episode in range(hyper.max_episodes):
        if schedule.value < hyper.eps_stop:
            return
        state = sim.reset(network, sim_config, rng=sim_rng)
        history = [state.last_observation]
        S = build_state(history, cfg)
        prev_delay = state.last_observation.total_delay_s
        rewards, delays, max_queue = [], [], 0.0
        cause = None
        step = 0
        while True:
            eps = schedule.value
            action = select_action(S, model, shared.read().params, eps, policy_rng)
            clock0 = state.clock_s
            obs = sim.apply_joint_action(state, action)
            history = (history + [obs])[-cfg.n_lags:]
            S_next = build_state(history, cfg)
            r = reward(obs.total_delay_s, prev_delay)
            if log_intervals:
                alog.intervals.append(IntervalRecord(actor_id, episode, step, obs.clock_s, obs.clock_s - clock0,
                                                     prev_delay, obs.total_delay_s, r, eps))
            prev_delay = obs.total_delay_s
            rewards.append(r)
            delays.append(obs.total_delay_h)
            max_queue = max(max_queue, obs.max_queue_m)
            buffer.add(Transition(S, action, S_next, float(r)))

            if buffer.ready and len(buffer) >= hyper.batch_size:
                batch = Batch.stack(buffer.sample(hyper.batch_size, replay_rng))
                snapshot = shared.read()
                grads, _ = gradients(model, batch, snapshot, shared.target, hyper.gamma)
                alog.target_grad_abs += float(sum(np.abs(g).sum() for g in shared.target.grads.values()))
                try:
                    async_apply_gradients(shared, grads, hyper.learning_rate, hyper.rms_decay, hyper.rms_eps)
                except FloatingPointError as exc:
                    log.warning("actor %d episode %d: %s; starting a fresh episode", actor_id, episode, exc)
                    alog.aborted += 1
                    cause = "nan_gradient"
                else:
                    alog.updates.append((schedule.counter, len(buffer)))

            S = S_next
            schedule.counter += 1
            step += 1
            if schedule.counter % hyper.target_interval == 0:
                shared.refresh_target()
                alog.refreshes.append(schedule.counter)
            if cause is None:
                done, cause = sim.is_terminal(state)
            else:
                done = True
            yield None
            if done:
                break

        yield EpisodeStats(actor_id, episode, float(np.mean(rewards)), float(np.sum(delays)), max_queue,
                           cause, step, schedule.value, shared.updates)


# ------------------------------------------------------------------ executors


def _drive_interleaved(gens: list, on_item: Callable) -> None:
    live = list(gens)
    while live:
        nxt = []
        for g in live:
            try:
                item = next(g)
            except StopIteration:
                continue
            if item is not None:
                on_item(item)
            nxt.append(g)
        live = nxt


def run_actors(gens: list, on_item: Callable, executor: str = "interleaved", threads: Optional[int] = None) -> None:
    if executor == "interleaved" or len(gens) == 1:
        _drive_interleaved(gens, on_item)
        return
    n = len(gens) if threads is None else max(1, min(threads, len(gens)))
    lock = threading.Lock()
    errors = []

    def safe(item):
        with lock:
            on_item(item)

    def work(group):
        try:
            _drive_interleaved(group, safe)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    workers = [threading.Thread(target=work, args=(gens[k::n],), daemon=True) for k in range(n)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    if errors:
        raise errors[0]


def thread_cap() -> Optional[int]:
    raw = os.environ.get("DGQN_THREADS")
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"DGQN_THREADS must be an integer, got {raw!r}") from exc
    if value <= 0:
        raise ConfigError("DGQN_THREADS must be positive")
    return value


# ------------------------------------------------------------------ training entry points

METRIC_FIELDS = ["actor_id", "episode", "mean_reward", "moving_avg_10", "total_delay_h", "max_queue_m",
                 "termination_cause", "decisions", "epsilon", "updates"]


@dataclass
class TrainResult:
    model: QNetwork
    shared: SharedParams
    episodes: list
    logs: dict
    out_dir: Optional[Path]
    checkpoints: list = field(default_factory=list)


def _metric_rows(episodes: Sequence[EpisodeStats]) -> list[dict]:
    rows = []
    window: dict[int, deque] = {}
    for e in episodes:
        w = window.setdefault(e.actor_id, deque(maxlen=10))
        w.append(e.mean_reward)
        row = asdict(e)
        row["moving_avg_10"] = float(np.mean(w))
        rows.append({k: row[k] for k in METRIC_FIELDS})
    return rows


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header))
        w.writeheader()
        w.writerows(rows)


def _checkpoint(path: Path, model: QNetwork, shared: SharedParams, config: RunConfig) -> None:
    with shared.lock:
        save_model(path, model, shared.incumbent, target=shared.target,
                   extra={"run": config.to_dict(), "updates": shared.updates})


def prepare(config: RunConfig, network: Optional[RoadNetwork] = None) -> tuple[RoadNetwork, QNetwork, SharedParams]:
    """Validate everything that can fail before any output is written."""
    net = network if network is not None else resolve_network(config.network)
    model_cfg = ModelConfig(kind=config.model, n_lane_groups=net.N, n_intersections=net.I,
                            n_phases=net.max_phases, gamma=config.hyper.gamma, **config.model_overrides)
    model = make_model(config.model, net, model_cfg)
    store = model.init_params(seed=config.seed)
    return net, model, SharedParams(store)


def train(config: RunConfig, network: Optional[RoadNetwork] = None, write: bool = True,
          progress: Optional[Callable[[EpisodeStats], None]] = None) -> TrainResult:
    """Train ``config.actors`` actor-learners against shared parameters and write the run outputs."""
    net, model, shared = prepare(config, network)
    out = Path(config.out_dir) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(config.to_dict(), indent=2))
    logs = {k: ActorLog() for k in range(config.actors)}
    gens = [actor_loop(k, net, config.sim, shared, config.hyper, model, config.seed, logs[k], config.log_intervals)
            for k in range(config.actors)]
    episodes: list[EpisodeStats] = []
    checkpoints: list[Path] = []
    next_ckpt = [config.checkpoint_every or 0]

    def on_item(stats: EpisodeStats):
        episodes.append(stats)
        if progress is not None:
            progress(stats)
        if out is not None and config.checkpoint_every:
            while shared.updates >= next_ckpt[0]:
                path = out / f"checkpoint_{next_ckpt[0]:08d}.ckpt"
                _checkpoint(path, model, shared, config)
                checkpoints.append(path)
                next_ckpt[0] += config.checkpoint_every

    threads = config.threads if config.threads is not None else thread_cap()
    run_actors(gens, on_item, config.executor, threads)

    if out is not None:
        _checkpoint(out / "final.ckpt", model, shared, config)
        rows = _metric_rows(episodes)
        _write_csv(out / "metrics.csv", METRIC_FIELDS, rows)
        for k in range(config.actors):
            _write_csv(out / f"metrics_actor{k}.csv", METRIC_FIELDS, [r for r in rows if r["actor_id"] == k])
        if config.log_intervals:
            interval_fields = [f.name for f in fields(IntervalRecord)]
            _write_csv(out / "intervals.csv", interval_fields,
                       [asdict(r) for k in range(config.actors) for r in logs[k].intervals])
        _write_csv(out / "target_refresh.csv", ["actor_id", "local_step", "event"],
                   [{"actor_id": k, "local_step": c, "event": "target_refresh"}
                    for k in range(config.actors) for c in logs[k].refreshes])
    return TrainResult(model, shared, episodes, logs, out, checkpoints)


def train_synchronous(config: RunConfig, network: Optional[RoadNetwork] = None,
                      max_updates: Optional[int] = None) -> tuple[QNetwork, ParamStore, ParamStore, int]:
    """Plain single-learner loop with no shared stores or generators.

    Reference for the one-actor asynchronous path; it draws random numbers in
    the same order as actor 0. Returns (model, incumbent, target, updates).
    """
    net, model, shared = prepare(config, network)
    theta = shared.incumbent.copy()
    theta_target = theta.copy()
    hyper, cfg = config.hyper, model.config
    sim_rng, policy_rng, replay_rng = actor_streams(config.seed, 0)
    memory: deque = deque(maxlen=hyper.replay_capacity)
    decay = hyper.decay_for(0)
    counter = 0
    updates = 0
    choices = feasible_choices(model)
    for _ in range(hyper.max_episodes):
        if epsilon(counter, decay, hyper.eps_max, hyper.eps_min) < hyper.eps_stop:
            break
        state = sim.reset(net, config.sim, rng=sim_rng)
        history = [state.last_observation]
        S = build_state(history, cfg)
        prev = state.last_observation.total_delay_s
        while True:
            eps = epsilon(counter, decay, hyper.eps_max, hyper.eps_min)
            if policy_rng.random() < eps:
                action = np.array([policy_rng.choice(c) for c in choices], dtype=np.int64)
            else:
                action = np.argmax(q_values(model, S, theta.params), axis=-1).astype(np.int64)
            obs = sim.apply_joint_action(state, action)
            history = (history + [obs])[-cfg.n_lags:]
            S_next = build_state(history, cfg)
            r = 1.0 if obs.total_delay_s < prev else -1.0
            prev = obs.total_delay_s
            memory.append(Transition(S, action, S_next, r))
            failed = False
            if len(memory) >= max(hyper.replay_warm_start, hyper.batch_size):
                idx = replay_rng.choice(len(memory), size=hyper.batch_size, replace=False)
                loss, trace = loss_batch(model, [memory[i] for i in idx], theta, theta_target, hyper.gamma)
                theta.zero_grad()
                backward(trace, loss)
                try:
                    optimizer_step(theta, hyper.learning_rate, decay=hyper.rms_decay, eps=hyper.rms_eps)
                    updates += 1
                except FloatingPointError:
                    theta.zero_grad()
                    failed = True
                if max_updates is not None and updates >= max_updates:
                    return model, theta, theta_target, updates
            S = S_next
            counter += 1
            if counter % hyper.target_interval == 0:
                theta_target = theta.copy()
                theta_target.opt_state = {}
            if failed or sim.is_terminal(state)[0]:
                break
    return model, theta, theta_target, updates


def train_until_updates(config: RunConfig, n_updates: int, network: Optional[RoadNetwork] = None) -> SharedParams:
    """Run the asynchronous path, stopping as soon as the shared store has taken ``n_updates`` steps."""
    net, model, shared = prepare(config, network)
    gens = [actor_loop(k, net, config.sim, shared, config.hyper, model, config.seed, ActorLog(), False)
            for k in range(config.actors)]
    live = list(gens)
    turn = 0
    while live and shared.updates < n_updates:
        g = live[turn % len(live)]
        try:
            next(g)
            turn += 1
        except StopIteration:
            live.remove(g)
    return shared
