"""Store-and-forward mesoscopic traffic simulator with 1-second ticks.

Each lane group is a point queue. Vehicles arrive at entry lane groups as a
Poisson stream, discharge at saturation flow while green (fractional capacity
carries over between green seconds), and are routed downstream by a
multinomial draw over the current turning rates. Every vehicle still queued at
the end of a tick accrues one second of stopped delay.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from dgqn.network import DEFAULT_SAT_FLOW_VPS, RoadNetwork

CAUSE_ENTRY_FULL = "entry_full"
CAUSE_DELAY = "delay_threshold"
CAUSE_HORIZON = "horizon"


@dataclass(frozen=True)
class SimConfig:
    tick_s: int = 1
    t_initial_s: int = 400
    t_max_s: int = 4000
    delta_t_s: int = 20
    amber_s: int = 3
    entry_capacity_veh: int = 40
    vehicle_spacing_m: float = 7.5
    demand_scale_range: float = 0.30
    turning_perturb_range: float = 0.30
    turning_perturb_period_s: int = 400
    delay_threshold_s: float = 16000.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.tick_s != 1:
            raise ValueError("only 1-second ticks are supported")
        if not self.delta_t_s > self.amber_s >= 0:
            raise ValueError("delta_t_s must exceed amber_s")
        if not 0 <= self.t_initial_s < self.t_max_s:
            raise ValueError("t_initial_s must be below t_max_s")
        if self.t_initial_s % self.delta_t_s:
            raise ValueError("t_initial_s must be a multiple of delta_t_s")
        for name in ("demand_scale_range", "turning_perturb_range"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.turning_perturb_period_s <= 0 or self.entry_capacity_veh <= 0:
            raise ValueError("perturbation period and entry capacity must be positive")

    @property
    def green_s(self) -> int:
        return self.delta_t_s - self.amber_s

    @property
    def decisions_per_episode(self) -> int:
        return (self.t_max_s - self.t_initial_s) // self.delta_t_s


@dataclass(frozen=True)
class Observation:
    """Measurements over one decision interval."""

    delay_s: np.ndarray  # per lane group veh·s accrued during the interval
    queue_veh: np.ndarray  # per lane group, at the end of the interval
    queue_len_m: np.ndarray
    clock_s: int

    @property
    def total_delay_s(self) -> float:
        return float(self.delay_s.sum())

    @property
    def total_delay_h(self) -> float:
        return self.total_delay_s / 3600.0

    @property
    def max_queue_m(self) -> float:
        return float(self.queue_len_m.max()) if self.queue_len_m.size else 0.0


class _Routing:
    """Array views of a network used on every tick."""

    def __init__(self, net: RoadNetwork):
        self.net = net
        n = net.N
        self.sat = np.array([lg.saturation_flow for lg in net.lane_groups])
        self.entries = np.array(net.entries, dtype=np.int64)
        self.entry_rate = np.array([net.lane_groups[i].entry_volume_vph / 3600.0 for i in self.entries])
        # storage at an entry scales with its lane count (saturation flow in units of one default lane)
        self.entry_lanes = np.maximum(1, np.ceil(self.sat[self.entries] / DEFAULT_SAT_FLOW_VPS - 1e-9)).astype(np.int64)
        self.targets = []
        self.base_rates = []
        for lg in net.lane_groups:
            self.targets.append(np.array([-1 if to is None else to for to, _ in lg.downstream], dtype=np.int64))
            self.base_rates.append(np.array([r for _, r in lg.downstream]))
        self.is_sink = np.array([lg.is_sink for lg in net.lane_groups])
        self.phase_masks = []
        for x in net.intersections:
            rows = np.zeros((x.n_phases, n), dtype=bool)
            for k, p in enumerate(x.phases):
                rows[k, list(p.green_lane_groups)] = True
            self.phase_masks.append(rows)

    def green_mask(self, action: Sequence[int]) -> np.ndarray:
        mask = np.zeros(self.net.N, dtype=bool)
        for rows, a in zip(self.phase_masks, action):
            mask |= rows[a]
        return mask


_ROUTING_CACHE: dict[int, _Routing] = {}


def _routing(net: RoadNetwork) -> _Routing:
    r = _ROUTING_CACHE.get(id(net))
    if r is None or r.net is not net:
        r = _ROUTING_CACHE[id(net)] = _Routing(net)
    return r


def fixed_plan_schedule(net: RoadNetwork, delta_t_s: int = 20):
    """Per intersection: (durations, cycle). Intersections without a plan cycle their phases in ``delta_t_s`` steps."""
    out = []
    for x in net.intersections:
        if x.fixed_plan is not None:
            out.append((x.fixed_plan.durations, x.fixed_plan.cycle_s))
        else:
            out.append(((delta_t_s,) * x.n_phases, delta_t_s * x.n_phases))
    return out


def _fixed_green_tables(net: RoadNetwork, amber_s: int, delta_t_s: int) -> list[np.ndarray]:
    """Per intersection a (cycle, N) table of green lane groups for each second of its cycle.

    In the last ``amber_s`` seconds of a phase, lane groups that are not green
    in the following phase are held red.
    """
    routing = _routing(net)
    tables = []
    for x, (durations, cycle), masks in zip(net.intersections, fixed_plan_schedule(net, delta_t_s),
                                             routing.phase_masks):
        table = np.zeros((cycle, net.N), dtype=bool)
        start = 0
        for k, d in enumerate(durations):
            nxt = masks[(k + 1) % len(durations)]
            table[start:start + d] = masks[k]
            if len(durations) > 1:
                hold = min(amber_s, d)
                table[start + d - hold:start + d] &= nxt
            start += d
        tables.append(table)
    return tables


@dataclass
class SimState:
    network: RoadNetwork = field(repr=False)
    config: SimConfig
    rng: np.random.Generator = field(repr=False)
    clock_s: int
    queue_veh: np.ndarray
    interval_delay_s: np.ndarray
    cum_delay_s: int
    entry_backlog_veh: np.ndarray  # aligned with network.entries
    current_greens: np.ndarray  # boolean mask over lane groups
    episode_entry_scale: np.ndarray  # aligned with network.entries
    current_turning: list[np.ndarray]
    discharge_credit: np.ndarray
    total_arrived: int = 0
    total_entered: int = 0
    total_exited: int = 0
    last_interval_delay_s: float = 0.0
    warming_up: bool = False
    last_observation: Optional[Observation] = None
    event_log: Optional[list] = field(default=None, repr=False)
    _fixed_tables: Optional[list] = field(default=None, repr=False)

    @property
    def in_network(self) -> int:
        return int(self.queue_veh.sum())

    @property
    def greens(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.current_greens).tolist())

    def snapshot(self) -> dict:
        """Plain-data view for equality checks."""
        return {
            "clock_s": self.clock_s,
            "queue_veh": self.queue_veh.copy(),
            "interval_delay_s": self.interval_delay_s.copy(),
            "cum_delay_s": self.cum_delay_s,
            "entry_backlog_veh": self.entry_backlog_veh.copy(),
            "current_greens": self.current_greens.copy(),
            "episode_entry_scale": self.episode_entry_scale.copy(),
            "current_turning": [t.copy() for t in self.current_turning],
            "discharge_credit": self.discharge_credit.copy(),
            "totals": (self.total_arrived, self.total_entered, self.total_exited),
            "rng": self.rng.bit_generator.state,
        }


def actor_rng(seed: int, actor_id: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(actor_id)]))


def new_state(network: RoadNetwork, config: SimConfig, rng: np.random.Generator) -> SimState:
    routing = _routing(network)
    n = network.N
    return SimState(
        network=network,
        config=config,
        rng=rng,
        clock_s=0,
        queue_veh=np.zeros(n, dtype=np.int64),
        interval_delay_s=np.zeros(n, dtype=np.int64),
        cum_delay_s=0,
        entry_backlog_veh=np.zeros(len(routing.entries), dtype=np.int64),
        current_greens=np.zeros(n, dtype=bool),
        episode_entry_scale=np.ones(len(routing.entries)),
        current_turning=[r.copy() for r in routing.base_rates],
        discharge_credit=np.zeros(n),
    )


def reset(network: RoadNetwork, config: SimConfig = SimConfig(), seed=None,
          rng: Optional[np.random.Generator] = None) -> SimState:
    """Start an episode: draw demand scales, then warm up under the fixed plans at average demand.

    Pass ``rng`` to continue an existing stream (one per actor); otherwise a
    generator is seeded from ``seed`` (default ``config.rng_seed``).
    """
    if rng is None:
        rng = actor_rng(config.rng_seed if seed is None else seed)
    state = new_state(network, config, rng)
    lo, hi = 1.0 - config.demand_scale_range, 1.0 + config.demand_scale_range
    scale = rng.uniform(lo, hi, size=len(state.episode_entry_scale))
    state.warming_up = True
    for _ in range(config.t_initial_s // config.delta_t_s):
        run_fixed_interval(state)
    state.warming_up = False
    state.episode_entry_scale = scale
    if state.last_observation is None:
        state.last_observation = measure(state)
    return state


def step_second(state: SimState, greens) -> None:
    """Advance one tick with ``greens`` (set of lane-group ids or boolean mask) showing green."""
    routing = _routing(state.network)
    cfg = state.config
    rng = state.rng
    if isinstance(greens, np.ndarray) and greens.dtype == bool:
        green = greens
    else:
        green = np.zeros(state.network.N, dtype=bool)
        green[list(greens)] = True
    queue = state.queue_veh

    # arrivals into the backlog, admitted while the entry link has room
    if len(routing.entries):
        arrivals = rng.poisson(routing.entry_rate * state.episode_entry_scale)
        state.entry_backlog_veh += arrivals
        state.total_arrived += int(arrivals.sum())
        room = np.maximum(cfg.entry_capacity_veh * routing.entry_lanes - queue[routing.entries], 0)
        admit = np.minimum(state.entry_backlog_veh, room)
        queue[routing.entries] += admit
        state.entry_backlog_veh -= admit
        state.total_entered += int(admit.sum())

    # discharge on green; unused capacity does not carry across red
    credit = state.discharge_credit
    credit[~green] = 0.0
    credit[green] += routing.sat[green]
    whole = np.floor(credit)
    credit -= whole
    released = np.minimum(queue, whole.astype(np.int64))
    released[~green] = 0
    if released.any():
        movers = np.flatnonzero(released)
        queue -= released
        for i in movers:
            n = int(released[i])
            if routing.is_sink[i]:
                state.total_exited += n
                continue
            split = rng.multinomial(n, state.current_turning[i])
            targets = routing.targets[i]
            for to, k in zip(targets, split):
                if k:
                    if to < 0:
                        state.total_exited += int(k)
                    else:
                        queue[to] += k

    state.interval_delay_s += queue
    state.cum_delay_s += int(queue.sum())
    state.clock_s += 1
    if state.event_log is not None:
        state.event_log.append((state.clock_s, queue.copy(), state.interval_delay_s.copy()))


def measure(state: SimState) -> Observation:
    """Close the current interval: emit its Observation and zero the interval accumulators."""
    cfg = state.config
    obs = Observation(
        delay_s=state.interval_delay_s.astype(np.float64),
        queue_veh=state.queue_veh.astype(np.float64),
        queue_len_m=state.queue_veh * cfg.vehicle_spacing_m,
        clock_s=state.clock_s,
    )
    state.last_interval_delay_s = obs.total_delay_s
    state.interval_delay_s = np.zeros_like(state.interval_delay_s)
    state.last_observation = obs
    return obs


def _maybe_perturb(state: SimState) -> None:
    cfg = state.config
    if state.warming_up:
        return
    since = state.clock_s - cfg.t_initial_s
    if since >= 0 and since % cfg.turning_perturb_period_s == 0:
        perturb_turning(state, state.rng)


def apply_joint_action(state: SimState, action: Sequence[int]) -> Observation:
    """Run one decision interval: green ticks with the chosen phases, then amber ticks.

    During amber, lane groups whose signal differs from the previous interval
    are held red; all others keep their indication.
    """
    net = state.network
    if len(action) != net.I:
        raise ValueError(f"joint action needs {net.I} phases, got {len(action)}")
    for x, a in zip(net.intersections, action):
        if not 0 <= int(a) < x.n_phases:
            raise ValueError(f"phase {a} is not feasible at intersection {x.id} ({x.n_phases} phases)")
    _maybe_perturb(state)
    cfg = state.config
    new = _routing(net).green_mask([int(a) for a in action])
    held = new & state.current_greens
    for _ in range(cfg.green_s):
        step_second(state, new)
    for _ in range(cfg.amber_s):
        step_second(state, held)
    state.current_greens = new
    return measure(state)


def run_fixed_interval(state: SimState) -> Observation:
    """Run one decision interval with every intersection following its fixed plan second by second."""
    _maybe_perturb(state)
    cfg = state.config
    if state._fixed_tables is None:
        state._fixed_tables = _fixed_green_tables(state.network, cfg.amber_s, cfg.delta_t_s)
    tables = state._fixed_tables
    green = np.zeros(state.network.N, dtype=bool)
    for _ in range(cfg.delta_t_s):
        green = np.zeros(state.network.N, dtype=bool)
        for table in tables:
            green |= table[state.clock_s % len(table)]
        step_second(state, green)
    # the plan's indication for the current second, so a following RL action sees the true change set
    state.current_greens = np.zeros(state.network.N, dtype=bool)
    for x, (durations, cycle) in zip(state.network.intersections, fixed_plan_schedule(state.network, cfg.delta_t_s)):
        t = state.clock_s % cycle
        start = 0
        for k, d in enumerate(durations):
            if t < start + d:
                state.current_greens |= _routing(state.network).phase_masks[x.id][k]
                break
            start += d
    return measure(state)


def perturb_turning(state: SimState, rng: np.random.Generator) -> None:
    """Multiply every base turning rate by Uniform[1-r, 1+r] and renormalise each row."""
    r = state.config.turning_perturb_range
    new = []
    for base in _routing(state.network).base_rates:
        if base.size == 0:
            new.append(base.copy())
            continue
        factors = rng.uniform(1.0 - r, 1.0 + r, size=base.size)
        new.append(perturbed_rates(base, factors))
    state.current_turning = new


def perturbed_rates(base: np.ndarray, factors: np.ndarray) -> np.ndarray:
    w = np.asarray(base, dtype=np.float64) * np.asarray(factors, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return np.asarray(base, dtype=np.float64).copy()
    out = w / total
    # absorb rounding in the largest entry so the row sums to 1 within 1e-12
    out[np.argmax(out)] += 1.0 - out.sum()
    return out


def entry_full(state: SimState) -> bool:
    routing = _routing(state.network)
    if not len(routing.entries):
        return False
    cap = state.config.entry_capacity_veh * routing.entry_lanes
    full = (state.entry_backlog_veh >= cap) & (state.queue_veh[routing.entries] >= cap)
    return bool(full.any())


def is_terminal(state: SimState) -> tuple[bool, Optional[str]]:
    if entry_full(state):
        return True, CAUSE_ENTRY_FULL
    if state.last_interval_delay_s > state.config.delay_threshold_s:
        return True, CAUSE_DELAY
    if state.clock_s >= state.config.t_max_s:
        return True, CAUSE_HORIZON
    return False, None


def write_event_log(state: SimState, path) -> None:
    """CSV rows (clock_s, lane_group, queue_veh, interval_delay_s) from a state with ``event_log`` enabled."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clock_s", "lane_group", "queue_veh", "interval_delay_s"])
        for clock, queue, delay in state.event_log or []:
            for i, (q, d) in enumerate(zip(queue, delay)):
                w.writerow([clock, i, int(q), int(d)])


def with_overrides(config: SimConfig, **kwargs) -> SimConfig:
    return replace(config, **kwargs)
