"""Greedy-policy evaluation with per-episode demand perturbation, shared across controllers."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dgqn import sim
from dgqn.model import QNetwork, build_state, greedy_joint_action, q_values
from dgqn.network import RoadNetwork

EVAL_STREAM = 1_000_003  # keeps evaluation draws disjoint from the training actors' streams


@dataclass
class EpisodeResult:
    episode: int
    seed: int
    total_delay_h: float
    max_queue_m: float
    termination_cause: str
    decisions: int
    terminal_at_s: int = -1  # clock when a terminal condition first held (-1 if only the horizon)


@dataclass
class EvalReport:
    model: str
    network: str
    seed: int
    episodes: list = field(default_factory=list)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def _col(self, name) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.episodes], dtype=np.float64)

    def aggregates(self) -> dict:
        out = {"episodes": self.n_episodes}
        for name in ("total_delay_h", "max_queue_m"):
            col = self._col(name)
            out[f"mean_{name}"] = float(col.mean()) if col.size else float("nan")
            out[f"std_{name}"] = float(col.std(ddof=1)) if col.size > 1 else 0.0
        causes: dict[str, int] = {}
        for e in self.episodes:
            causes[e.termination_cause] = causes.get(e.termination_cause, 0) + 1
        out["termination_causes"] = causes
        return out

    @property
    def mean_total_delay_h(self) -> float:
        return self.aggregates()["mean_total_delay_h"]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "network": self.network,
            "seed": self.seed,
            "seeds": [e.seed for e in self.episodes],
            "aggregates": self.aggregates(),
            "rows": [asdict(e) for e in self.episodes],
        }

    def write(self, out_dir, stem: str = "eval") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / f"{stem}.json", out / f"{stem}.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=2))
        with open(cpath, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=[f for f in EpisodeResult.__dataclass_fields__])
            w.writeheader()
            w.writerows(asdict(e) for e in self.episodes)
        return jpath, cpath


def episode_seed(seed: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), EVAL_STREAM, int(episode)])


def run_episode(network: RoadNetwork, sim_config: sim.SimConfig, rng: np.random.Generator,
                model: Optional[QNetwork] = None, params=None, record_events: bool = False,
                run_to_horizon: bool = True):
    """One episode under the fixed plans (``model`` None) or the greedy policy.

    With ``run_to_horizon`` the episode continues past a jammed entry or the
    delay threshold, so every controller is scored over the same period; the
    first terminal condition is still reported. Returns (state, total delay h,
    max queue m, cause, decisions, terminal clock s).
    """
    state = sim.reset(network, sim_config, rng=rng)
    if record_events:
        state.event_log = []
    history = [state.last_observation]
    total_h, max_q, decisions = 0.0, 0.0, 0
    first_cause, first_at = None, -1
    while True:
        if model is None:
            obs = sim.run_fixed_interval(state)
        else:
            S = build_state(history, model.config)
            action, _ = greedy_joint_action(q_values(model, S, params))
            obs = sim.apply_joint_action(state, action)
            history = (history + [obs])[-model.config.n_lags:]
        total_h += obs.total_delay_h
        max_q = max(max_q, obs.max_queue_m)
        decisions += 1
        done, cause = sim.is_terminal(state)
        if done and first_cause is None and cause != sim.CAUSE_HORIZON:
            first_cause, first_at = cause, state.clock_s
        if done and (not run_to_horizon or cause == sim.CAUSE_HORIZON or state.clock_s >= sim_config.t_max_s):
            return state, total_h, max_q, first_cause or cause, decisions, first_at


def evaluate(network: RoadNetwork, episodes: int, seed: int = 0, model: Optional[QNetwork] = None,
             params=None, sim_config: sim.SimConfig = sim.SimConfig(), name: Optional[str] = None,
             run_to_horizon: bool = True) -> EvalReport:
    """Every controller sees the same demand draws for the same ``seed``."""
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    report = EvalReport(name or (model.kind if model is not None else "fixed"), network.name, seed)
    for k in range(episodes):
        rng = np.random.default_rng(episode_seed(seed, k))
        _, total_h, max_q, cause, n, at = run_episode(network, sim_config, rng, model, params,
                                                      run_to_horizon=run_to_horizon)
        report.episodes.append(EpisodeResult(k, seed, total_h, max_q, cause, n, at))
    return report


def compare(reports: Sequence[EvalReport]) -> dict:
    return {r.model: r.mean_total_delay_h for r in reports}
