"""Reference controllers: the fixed-time plans, a constant-adjacency graph DQN and a fully connected DQN.

Both learned baselines reuse the factorized head, the loss and the trainer of
:mod:`dgqn.model`; only the embedding differs. Their widths are solved so the
total parameter count lands within 2% of the deep graph Q-network built from
the same base config.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from dgqn import numerics as nx
from dgqn.model import DGQN, ModelConfig, QNetwork, _he, _Params
from dgqn.network import RoadNetwork
from dgqn.numerics import ParamStore, Tensor

MATCH_TOLERANCE = 0.02
MODEL_KINDS = ("dgqn", "dqn_ogcn", "dqn_fc")
CONTROLLER_KINDS = MODEL_KINDS + ("fixed",)


# ------------------------------------------------------------------ fixed-time plans


@dataclass(frozen=True)
class FixedPlanController:
    """Per-intersection cyclic plans, each running on its own clock from t = 0."""

    durations: tuple[tuple[int, ...], ...]
    cycles: tuple[int, ...]

    @classmethod
    def from_network(cls, network: RoadNetwork) -> "FixedPlanController":
        durations, cycles = [], []
        for x in network.intersections:
            if x.fixed_plan is None:
                raise ValueError(f"intersection {x.id} has no fixed plan")
            durations.append(tuple(int(d) for d in x.fixed_plan.durations))
            cycles.append(int(x.fixed_plan.cycle_s))
        return cls(tuple(durations), tuple(cycles))

    def phase_at(self, i: int, clock_s: float) -> int:
        t = clock_s % self.cycles[i]
        start = 0
        for k, d in enumerate(self.durations[i]):
            start += d
            if t < start:
                return k
        return len(self.durations[i]) - 1

    def green_seconds(self, i: int, start_s: int = 0) -> np.ndarray:
        """Seconds each phase is active over one full cycle beginning at ``start_s``."""
        out = np.zeros(len(self.durations[i]), dtype=np.int64)
        for t in range(start_s, start_s + self.cycles[i]):
            out[self.phase_at(i, t)] += 1
        return out


def fixed_action(controller: FixedPlanController, sim_clock_s: float) -> np.ndarray:
    return np.array([controller.phase_at(i, sim_clock_s) for i in range(len(controller.cycles))], dtype=np.int64)


# ------------------------------------------------------------------ constant graph convolution


def spectral_normalize(A) -> np.ndarray:
    """D^{-1/2} (I + A) D^{-1/2} with D the row sums of I + A."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.array_equal(A, A.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(A) != 0):
        raise ValueError("adjacency must have a zero diagonal")
    a_hat = np.eye(len(A)) + A
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    out = a_hat * d[:, None] * d[None, :]
    return 0.5 * (out + out.T)


class DQNOGCN(DGQN):
    """Same stack as the deep graph Q-network with every adjacency fixed to the normalized mask."""

    kind = "dqn_ogcn"

    def __init__(self, config: ModelConfig, mask, feasible):
        super().__init__(config, mask, feasible)
        self.constant_adjacency = spectral_normalize(self.mask - np.diag(np.diag(self.mask)))

    def _init_embedding(self, store: ParamStore, rng) -> None:
        c = self.config
        kh, kw = c.conv_kernel
        store.add("conv_kernel", _he(rng, (kh, kw, 1, c.conv_channels), kh * kw))
        store.add("conv_bias", np.zeros(c.conv_channels))
        flat = c.n_lags * c.n_lane_groups * c.n_features * c.conv_channels
        store.add("dense_w", _he(rng, (flat, c.embed_dim), flat))
        store.add("dense_b", np.zeros(c.embed_dim))

    def groups(self) -> dict[str, list[str]]:
        return {"adjacency": [], "conv": ["conv_kernel", "conv_bias"], "dense": ["dense_w", "dense_b"]}

    def adjacency_tensor(self, params: _Params, k: int, l: int) -> Tensor:
        if (k, l) not in self.adjacency_keys():
            raise KeyError(f"no adjacency for convolution {k} of lag {l}")
        return Tensor(self.constant_adjacency)


class DQNFC(QNetwork):
    """Flattened state through two dense relu layers."""

    kind = "dqn_fc"

    def _init_embedding(self, store: ParamStore, rng) -> None:
        c = self.config
        n_in = c.n_lane_groups * c.n_features * c.n_lags
        store.add("fc1_w", _he(rng, (n_in, c.hidden_dim), n_in))
        store.add("fc1_b", np.zeros(c.hidden_dim))
        store.add("fc2_w", _he(rng, (c.hidden_dim, c.embed_dim), c.hidden_dim))
        store.add("fc2_b", np.zeros(c.embed_dim))

    def groups(self) -> dict[str, list[str]]:
        return {"adjacency": [], "dense": ["fc1_w", "fc1_b", "fc2_w", "fc2_b"]}

    def embed_tensor(self, states: np.ndarray, params: _Params) -> Tensor:
        x = Tensor(states.reshape(states.shape[0], -1))
        h = nx.relu(nx.add(nx.matmul(x, params["fc1_w"]), params["fc1_b"]))
        return nx.relu(nx.add(nx.matmul(h, params["fc2_w"]), params["fc2_b"]))


# ------------------------------------------------------------------ parameter matching


def dgqn_parameter_count(c: ModelConfig) -> int:
    n = c.n_lane_groups
    kh, kw = c.conv_kernel
    n_adj = c.n_lags * (c.n_lags + 1) // 2
    flat = c.n_lags * n * c.n_features * c.conv_channels
    return (n_adj * n * n + kh * kw * c.conv_channels + c.conv_channels
            + flat * c.embed_dim + c.embed_dim + c.n_intersections * c.embed_dim * c.n_phases)


def ogcn_parameter_count(c: ModelConfig, width: int) -> int:
    kh, kw = c.conv_kernel
    flat = c.n_lags * c.n_lane_groups * c.n_features * c.conv_channels
    return kh * kw * c.conv_channels + c.conv_channels + flat * width + width + c.n_intersections * width * c.n_phases


def fc_parameter_count(c: ModelConfig, hidden: int) -> int:
    n_in = c.n_lane_groups * c.n_features * c.n_lags
    return n_in * hidden + hidden + hidden * c.embed_dim + c.embed_dim + c.n_intersections * c.embed_dim * c.n_phases


def _best_width(count, target: int) -> int:
    # counts are affine in the width, so solve and check the neighbours
    slope = count(2) - count(1)
    guess = max(1, int(round((target - count(0)) / slope)))
    return min((w for w in (guess - 1, guess, guess + 1) if w >= 1), key=lambda w: abs(count(w) - target))


def _check_match(count: int, target: int, kind: str) -> None:
    if abs(count - target) > MATCH_TOLERANCE * target:
        raise ValueError(f"{kind} has {count} parameters, more than 2% away from the reference {target}")


def build_dqn_ogcn(network: RoadNetwork, config: ModelConfig) -> DQNOGCN:
    base = replace(config, kind="dgqn", n_lane_groups=network.N, n_intersections=network.I)
    target = dgqn_parameter_count(base)
    width = _best_width(lambda w: ogcn_parameter_count(base, w), target)
    _check_match(ogcn_parameter_count(base, width), target, "dqn_ogcn")
    c = replace(base, kind="dqn_ogcn", embed_dim=width)
    return DQNOGCN(c, network.mask, network.feasibility(c.n_phases))


def build_dqn_fc(network: RoadNetwork, config: ModelConfig) -> DQNFC:
    base = replace(config, kind="dgqn", n_lane_groups=network.N, n_intersections=network.I)
    target = dgqn_parameter_count(base)
    hidden = _best_width(lambda h: fc_parameter_count(base, h), target)
    _check_match(fc_parameter_count(base, hidden), target, "dqn_fc")
    c = replace(base, kind="dqn_fc", hidden_dim=hidden)
    return DQNFC(c, network.mask, network.feasibility(c.n_phases))


def make_model(kind: str, network: RoadNetwork, config: ModelConfig | None = None) -> QNetwork:
    """Build any learned controller for ``network``; baselines are width-matched to the graph model."""
    if config is None:
        config = ModelConfig(kind=kind, n_lane_groups=network.N, n_intersections=network.I,
                             n_phases=network.max_phases)
    if kind == "dgqn":
        c = replace(config, kind="dgqn", n_lane_groups=network.N, n_intersections=network.I)
        return DGQN(c, network.mask, network.feasibility(c.n_phases))
    if kind == "dqn_ogcn":
        return build_dqn_ogcn(network, config)
    if kind == "dqn_fc":
        return build_dqn_fc(network, config)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def model_class(kind: str) -> type:
    try:
        return {"dgqn": DGQN, "dqn_ogcn": DQNOGCN, "dqn_fc": DQNFC}[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}") from None


def model_from_config(config: ModelConfig, network: RoadNetwork) -> QNetwork:
    """Rebuild a model exactly as stored in a checkpoint header (no re-matching)."""
    if (config.n_lane_groups, config.n_intersections) != (network.N, network.I):
        raise ValueError(
            f"checkpoint expects {config.n_lane_groups} lane groups and {config.n_intersections} intersections,"
            f" network has {network.N} and {network.I}"
        )
    return model_class(config.kind)(config, network.mask, network.feasibility(config.n_phases))
