"""Deep graph Q-network with learnable masked adjacency and a factorized joint-action head.

The embedding stacks graph convolutions per time lag (older lags pass through
more convolutions, each with its own adjacency), concatenates the per-lag
hidden states along the lane-group axis, then applies a 2-D convolution and a
dense layer. The head holds one (M, Φ) matrix per intersection; a joint
action's value is the sum of the selected column values, so the greedy joint
action is the per-intersection argmax.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from dgqn import numerics as nx
from dgqn.network import RoadNetwork
from dgqn.numerics import ParamStore, Tensor, Trace
from dgqn.sim import Observation

ACTIVATIONS = ("softmax", "relu", "sigmoid")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    n_lane_groups: int
    n_intersections: int
    n_phases: int
    n_features: int = 2
    n_lags: int = 3
    embed_dim: int = 128
    conv_kernel: tuple[int, int] = (3, 1)
    conv_channels: int = 8
    activation: str = "softmax"
    gamma: float = 0.95
    delay_cap_s: float = 2000.0
    queue_cap_veh: float = 50.0
    hidden_dim: Optional[int] = None  # first dense width of the fully connected baseline

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if any(k % 2 == 0 for k in self.conv_kernel):
            raise ValueError("conv kernel extents must be odd for same padding")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_kernel"] = list(self.conv_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_kernel"] = tuple(d.get("conv_kernel", (3, 1)))
        return cls(**d)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray  # (N, P, L)
    action: np.ndarray  # (I,)
    next_state: np.ndarray
    reward: float


@dataclass
class Batch:
    states: np.ndarray  # (B, N, P, L)
    actions: np.ndarray  # (B, I)
    next_states: np.ndarray
    rewards: np.ndarray  # (B,)

    @classmethod
    def stack(cls, transitions: Sequence[Transition]) -> "Batch":
        if not transitions:
            raise ValueError("batch is empty")
        return cls(
            np.stack([t.state for t in transitions]),
            np.stack([np.asarray(t.action, dtype=np.int64) for t in transitions]),
            np.stack([t.next_state for t in transitions]),
            np.array([t.reward for t in transitions], dtype=np.float64),
        )

    def __len__(self):
        return len(self.rewards)


def build_state(history: Sequence[Observation], config: ModelConfig) -> np.ndarray:
    """(N, P, L) tensor of normalised (delay, queue) with lags oldest first.

    Missing early lags repeat the oldest observation available.
    """
    if not history:
        raise ValueError("need at least one observation")
    obs = list(history)[-config.n_lags:]
    obs = [obs[0]] * (config.n_lags - len(obs)) + obs
    lags = []
    for o in obs:
        delay = np.clip(o.delay_s / config.delay_cap_s, 0.0, 1.0)
        queue = np.clip(o.queue_veh / config.queue_cap_veh, 0.0, 1.0)
        lags.append(np.stack([delay, queue], axis=-1))
    return np.stack(lags, axis=-1)


class _Params:
    """Parameter lookup that records leaves on a trace, or returns constants."""

    def __init__(self, source, trace: Optional[Trace] = None):
        self.trace = trace
        self.store = source if isinstance(source, ParamStore) else None
        self.values = source.snapshot() if isinstance(source, ParamStore) else source

    def __getitem__(self, name) -> Tensor:
        if self.trace is not None and self.store is not None:
            return self.trace.param(self.store, name)
        return Tensor(self.values[name])

    def raw(self, name) -> np.ndarray:
        return self.values[name]


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class QNetwork:
    """Shared embedding-agnostic pieces: factorized head, feasibility, parameter groups."""

    kind = "base"

    def __init__(self, config: ModelConfig, mask: np.ndarray, feasible: np.ndarray):
        if feasible.shape != (config.n_intersections, config.n_phases):
            raise ValueError("feasibility mask shape does not match the model config")
        if not feasible.any(axis=1).all():
            raise ValueError("every intersection needs a feasible phase")
        self.config = config
        self.mask = np.asarray(mask, dtype=np.float64)
        self.feasible = np.asarray(feasible, dtype=bool)

    # subclasses define _init_embedding, embed_tensor and groups
    def init_params(self, seed: int = 0) -> ParamStore:
        rng = np.random.default_rng(seed)
        store = ParamStore()
        self._init_embedding(store, rng)
        c = self.config
        store.add("heads", rng.normal(0.0, 1.0 / np.sqrt(self.embed_width), size=(c.n_intersections, self.embed_width, c.n_phases)))
        return store

    @property
    def embed_width(self) -> int:
        return self.config.embed_dim

    def param_groups(self) -> dict[str, list[str]]:
        groups = self.groups()
        groups["heads"] = ["heads"]
        return groups

    def values_tensor(self, states: np.ndarray, params: _Params) -> Tensor:
        """(B, I, Φ) head values; infeasible cells are left as computed."""
        emb = self.embed_tensor(states, params)
        b = emb.shape[0]
        emb4 = nx.reshape(emb, (b, 1, 1, self.embed_width))
        v = nx.matmul(emb4, params["heads"])  # (B, I, 1, Φ)
        return nx.reshape(v, (b, self.config.n_intersections, self.config.n_phases))

    def embed(self, state: np.ndarray, params) -> np.ndarray:
        """𝒩(S) for one (N, P, L) state or a (B, N, P, L) batch."""
        single = state.ndim == 3
        out = self.embed_tensor(state[None] if single else state, _Params(params)).data
        return out[0] if single else out

    def activation(self, x: Tensor, axis: int) -> Tensor:
        a = self.config.activation
        if a == "softmax":
            return nx.softmax(x, axis=axis)
        if a == "relu":
            return nx.relu(x)
        return nx.sigmoid(x)


class DGQN(QNetwork):
    kind = "dgqn"

    def adjacency_keys(self) -> list[tuple[int, int]]:
        """(k, l): k-th graph convolution applied to the state lagged by l intervals."""
        return [(k, l) for l in range(self.config.n_lags) for k in range(1, l + 2)]

    @staticmethod
    def adj_name(k: int, l: int) -> str:
        return f"adj_{k}{l}"

    def _init_embedding(self, store: ParamStore, rng) -> None:
        c = self.config
        n = c.n_lane_groups
        for k, l in self.adjacency_keys():
            store.add(self.adj_name(k, l), np.zeros((n, n)))
        kh, kw = c.conv_kernel
        store.add("conv_kernel", _he(rng, (kh, kw, 1, c.conv_channels), kh * kw))
        store.add("conv_bias", np.zeros(c.conv_channels))
        flat = c.n_lags * n * c.n_features * c.conv_channels
        store.add("dense_w", _he(rng, (flat, c.embed_dim), flat))
        store.add("dense_b", np.zeros(c.embed_dim))

    def groups(self) -> dict[str, list[str]]:
        return {
            "adjacency": [self.adj_name(k, l) for k, l in self.adjacency_keys()],
            "conv": ["conv_kernel", "conv_bias"],
            "dense": ["dense_w", "dense_b"],
        }

    def adjacency_tensor(self, params: _Params, k: int, l: int) -> Tensor:
        if (k, l) not in self.adjacency_keys():
            raise KeyError(f"no adjacency matrix for convolution {k} of lag {l}")
        return nx.masked_row_softmax(params[self.adj_name(k, l)], self.mask)

    def adjacency(self, params, k: int, l: int) -> np.ndarray:
        return self.adjacency_tensor(_Params(params), k, l).data

    def hidden_states(self, states: np.ndarray, params: _Params) -> list[Tensor]:
        """[H_{t-L+1}, ..., H_t], each (B, N, P)."""
        L = self.config.n_lags
        out = []
        for l in reversed(range(L)):
            h: Tensor = Tensor(states[..., L - 1 - l])
            for k in range(1, l + 2):
                h = self.activation(nx.matmul(self.adjacency_tensor(params, k, l), h), axis=-2)
            out.append(h)
        return out

    def embed_tensor(self, states: np.ndarray, params: _Params) -> Tensor:
        c = self.config
        b = states.shape[0]
        stacked = nx.concat(self.hidden_states(states, params), axis=1)  # (B, L·N, P)
        x = nx.reshape(stacked, (b, c.n_lags * c.n_lane_groups, c.n_features, 1))
        x = nx.relu(nx.add(nx.conv2d(x, params["conv_kernel"]), params["conv_bias"]))
        x = nx.reshape(x, (b, -1))
        return nx.relu(nx.add(nx.matmul(x, params["dense_w"]), params["dense_b"]))


# ------------------------------------------------------------------ Q values and the loss


def q_values(model: QNetwork, state: np.ndarray, params) -> np.ndarray:
    """Value matrix V (I, Φ), or (B, I, Φ) for a batch; infeasible cells are -inf."""
    single = state.ndim == 3
    v = model.values_tensor(state[None] if single else state, _Params(params)).data
    v = np.where(model.feasible, v, -np.inf)
    return v[0] if single else v


def joint_q(V: np.ndarray, action: Sequence[int]) -> float:
    return float(sum(V[i, a] for i, a in enumerate(action)))


def greedy_joint_action(V: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-intersection argmax (lowest index on ties) and the summed maximum."""
    action = np.argmax(V, axis=-1)
    q = float(np.take_along_axis(V, action[..., None], axis=-1).sum())
    return action, q


def greedy_batch(V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    action = np.argmax(V, axis=-1)
    return action, np.take_along_axis(V, action[..., None], axis=-1)[..., 0].sum(axis=-1)


def brute_force_max(V: np.ndarray, feasible: Optional[np.ndarray] = None) -> tuple[tuple[int, ...], float]:
    """Enumerate every joint action; reference for the factorized maximum."""
    import itertools

    n_int, n_phi = V.shape
    options = [
        [j for j in range(n_phi) if feasible is None or feasible[i, j]] for i in range(n_int)
    ]
    best, best_q = None, -np.inf
    for combo in itertools.product(*options):
        q = sum(V[i, a] for i, a in enumerate(combo))
        if q > best_q:
            best, best_q = combo, q
    return best, float(best_q)


def bellman_targets(model: QNetwork, batch: Batch, target, gamma: float) -> np.ndarray:
    v_next = q_values(model, batch.next_states, target)
    _, q_next = greedy_batch(v_next)
    return batch.rewards + gamma * q_next


def loss_batch(model: QNetwork, batch, incumbent: ParamStore, target, gamma: Optional[float] = None):
    """Mean squared Bellman error; the target network enters only as constants.

    Returns ``(loss, trace)``; call :func:`dgqn.numerics.backward` on them to fill
    the incumbent store's gradients.
    """
    if not isinstance(batch, Batch):
        batch = Batch.stack(batch)
    if len(batch) == 0:
        raise ValueError("batch is empty")
    gamma = model.config.gamma if gamma is None else gamma
    y = bellman_targets(model, batch, target, gamma)
    trace = Trace()
    values = model.values_tensor(batch.states, _Params(incumbent, trace))
    q = nx.gather_sum(values, batch.actions)
    loss = nx.mean(nx.square(nx.sub(Tensor(y), q)))
    return loss, trace


def copy_to_target(incumbent: ParamStore) -> ParamStore:
    target = ParamStore()
    for name, arr in incumbent.snapshot().items():
        target.add(name, arr)
    return target


def model_config_for(network: RoadNetwork, kind: str = "dgqn", **overrides) -> ModelConfig:
    overrides.setdefault("n_phases", network.max_phases)
    return ModelConfig(kind=kind, n_lane_groups=network.N, n_intersections=network.I, **overrides)


def describe(model: QNetwork, store: ParamStore) -> dict:
    groups = model.param_groups()
    counts = {g: store.num_parameters(names) for g, names in groups.items()}
    shapes = {n: list(store.params[n].shape) for names in groups.values() for n in names}
    return {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "parameter_counts": counts,
        "total_parameters": sum(counts.values()),
        "shapes": shapes,
    }


# ------------------------------------------------------------------ checkpoints


def save_model(path, model: QNetwork, store: ParamStore, target: Optional[ParamStore] = None,
               extra: Optional[dict] = None) -> None:
    """Write parameters, optimizer state and optionally the target copy, with a model-config header."""
    meta = {
        "model": model.config.to_dict(),
        "feasible": model.feasible.astype(int).tolist(),
        "step": store.step,
    }
    meta.update(extra or {})
    with store.lock:
        tensors = dict(store.params)
        tensors.update({"opt/" + k: v for k, v in store.opt_state.items()})
    if target is not None:
        tensors.update({"target/" + k: v for k, v in target.snapshot().items()})
    nx.save_checkpoint(path, tensors, meta)


def load_params(path) -> tuple[ModelConfig, ParamStore, Optional[ParamStore], dict]:
    """Inverse of :func:`save_model`: (config, incumbent with optimizer state, target or None, meta)."""
    tensors, meta = nx.load_checkpoint(path)
    if "model" not in meta:
        raise nx.CheckpointError(f"{path} has no model header")
    config = ModelConfig.from_dict(meta["model"])
    plain = {k: v for k, v in tensors.items() if "/" not in k}
    store = ParamStore(plain)
    store.opt_state = {k[4:]: v for k, v in tensors.items() if k.startswith("opt/")}
    store.step = int(meta.get("step", 0))
    tgt = {k[7:]: v for k, v in tensors.items() if k.startswith("target/")}
    return config, store, (ParamStore(tgt) if tgt else None), meta
