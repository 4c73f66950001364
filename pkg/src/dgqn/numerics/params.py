"""Named parameter tensors, gradient accumulators and the RMSProp update."""

from __future__ import annotations

import threading
from typing import Iterable, Optional

import numpy as np


class ParamStore:
    """Parameters, matching gradient buffers and optimizer state.

    Writers replace whole arrays rather than mutating them, so a reader that
    grabbed a reference (see :meth:`snapshot`) always sees a complete pre- or
    post-update tensor.
    """

    def __init__(self, params: Optional[dict[str, np.ndarray]] = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.opt_state: dict[str, np.ndarray] = {}
        self.step = 0
        self.lock = threading.RLock()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self.params)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name]

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, parameter is {self.params[name].shape}")
        self.grads[name] = self.grads[name] + grad

    def zero_grad(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def num_parameters(self, names: Optional[Iterable[str]] = None) -> int:
        return int(sum(self.params[n].size for n in (names if names is not None else self.params)))

    def snapshot(self) -> dict[str, np.ndarray]:
        """Consistent read view: references to the current arrays, taken under the lock."""
        with self.lock:
            return dict(self.params)

    def view(self) -> "ParamStore":
        """A store sharing the current parameter arrays with fresh gradient buffers."""
        out = ParamStore()
        for name, arr in self.snapshot().items():
            out.params[name] = arr
            out.grads[name] = np.zeros_like(arr)
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        with self.lock:
            for name, arr in self.params.items():
                out.add(name, arr)
            out.opt_state = {k: v.copy() for k, v in self.opt_state.items()}
            out.step = self.step
        return out

    def assign(self, other: "ParamStore") -> None:
        """Replace every parameter with a copy of ``other``'s (same names required)."""
        src = other.snapshot()
        if set(src) != set(self.params):
            raise KeyError("parameter names differ")
        with self.lock:
            for name, arr in src.items():
                self.params[name] = arr.copy()

    def equal(self, other: "ParamStore") -> bool:
        return set(self.params) == set(other.params) and all(
            np.array_equal(self.params[n], other.params[n]) for n in self.params
        )


def optimizer_step(store: ParamStore, learning_rate: float, grads: Optional[dict[str, np.ndarray]] = None,
                   decay: float = 0.99, eps: float = 1e-8) -> None:
    """RMSProp update of ``store`` from ``grads`` (default: its own buffers), then clear the buffers.

    Raises FloatingPointError naming the first parameter with a non-finite gradient,
    before any parameter is changed.
    """
    grads = store.grads if grads is None else grads
    for name in store.params:
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    with store.lock:
        for name, p in store.params.items():
            g = grads.get(name)
            if g is None:
                continue
            sq = store.opt_state.get(name)
            sq = (1.0 - decay) * g * g if sq is None else decay * sq + (1.0 - decay) * g * g
            store.opt_state[name] = sq
            store.params[name] = p - learning_rate * g / (np.sqrt(sq) + eps)
        store.step += 1
        store.zero_grad()
