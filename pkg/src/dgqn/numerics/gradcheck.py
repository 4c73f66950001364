"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from dgqn.numerics.params import ParamStore
from dgqn.numerics.tensor import Trace, backward


def grad_check(f: Callable[[Trace, ParamStore], "object"], store: ParamStore, step: float = 1e-5,
               names: Optional[Iterable[str]] = None, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    ``f(trace, store)`` must build a scalar Tensor from parameters obtained via
    ``trace.param(store, name)``. ``max_coords`` samples that many coordinates
    per parameter instead of checking all of them.
    """
    names = list(names) if names is not None else store.names()
    store.zero_grad()
    trace = Trace()
    loss = f(trace, store)
    analytic = {k: v.copy() for k, v in backward(trace, loss).items()}
    store.zero_grad()

    def value() -> float:
        return float(np.asarray(f(Trace(), store).data).reshape(()))

    worst = 0.0
    for name in names:
        p = store.params[name]
        flat_idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat_idx = (rng or np.random.default_rng(0)).choice(p.size, max_coords, replace=False)
        a_flat = analytic.get(name, np.zeros_like(p)).reshape(-1)
        for k in flat_idx:
            original = store.params[name]
            plus = original.copy()
            plus.flat[k] += step
            store.params[name] = plus
            f_plus = value()
            minus = original.copy()
            minus.flat[k] -= step
            store.params[name] = minus
            f_minus = value()
            store.params[name] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = a_flat[k]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
