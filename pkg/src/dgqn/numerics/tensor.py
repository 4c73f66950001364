"""Dense float64 tensors with a reverse-mode tape.

A :class:`Trace` records every op whose inputs require gradients. Leaves are
created with :meth:`Trace.param`; plain arrays and untraced tensors are
constants. :func:`backward` walks the tape once in reverse and accumulates the
gradient of a scalar into the parameter stores the leaves came from.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "trace", "_leaf")

    def __init__(self, data, requires_grad: bool = False, trace: Optional["Trace"] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.trace = trace
        self.grad: Optional[np.ndarray] = None
        self._leaf = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    # operator sugar for readability in model code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Op:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Trace:
    """Tape of recorded ops for one forward pass."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.leaves: list[tuple[Tensor, object, str]] = []

    def param(self, store, name: str) -> Tensor:
        t = Tensor(store.params[name], requires_grad=True, trace=self)
        t._leaf = (store, name)
        self.leaves.append((t, store, name))
        return t

    def __len__(self):
        return len(self.ops)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    trace = next((t.trace for t in inputs if t.requires_grad), None)
    if trace is None:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, trace=trace)
    trace.ops.append(_Op(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.data ** 2, (x,), lambda g: (2.0 * x.data * g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0  # subgradient at exactly 0 is 0
    return _record(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def _softmax_backward(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record(y, (x,), lambda g: (_softmax_backward(y, g, axis),))


def masked_row_softmax(logits, mask) -> Tensor:
    """Row softmax over the entries where ``mask`` is nonzero; all other entries are exactly 0."""
    logits = as_tensor(logits)
    support = np.asarray(mask) != 0
    if logits.shape[-2:] != support.shape:
        raise ValueError(f"mask shape {support.shape} does not match logits {logits.shape}")
    if not support.any(axis=-1).all():
        raise ValueError("every mask row needs at least one allowed entry")
    z = np.where(support, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(support, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (logits,), lambda g: (_softmax_backward(y, g, -1),))


# ------------------------------------------------------------------ linear algebra / shape


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _record(out, (a, b), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def total(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _record(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def gather_sum(values, index) -> Tensor:
    """``out[b] = sum_i values[b, i, index[b, i]]`` for a (B, I, Φ) tensor and (B, I) integer index."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    b, i = np.meshgrid(np.arange(index.shape[0]), np.arange(index.shape[1]), indexing="ij")
    out = values.data[b, i, index].sum(axis=1)

    def backward(g):
        gv = np.zeros(values.shape)
        np.add.at(gv, (b, i, index), g[:, None])
        return (gv,)

    return _record(out, (values,), backward)


def conv2d(x, kernel) -> Tensor:
    """'Same' zero-padded cross-correlation.

    ``x`` is (H, W, C_in) or (B, H, W, C_in); ``kernel`` is (kh, kw, C_in, C_out).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    kh, kw, cin, cout = kernel.shape
    bsz, h, w, c = xd.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    top, left = (kh - 1) // 2, (kw - 1) // 2
    padded = np.zeros((bsz, h + kh - 1, w + kw - 1, c))
    padded[:, top:top + h, left:left + w, :] = xd
    out = np.zeros((bsz, h, w, cout))
    for di in range(kh):
        for dj in range(kw):
            out += padded[:, di:di + h, dj:dj + w, :] @ kernel.data[di, dj]

    def backward(g):
        g4 = g[None] if squeeze else g
        gk = np.zeros(kernel.shape) if kernel.requires_grad else None
        gp = np.zeros(padded.shape) if x.requires_grad else None
        for di in range(kh):
            for dj in range(kw):
                window = padded[:, di:di + h, dj:dj + w, :]
                if gk is not None:
                    gk[di, dj] = np.tensordot(window, g4, axes=([0, 1, 2], [0, 1, 2]))
                if gp is not None:
                    gp[:, di:di + h, dj:dj + w, :] += g4 @ kernel.data[di, dj].T
        gx = None
        if gp is not None:
            gx = gp[:, top:top + h, left:left + w, :]
            gx = gx[0] if squeeze else gx
        return gx, gk

    return _record(out[0] if squeeze else out, (x, kernel), backward)


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# ------------------------------------------------------------------ backward


def backward(trace: Trace, loss: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into each leaf's store and return them by name."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        for _, store, name in trace.leaves:
            grads[name] = np.zeros_like(store.params[name])
        return grads
    loss.grad = np.ones_like(loss.data)
    for op in reversed(trace.ops):
        g = op.out.grad
        if g is None:
            continue
        parts = op.backward(g)
        for inp, part in zip(op.inputs, parts):
            if part is None or not inp.requires_grad:
                continue
            inp.grad = part if inp.grad is None else inp.grad + part
    for leaf, store, name in trace.leaves:
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        store.accumulate(name, g)
        grads[name] = grads[name] + g if name in grads else g
    return grads
