"""Minimal reverse-mode autodiff over dense float64 arrays.

Everything trainable in this project (denoiser, conditioner, losses) is
expressed through the op set below. Ops are recorded on a thread-local
Tape; ``backward`` walks the tape in reverse and overwrites gradients.
No implicit broadcasting: shapes must match exactly except through the
explicit ``broadcast_expand`` op.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_tls = threading.local()


class ShapeError(ValueError):
    pass


def _current_tape() -> "Tape":
    tape = getattr(_tls, "tape", None)
    if tape is None:
        raise RuntimeError("no active Tape; wrap the computation in 'with Tape():'")
    return tape


class DiffTensor:
    """A value in the computation graph.

    data is stored row-major as float64. grad mirrors data's shape once
    backward() has run over a tape containing this tensor.
    """

    __slots__ = ("shape", "data", "grad", "requires_grad", "node_id")

    _next_id = 0
    _id_lock = threading.Lock()

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.shape = arr.shape
        self.grad = None
        self.requires_grad = requires_grad
        with DiffTensor._id_lock:
            self.node_id = DiffTensor._next_id
            DiffTensor._next_id += 1

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(data, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad)


class _TapeEntry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_tls, "tape", None)
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = self._prev
        return False

    def record(self, inputs: Sequence[DiffTensor], output: DiffTensor,
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.entries.append(_TapeEntry(list(inputs), output, backward_fn))

    def backward(self, loss: DiffTensor) -> None:
        """Populate grad on every requires_grad tensor reachable from loss.

        Gradients are overwritten, not accumulated across calls.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            gout = grads.pop(entry.output.node_id, None)
            if gout is None:
                continue
            gins = entry.backward_fn(gout)
            for t, g in zip(entry.inputs, gins):
                if g is None:
                    continue
                if t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + g
                else:
                    grads[t.node_id] = g
            if entry.output.requires_grad:
                entry.output.grad = gout
        # leaves: anything left in grads plus the loss itself
        for entry in self.entries:
            for t in entry.inputs:
                if t.requires_grad and t.node_id in grads:
                    t.grad = grads[t.node_id]


def backward(loss: DiffTensor, tape: Tape | None = None) -> None:
    (tape or _current_tape()).backward(loss)


def _make(inputs, value, backward_fn) -> DiffTensor:
    out = DiffTensor(value)
    _current_tape().record(inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------- op kinds


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")
    return _make([a, b], a.data + b.data, lambda g: (g, g))


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make([a, b], ad * bd, lambda g: (g * bd, g * ad))


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    return _make([a], a.data * c, lambda g: (g * c,))


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} vs {b.shape}")
    return _make([a, b], a.data - b.data, lambda g: (g, -g))


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make([a, b], ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def concat_last_axis(parts: Sequence[DiffTensor]) -> DiffTensor:
    if not parts:
        raise ShapeError("concat_last_axis: no inputs")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last_axis: leading dims differ {p.shape} vs {parts[0].shape}")
    widths = [p.shape[-1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=-1))

    return _make(list(parts), np.concatenate([p.data for p in parts], axis=-1), bwd)


def leaky_relu(a: DiffTensor, slope: float = 0.01) -> DiffTensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    mask = a.data >= 0
    coef = np.where(mask, 1.0, slope)
    return _make([a], a.data * coef, lambda g: (g * coef,))


def sigmoid(a: DiffTensor) -> DiffTensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _make([a], y, lambda g: (g * y * (1.0 - y),))


def reduce_max_over_points(a: DiffTensor) -> DiffTensor:
    """Max over axis 0 of a (K, C) tensor. Ties route gradient to the
    lowest index, so backward is deterministic."""
    if a.data.ndim != 2:
        raise ShapeError(f"reduce_max_over_points expects 2D, got {a.shape}")
    idx = np.argmax(a.data, axis=0)  # first occurrence on ties
    cols = np.arange(a.shape[1])
    val = a.data[idx, cols]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx, cols] = g
        return (ga,)

    return _make([a], val, bwd)


def reduce_mean(a: DiffTensor) -> DiffTensor:
    n = a.data.size
    return _make([a], np.array(a.data.mean()),
                 lambda g: (np.full_like(a.data, g.item() / n),))


def reduce_sum(a: DiffTensor) -> DiffTensor:
    return _make([a], np.array(a.data.sum()),
                 lambda g: (np.full_like(a.data, g.item()),))


def mse(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    return _make([a, b], np.array(np.mean(d * d)),
                 lambda g: (g.item() * 2.0 / n * d, g.item() * -2.0 / n * d))


def gather_rows(a: DiffTensor, indices) -> DiffTensor:
    """Select rows of a 2D tensor. A negative index yields a zero row
    (used for implicit zero padding); gradient scatters to valid rows only."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects 2D, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = a.data[safe]
    out[~valid] = 0.0

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, safe[valid], g[valid])
        return (ga,)

    return _make([a], out, bwd)


def broadcast_expand(a: DiffTensor, rows: int) -> DiffTensor:
    """Expand a (C,) or (1, C) tensor to (rows, C); gradient sums rows."""
    vec = a.data.reshape(-1)
    out = np.broadcast_to(vec, (rows, vec.size)).copy()
    return _make([a], out, lambda g: (g.sum(axis=0).reshape(a.shape),))


def reshape(a: DiffTensor, shape) -> DiffTensor:
    shape = tuple(shape)
    return _make([a], a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


_DISPATCH = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat-last-axis": lambda *xs: concat_last_axis(list(xs)),
    "leaky_relu": leaky_relu,
    "reduce_max_over_points": reduce_max_over_points,
    "reduce_mean": reduce_mean,
    "mse": mse,
    "gather_rows": gather_rows,
    "broadcast_expand": broadcast_expand,
}


def op_forward(kind: str, inputs: Sequence[DiffTensor], **kwargs) -> DiffTensor:
    """Generic dispatch over the named op kinds; records on the active tape."""
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- oracle


def finite_diff_grad(f: Callable[[list[DiffTensor]], float],
                     params: list[DiffTensor], step: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function, element by element.

    Test oracle only; f must be deterministic in the params.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(params)
            flat[i] = orig - step
            fm = f(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("finite_diff_grad: non-finite function value")
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads
