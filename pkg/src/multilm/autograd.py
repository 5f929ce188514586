"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation executed while at least one input requires a gradient is
appended to the active :class:`Graph`.  The tape order is the execution order,
which is already topological, so :func:`backward` just walks it in reverse.
A graph can be differentiated once; the next operation starts a fresh graph.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class Graph:
    """Tape of executed operations: ``(output, inputs, backward_fn)`` records."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.finished = False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward_fn):
        if self.finished:
            raise GraphStateError("cannot record on a graph that was already differentiated")
        self.nodes.append((out, inputs, backward_fn))


class _State:
    graph: Graph | None = None
    grad_enabled: bool = True


_state = _State()


def current_graph() -> Graph:
    g = _state.graph
    if g is None or g.finished:
        g = _state.graph = Graph()
    return g


def discard_graph():
    """Abandon the active graph without differentiating it."""
    _state.graph = None


def pending_graph() -> bool:
    g = _state.graph
    return g is not None and not g.finished and len(g) > 0


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "graph", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.graph = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        if type(arr) is not np.ndarray:
            arr = np.array(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.graph = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def assign_(self, values):
        """Overwrite parameter values in place (storage identity is preserved)."""
        if pending_graph():
            raise GraphStateError("parameters may only change between graph constructions")
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise DimensionError(f"assign_: shape {values.shape} does not match {self.data.shape}")
        self.data.flags.writeable = True
        try:
            self.data[...] = values
        finally:
            self.data.flags.writeable = False

    def sub_(self, delta):
        """In-place ``data -= delta``; the parameter-update primitive."""
        if pending_graph():
            raise GraphStateError("parameters may only change between graph constructions")
        self.data.flags.writeable = True
        try:
            self.data -= delta
        finally:
            self.data.flags.writeable = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(arr, inputs, backward_fn) -> Tensor:
    out = Tensor._wrap(arr)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g = current_graph()
        out.graph = g
        g.record(out, inputs, backward_fn)
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# forward ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _emit(out.copy(), (a,), lambda g: (g.reshape(old),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with ``bias`` broadcast along the last axis of ``x``."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {bias.shape} do not conform")
    n = bias.shape[0]
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Tensor) -> Tensor:
    A = a.data
    return _emit(A * A, (a,), lambda g: (2.0 * g * A,))


def sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _emit(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise DimensionError(
            "concat: shapes " + ", ".join(str(a.shape) for a in arrays) + " do not conform"
        ) from None
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _emit(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    n = a.shape[axis]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice: range [{start}, {stop}) invalid for axis of size {n} in shape {a.shape}")
    index = [np.s_[:]] * a.data.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(a.data[index].copy(), (a,), back)


def mask_apply(a: Tensor, mask) -> Tensor:
    """Multiply by a constant dropout mask broadcastable to ``a``'s shape."""
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if mask.ndim != a.data.ndim or any(m not in (1, s) for m, s in zip(mask.shape, a.shape)):
        raise DimensionError(f"mask_apply: mask shape {mask.shape} does not conform to {a.shape}")
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradients scatter-add into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    V, E = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise IndexError(f"embedding: index {int(idx.max()) if idx.max() >= V else int(idx.min())} out of range for {V} rows")

    def back(g):
        full = np.zeros((V, E))
        np.add.at(full, idx.ravel(), g.reshape(-1, E))
        return (full,)

    return _emit(table.data[idx], (table,), back)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    t = np.asarray(targets, dtype=np.int64).ravel()
    X = logits.data
    if X.ndim != 2 or X.shape[0] != t.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: logits {X.shape} vs targets {t.shape}")
    T, V = X.shape
    if T < 1:
        raise DimensionError("softmax_cross_entropy: need at least one position")
    if t.min() < 0 or t.max() >= V:
        raise IndexError(f"softmax_cross_entropy: target out of range [0, {V})")
    shifted = X - X.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    z = ex.sum(axis=1)
    rows = np.arange(T)
    nll = np.log(z) - shifted[rows, t]

    def back(g):
        p = ex / z[:, None]
        p[rows, t] -= 1.0
        return (p * (float(g) / T),)

    return _emit(np.array(nll.mean()), (logits,), back)


# ---------------------------------------------------------------------------
# fused LSTM layer

def lstm_forward_arrays(x, W, U, b, h0, c0, keep=True):
    """LSTM recurrence over a ``(B, T, H_in)`` segment, gate order [i, f, g, o].

    Returns ``(hs, h_T, c_T, cache)`` with ``hs`` shaped ``(B, T, H)``.  Work
    is time-major internally; each step is one small matmul plus a fixed
    handful of in-place elementwise calls.
    """
    B, T, Hin = x.shape
    H = U.shape[1]
    H2, H3 = 2 * H, 3 * H
    xt = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(T * B, Hin)
    acts = (xt @ W.T).reshape(T, B, 4 * H)
    acts += b
    Ut = np.ascontiguousarray(U.T)
    hs = np.empty((T + 1, B, H))
    cs = np.empty((T + 1, B, H))
    tcs = np.empty((T, B, H))
    hs[0] = h0
    cs[0] = c0
    rec = np.empty((B, 4 * H))
    ig = np.empty((B, H))
    with np.errstate(over="ignore"):
        for t in range(T):
            a = acts[t]
            np.matmul(hs[t], Ut, out=rec)
            a += rec
            g = a[:, H2:H3]
            np.tanh(g, out=ig)
            np.negative(a, out=a)
            np.exp(a, out=a)
            a += 1.0
            np.reciprocal(a, out=a)
            g[...] = ig
            c = cs[t + 1]
            np.multiply(a[:, H:H2], cs[t], out=c)
            np.multiply(a[:, :H], ig, out=ig)
            c += ig
            np.tanh(c, out=tcs[t])
            np.multiply(a[:, H3:], tcs[t], out=hs[t + 1])
    out = hs[1:].transpose(1, 0, 2)
    cache = (acts, cs, tcs, hs) if keep else None
    return out, hs[T].copy(), cs[T].copy(), cache


def lstm_backward_arrays(dhs, x, W, U, cache):
    """Adjoint of :func:`lstm_forward_arrays` given ``dhs`` of shape (B, T, H)."""
    acts, cs, tcs, hs = cache
    B, T, H = dhs.shape
    Hin = x.shape[2]
    a4 = acts.reshape(T, B, 4, H)
    i, f, g, o = a4[:, :, 0], a4[:, :, 1], a4[:, :, 2], a4[:, :, 3]
    # per-step factors, computed for the whole segment at once
    fac = np.empty((T, B, 4, H))
    fac[:, :, 0] = g * i * (1.0 - i)
    fac[:, :, 1] = cs[:T] * f * (1.0 - f)
    fac[:, :, 2] = i * (1.0 - g * g)
    fac[:, :, 3] = tcs * o * (1.0 - o)
    o_dtc = o * (1.0 - tcs * tcs)
    f = np.ascontiguousarray(f)
    dhs_tm = np.ascontiguousarray(dhs.transpose(1, 0, 2))
    dG = np.empty((T, B, 4 * H))
    dG4 = dG.reshape(T, B, 4, H)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    tmp = np.empty((B, H))
    for t in range(T - 1, -1, -1):
        dh += dhs_tm[t]
        np.multiply(dh, o_dtc[t], out=tmp)
        dc += tmp
        np.multiply(fac[t, :, :3], dc[:, None, :], out=dG4[t, :, :3])
        np.multiply(fac[t, :, 3], dh, out=dG4[t, :, 3])
        dc *= f[t]
        np.matmul(dG[t], U, out=dh)
    dG2 = dG.reshape(T * B, 4 * H)
    dU = dG2.T @ hs[:T].reshape(T * B, H)
    xt = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(T * B, Hin)
    dW = dG2.T @ xt
    db = dG2.sum(axis=0)
    dx = (dG2 @ W).reshape(T, B, Hin).transpose(1, 0, 2)
    return dx, dW, dU, db


def lstm(x: Tensor, W: Tensor, U: Tensor, b: Tensor, h0, c0):
    """Fused LSTM layer op.

    ``x`` is ``(B, T, H_in)``; ``h0``/``c0`` are constant ``(B, H)`` arrays (the
    carried state is detached).  Returns ``(outputs, h_T, c_T)`` where only
    ``outputs`` is a graph tensor.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"lstm: input must be (B, T, H_in), got {x.shape}")
    B, T, Hin = x.shape
    H = U.shape[1]
    if W.shape != (4 * H, Hin) or U.shape != (4 * H, H) or b.shape != (4 * H,):
        raise DimensionError(f"lstm: input {x.shape} with W {W.shape}, U {U.shape}, bias {b.shape} do not conform")
    h0 = np.asarray(h0, dtype=np.float64)
    c0 = np.asarray(c0, dtype=np.float64)
    if h0.shape != (B, H) or c0.shape != (B, H):
        raise DimensionError(f"lstm: state shapes {h0.shape}, {c0.shape} do not match ({B}, {H})")
    track = _state.grad_enabled and (x.requires_grad or W.requires_grad or U.requires_grad or b.requires_grad)
    hs, hT, cT, cache = lstm_forward_arrays(x.data, W.data, U.data, b.data, h0, c0, keep=track)
    X, Wd, Ud = x.data, W.data, U.data

    def back(g):
        return lstm_backward_arrays(g, X, Wd, Ud, cache)

    out = _emit(np.ascontiguousarray(hs), (x, W, U, b), back)
    return out, hT, cT


# ---------------------------------------------------------------------------
# differentiation

def backward(loss: Tensor):
    if loss.data.shape != ():
        raise DimensionError(f"backward: loss must be a scalar, got shape {loss.shape}")
    graph = loss.graph
    if graph is None:
        raise GraphStateError("backward: loss is not the output of a recorded graph")
    if graph.finished:
        raise GraphStateError("backward: graph was already differentiated")
    graph.finished = True
    adj = {id(loss): np.array(1.0)}
    for out, inputs, fn in reversed(graph.nodes):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        grads = fn(g)
        for t, gt in zip(inputs, grads):
            if not t.requires_grad:
                continue
            if t.graph is graph:
                k = id(t)
                if k in adj:
                    adj[k] = adj[k] + gt
                else:
                    adj[k] = gt
            else:
                gt = np.asarray(gt, dtype=np.float64).reshape(t.shape)
                t.grad = gt.copy() if t.grad is None else t.grad + gt
    # the tape holds every intermediate array; release it now
    graph.nodes.clear()
    if _state.graph is graph:
        _state.graph = None


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over parameter entries of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` must rebuild the scalar loss from scratch on each call and be
    deterministic (dropout masks frozen by the caller).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    loss = f()
    if not math.isfinite(loss.item()):
        raise NumericError("finite_difference_check: non-finite loss")
    backward(loss)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros(p.shape) if p.grad is None else p.grad
            base = p.data.copy()
            flat = base.ravel()
            for j in range(flat.size):
                probe = flat.copy()
                probe[j] = flat[j] + eps
                p.assign_(probe.reshape(p.shape))
                up = f().item()
                probe[j] = flat[j] - eps
                p.assign_(probe.reshape(p.shape))
                down = f().item()
                if not (math.isfinite(up) and math.isfinite(down)):
                    p.assign_(base)
                    raise NumericError(f"finite_difference_check: non-finite loss at entry {j} of {p.name or p.shape}")
                numeric = (up - down) / (2 * eps)
                a = analytic.ravel()[j]
                if not math.isfinite(a):
                    p.assign_(base)
                    raise NumericError("finite_difference_check: non-finite analytic gradient")
                worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
            p.assign_(base)
    return worst
