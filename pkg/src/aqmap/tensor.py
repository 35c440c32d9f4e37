"""Dense float64 tensors with tape-based reverse-mode differentiation.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(relu(matmul(x, w)))
    grads = backward(loss, tape)
    grads[w]  # ndarray shaped like w

Ops record onto the innermost active tape only when at least one input is
tracked (a parameter, or the output of a recorded op). Each record holds a
closure mapping the output gradient to per-input gradients; ``backward``
replays records in exact reverse order.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numba
import numpy as np
import scipy.sparse as sp

from .errors import ShapeError, ValidationError

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("aqmap_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered record of executed ops. Use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> None:
        self.records.append(_Record(out, tuple(inputs), fn))


def _emit(data, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.record(out, inputs, fn)
    return out


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] | None = None) -> dict:
    """Gradients of a scalar ``loss`` with respect to tracked tensors.

    Returns a dict keyed by Tensor. Every tensor created with
    ``requires_grad=True`` that the loss depends on is included; tensors in
    ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.tracked:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"internal gradient shape {gi.shape} != {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.requires_grad:
                leaves[key] = t
    out = {leaves[k]: grads[k] for k in leaves}
    if loss.requires_grad:
        out[loss] = np.ones_like(loss.data)
    for p in params or ():
        if p not in out:
            out[p] = np.zeros_like(p.data)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return np.asarray(g)


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---- element-wise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Element-wise product with numpy broadcasting (a scalar Tensor scales)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.tracked else None
        gb = _unbroadcast(g * a.data, b.shape) if b.tracked else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), fn)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


# ---- reductions and shape ----------------------------------------------------


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(out, (x,), fn)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, ts, fn)


concat_rows = concat


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)

    def fn(g):
        gx = np.zeros_like(x.data)
        order = np.argsort(indices, kind="stable")
        idx_sorted = indices[order]
        bounds = np.flatnonzero(np.r_[True, idx_sorted[1:] != idx_sorted[:-1]])
        sums = np.add.reduceat(np.take(g, order, axis=axis), bounds, axis=axis)
        np.moveaxis(gx, axis, 0)[idx_sorted[bounds]] = np.moveaxis(sums, axis, 0)
        return (gx,)

    return _emit(np.take(x.data, indices, axis=axis), (x,), fn)


def window_mean(x, starts, width: int) -> Tensor:
    """Means over windows ``[s, s + width)`` of the last axis.

    Output shape is ``x.shape[:-1] + (len(starts),)``.
    """
    x = as_tensor(x)
    starts = np.asarray(starts, dtype=np.intp).reshape(-1)
    length = x.shape[-1]
    if width < 1 or starts.size == 0 or starts.min() < 0 or starts.max() + width > length:
        raise ShapeError(f"windows of width {width} starting at {starts.tolist()} exceed axis length {length}")
    # (length, B) averaging matrix; windows overlap heavily so a dense product is cheapest
    avg = np.zeros((length, starts.size))
    for b, s0 in enumerate(starts):
        avg[s0 : s0 + width, b] = 1.0 / width
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, length)
    out = (flat @ avg).reshape(lead + (starts.size,))
    return _emit(out, (x,), lambda g: ((g.reshape(-1, starts.size) @ avg.T).reshape(x.shape),))


# ---- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D or batched alike."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    flat = a.ndim > 2 and b.ndim == 2
    if flat:
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)

    def fn(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, n)
            if a.tracked:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.tracked:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.tracked:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.tracked:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), fn)


@numba.njit(cache=True)
def _csr_batched(indptr, indices, values, h, out):  # pragma: no cover - compiled
    nb, n, f = h.shape
    for b in range(nb):
        for i in range(n):
            for k in range(f):
                out[b, i, k] = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                v = values[p]
                for k in range(f):
                    out[b, i, k] += v * h[b, j, k]


def _apply_operator(op, h: np.ndarray) -> np.ndarray:
    if h.ndim <= 2:
        return np.asarray(op @ h)
    if sp.issparse(op):
        h3 = np.ascontiguousarray(h).reshape((-1,) + h.shape[-2:])
        out = np.empty(h3.shape)
        _csr_batched(op.indptr, op.indices, op.data, h3, out)
        return out.reshape(h.shape)
    return np.matmul(op, h)


def propagate(op, h) -> Tensor:
    """Left-multiply by a constant N x N operator (dense array or scipy sparse).

    ``h`` has shape (N,), (N, F) or (..., N, F); batches are processed
    independently.
    """
    h = as_tensor(h)
    n = op.shape[0]
    node_axis = 0 if h.ndim == 1 else h.ndim - 2
    if op.shape != (n, n) or h.shape[node_axis] != n:
        raise ShapeError(f"operator {op.shape} incompatible with {h.shape}")
    if sp.issparse(op):
        op = op.tocsr()
        op.sort_indices()
        op_t = op.T.tocsr()
        op_t.sort_indices()
    else:
        op_t = op.T
    return _emit(_apply_operator(op, h.data), (h,), lambda g: (_apply_operator(op_t, g),))


def quad_form(y, m) -> Tensor:
    """Sum over rows of y^T M y for a constant symmetric M.

    ``y`` is (N,) or (B, N); batch contributions are summed.
    """
    y = as_tensor(y)
    n = m.shape[0]
    if y.shape[-1] != n or y.ndim > 2:
        raise ShapeError(f"quad_form expects (N,) or (B, N) with N={n}, got {y.shape}")
    my = np.asarray(m @ y.data.T).T
    value = float(np.sum(y.data * my))
    return _emit(np.array(value), (y,), lambda g: (2.0 * g * my,))


def conv1d_time(x, kernels, bias) -> Tensor:
    """Valid cross-correlation along the last axis.

    x: (..., C_in, T); kernels: (C_out, C_in, K); bias: (C_out,).
    Returns (..., C_out, T - K + 1). Kernels are not flipped.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if kernels.ndim != 3 or x.ndim < 2:
        raise ShapeError(f"conv1d_time expects x (..., C_in, T) and kernels (C_out, C_in, K); got {x.shape}, {kernels.shape}")
    c_out, c_in, k = kernels.shape
    t = x.shape[-1]
    if x.shape[-2] != c_in or bias.shape != (c_out,):
        raise ShapeError(f"conv1d_time channel mismatch: x {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    if t < k or k < 1:
        raise ShapeError(f"time length {t} shorter than kernel width {k}")
    t_out = t - k + 1
    lead = x.shape[:-2]

    # (..., C_in, T', K) -> (..., T', C_in*K)
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=-1)
    cols = np.ascontiguousarray(np.moveaxis(win, -2, -3)).reshape(lead + (t_out, c_in * k))
    kmat = kernels.data.reshape(c_out, c_in * k)
    out = np.matmul(kmat, np.swapaxes(cols, -1, -2))
    out += bias.data[:, None]

    def fn(g):
        gx = gk = gb = None
        g_cols = np.swapaxes(g, -1, -2)  # (..., T', C_out)
        if kernels.tracked:
            gk = (g_cols.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(kernels.shape)
        if bias.tracked:
            gb = g.reshape(-1, c_out, t_out).sum(axis=(0, 2))
        if x.tracked:
            gx = np.zeros(x.shape)
            for j in range(k):
                gx[..., j : j + t_out] += np.matmul(kernels.data[:, :, j].T, g)
        return gx, gk, gb

    return _emit(out, (x, kernels, bias), fn)


# ---- losses -------------------------------------------------------------------


def mse_masked(pred, truth, mask) -> Tensor:
    """Mean of squared errors over entries where ``mask`` is true."""
    pred = as_tensor(pred)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if truth.shape != pred.shape or mask.shape != pred.shape:
        raise ShapeError(f"mse_masked shapes differ: {pred.shape}, {truth.shape}, {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValidationError("mse_masked: empty mask")
    resid = np.where(mask, pred.data - np.where(mask, truth, 0.0), 0.0)
    value = float(np.sum(resid * resid)) / count
    return _emit(np.array(value), (pred,), lambda g: (g * 2.0 * resid / count,))
