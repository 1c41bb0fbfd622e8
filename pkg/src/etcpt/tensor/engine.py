"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded in execution order, which is a valid topological order for the
backward sweep. Outside a tape, operations run forward-only; this is how the
frozen generator is evaluated.
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
            tape.records.append(out)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.records):
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        if node is not loss:
            node.grad = None  # intermediate buffers are not kept


def _check(cond: bool, op: str, a: Sequence[int], b: Sequence[int]) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- elementwise and linear algebra -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape add, or bias-add when ``b``'s shape equals ``a``'s trailing axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            _accumulate(a, g)
            _accumulate(b, g)
        return _result(a.data + b.data, (a, b), bw)
    _check(0 < b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape, "add", a.shape, b.shape)

    def bw_bias(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g.reshape((-1,) + b.shape).sum(axis=0))
    return _result(a.data + b.data, (a, b), bw_bias)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "mul", a.shape, b.shape)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)  # a numpy float64 scalar would upcast float32 data
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a 2-D weight ``b`` or for equal-rank batched operands."""
    if b.ndim == 2:
        _check(a.shape[-1] == b.shape[0], "matmul", a.shape, b.shape)
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)  # one GEMM instead of a stack of small ones
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, a2.T @ g2)
        return _result(out, (a, b), bw)
    _check(a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2],
           "matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bw_batched(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)
    return _result(out, (a, b), bw_batched)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: _accumulate(a, np.transpose(g, inv)))


def select(a: Tensor, index: int, axis: int = 1) -> Tensor:
    """Pick one slice along ``axis`` (drops that axis)."""
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        _accumulate(a, full)
    return _result(out, (a,), bw)


def gather_positions(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``a[rows, cols]`` for a ``[b, n, ...]`` tensor; gives ``[k, ...]``."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    _check(a.ndim >= 2 and rows.shape == cols.shape and rows.ndim == 1,
           "gather_positions", a.shape, rows.shape)
    out = a.data[rows, cols]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        _accumulate(a, full)
    return _result(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,),
                   lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


# --- fused row-wise ops (compiled kernels) -------------------------------------------


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    ``key_mask`` (bool, broadcastable to ``a``) marks admissible entries; the
    others get probability zero. A row with no admissible entry is uniform.
    """
    x = a.data
    if key_mask is not None:
        x = np.where(key_mask, x, x.dtype.type(-1e30))
        # keep fully masked rows finite and uniform
        x = np.where(key_mask.any(axis=-1, keepdims=True), x, 0.0).astype(a.dtype)
    xr = _rows(x)
    y = np.empty_like(xr)
    kernels.softmax_fwd(xr, y)

    def bw(g):
        gr = _rows(g)
        dx = np.empty_like(gr)
        kernels.softmax_bwd(y, gr, dx)
        dx = dx.reshape(a.shape)
        if key_mask is not None:
            dx = dx * key_mask  # fully masked rows are constant
        _accumulate(a, dx)
    return _result(y.reshape(a.shape), (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    w = a.shape[-1]
    _check(gain.shape == (w,) and bias.shape == (w,), "layer_norm", a.shape, gain.shape)
    xr = _rows(a.data)
    out = np.empty_like(xr)
    xhat = np.empty_like(xr)
    rstd = np.empty(xr.shape[0], dtype=xr.dtype)
    g_arr = np.ascontiguousarray(gain.data, dtype=xr.dtype)
    kernels.layer_norm_fwd(xr, g_arr, np.ascontiguousarray(bias.data, dtype=xr.dtype), eps,
                           out, xhat, rstd)

    def bw(g):
        gr = _rows(g)
        dx = np.empty_like(gr)
        dgain = np.empty(w, dtype=gr.dtype)
        dbias = np.empty(w, dtype=gr.dtype)
        kernels.layer_norm_bwd(gr, xhat, rstd, g_arr, dx, dgain, dbias)
        _accumulate(a, dx.reshape(a.shape))
        _accumulate(gain, dgain)
        _accumulate(bias, dbias)
    return _result(out.reshape(a.shape), (a, gain, bias), bw)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xr = _rows(a.data)
    out = np.empty_like(xr)
    kernels.gelu_fwd(xr, out)

    def bw(g):
        dx = np.empty_like(xr)
        kernels.gelu_bwd(xr, _rows(g), dx)
        _accumulate(a, dx.reshape(a.shape))
    return _result(out.reshape(a.shape), (a,), bw)


# --- remaining nonlinearities ----------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _result(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity (same object) when ``rate`` is 0."""
    if rate <= 0.0:
        return a
    if not 0.0 < rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate) * a.dtype.type(1.0 / (1.0 - rate))
    return _result(a.data * keep, (a,), lambda g: _accumulate(a, g * keep))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accumulate(table, full)
    return _result(table.data[ids], (table,), bw)


# --- losses ---------------------------------------------------------------------------


def masked_mean_weights(mask: np.ndarray, dtype) -> tuple[np.ndarray, int]:
    """Per-position weights for averaging over contributing positions only.

    Every position-masked loss routes through here, so swapping the
    normalization (e.g. to a plain sum) is a one-line change.
    """
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        return np.zeros(m.shape, dtype=dtype), 0
    return m.astype(dtype) / count, count


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is set.

    Returns 0 (with zero gradient) when no position is selected.
    """
    targets = np.asarray(targets, dtype=np.int64)
    _check(logits.shape[:-1] == targets.shape and targets.shape == np.shape(mask),
           "cross_entropy", logits.shape, targets.shape)
    w, count = masked_mean_weights(mask, logits.dtype)
    v = logits.shape[-1]
    x = logits.data.reshape(-1, v)
    t = np.where(np.asarray(mask, bool), targets, 0).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(len(t)), t]
    wf = w.reshape(-1)
    loss = np.asarray((nll * wf).sum(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(len(t)), t] -= 1.0
        _accumulate(logits, (g * p * wf[:, None]).reshape(logits.shape))
    return _result(loss, (logits,), bw)


BCE_CLAMP = 1e-12


def binary_cross_entropy(probs: Tensor, labels: np.ndarray, mask: np.ndarray,
                         diagnostics: Optional[dict] = None) -> Tensor:
    """Mean binary cross-entropy over positions where ``mask`` is set.

    Probabilities are clamped to [1e-12, 1 - 1e-12]; the number of clamped
    positions is added to ``diagnostics["clamped"]`` when a dict is passed.
    """
    y = np.asarray(labels, dtype=probs.dtype)
    _check(probs.shape == y.shape == np.shape(mask), "binary_cross_entropy", probs.shape, y.shape)
    w, count = masked_mean_weights(mask, probs.dtype)
    p = probs.data
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    if diagnostics is not None:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + int(((pc != p) & (w > 0)).sum())
    terms = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    loss = np.asarray((terms * w).sum(), dtype=probs.dtype)

    def bw(g):
        d = (-y / pc + (1.0 - y) / (1.0 - pc)) * w
        d = np.where((p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP), d, 0.0)
        _accumulate(probs, g * d)
    return _result(loss, (probs,), bw)
