"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tape`` is a Wengert list: every operation executed while a tape is
active appends one entry holding the output tensor, its parent tensors,
and a backward closure. ``backward(loss)`` walks the list once in reverse
(which is a reverse topological order, since entries are recorded in
execution order) and accumulates gradients into ``Tensor.grad``.

Training runs in float32 by default; gradient checks and oracle tests
switch the whole stack to float64 with the ``precision`` context manager,
because central finite differences are unreliable in single precision.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_state = threading.local()
_DEFAULT_DTYPE = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the global default dtype (float32 or float64)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """A dense array plus an optional gradient accumulator and a tape identity."""

    __slots__ = ("data", "grad", "node_id")
    _ids = itertools.count()

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: np.ndarray | None = None
        self.node_id: int = next(Tensor._ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, id={self.node_id})"

    # Operator sugar; non-Tensor operands are treated as constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _wrap(data: np.ndarray) -> Tensor:
    """Wrap an already-computed ndarray without casting or copying."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.node_id = next(Tensor._ids)
    return t


class Tape:
    """Ordered record of executed operations; owns nothing but the record.

    One training job owns exactly one active tape at a time. Use as a
    context manager::

        with Tape() as tape:
            loss = ...
            tape.backward(loss)
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
        self._entries.append((out, tuple(parents), backward_fn))

    def reset(self) -> None:
        self._entries.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate gradients onto every reachable leaf.

        Each entry is visited exactly once, in reverse recording order.
        Calling backward a second time without reset() raises, so gradients
        can never be silently double-accumulated.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ContractError(
                f"backward root must be a scalar Tensor, got shape {getattr(loss, 'shape', None)}"
            )
        if self._consumed:
            raise ContractError("backward already ran on this tape; call reset() first")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self._entries):
            g = out.grad
            if g is None:
                continue
            for p, pg in zip(parents, backward_fn(g)):
                if pg is None:
                    continue
                if p.grad is None:
                    # Views returned by reshape/transpose backwards must not
                    # alias another tensor's accumulator.
                    p.grad = pg if pg.base is None else pg.copy()
                else:
                    p.grad += pg


def active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run reverse-mode accumulation from a scalar loss on the given/active tape."""
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("no active tape; wrap the forward pass in `with Tape():`")
    tape.backward(loss)


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = _wrap(a.data + b.data)
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = _wrap(a.data - b.data)
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = _wrap(a.data * b.data)
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = _wrap(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports ``[..., m, k] @ [k, n]`` (stacked inputs against one weight) and
    ``[..., m, k] @ [..., k, n]`` with identical leading dims (batched, used
    by attention). Gradients: dA = dC·Bᵀ, dB = Aᵀ·dC.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2:
        raise DimensionError(f"matmul: need ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    if bd.ndim == 2:
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = _wrap((a2 @ bd).reshape(ad.shape[:-1] + (n,)))

        def back(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _record(out, (a, b), back)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch dims disagree for {a.shape} @ {b.shape}")
    out = _wrap(np.matmul(ad, bd))

    def back_batched(g):
        return np.matmul(g, bd.swapaxes(-1, -2)), np.matmul(ad.swapaxes(-1, -2), g)

    return _record(out, (a, b), back_batched)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = _wrap(a.data.reshape(shape))
    src_shape = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(src_shape),))


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _wrap(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _wrap(a.data[idx])
    src_shape = a.data.shape

    def back(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record(out, (a,), back)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    out = _wrap(np.asarray(a.data.sum(axis=axis)))
    src_shape = a.data.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src_shape).astype(g.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), src_shape).copy(),)

    return _record(out, (a,), back)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinear ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    a = as_tensor(a)
    x = a.data
    if not np.isfinite(x).all():
        raise NumericError("softmax: input contains non-finite values")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _wrap(y)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), back)


def silu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = _wrap(x * s)
    return _record(out, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def rms_norm(a: Tensor, weight: Tensor, eps: float) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps) * weight."""
    if eps <= 0:
        raise ContractError(f"rms_norm: eps must be positive, got {eps}")
    a, weight = as_tensor(a), as_tensor(weight)
    x, w = a.data, weight.data
    d = x.shape[-1]
    if w.shape != (d,):
        raise DimensionError(f"rms_norm: weight shape {w.shape} does not match feature dim {d}")
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    out = _wrap(x * inv * w)

    def back(g):
        gw = g * w
        dot = (gw * x).sum(axis=-1, keepdims=True)
        dx = gw * inv - x * (inv ** 3) * (dot / d)
        dw = (g * x * inv).reshape(-1, d).sum(axis=0)
        return dx, dw

    return _record(out, (a, weight), back)


_ROPE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _rope_tables(n_pos: int, dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (n_pos, dim, base, np.dtype(dtype).str)
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
        ang = np.arange(n_pos, dtype=np.float64)[:, None] * inv_freq[None, :]
        hit = _ROPE_CACHE[key] = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
    return hit


def rope_rotate(a: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotary position encoding: rotate even/odd channel pairs of the last axis.

    ``a`` has shape [..., T, d] with d even; ``positions`` is the integer
    position of each of the T slots. Position 0 is the identity rotation.
    """
    a = as_tensor(a)
    x = a.data
    d = x.shape[-1]
    if d % 2:
        raise DimensionError(f"rope_rotate: last dim must be even, got {d}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-2],):
        raise DimensionError(
            f"rope_rotate: positions shape {positions.shape} does not match T={x.shape[-2]}"
        )
    cos_t, sin_t = _rope_tables(int(positions.max()) + 1, d, base, x.dtype)
    cos, sin = cos_t[positions], sin_t[positions]  # [T, d/2]
    even, odd = x[..., 0::2], x[..., 1::2]
    out_d = np.empty_like(x)
    out_d[..., 0::2] = even * cos - odd * sin
    out_d[..., 1::2] = even * sin + odd * cos
    out = _wrap(out_d)

    def back(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = -ge * sin + go * cos
        return (dx,)

    return _record(out, (a,), back)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target entries, fused log-sum-exp.

    ``logits`` is [T, V]; ``targets`` holds T integer ids in [0, V).
    """
    logits = as_tensor(logits)
    x = logits.data
    if x.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {x.shape}")
    targets = np.asarray(targets).reshape(-1)
    t, v = x.shape
    if targets.shape[0] != t:
        raise DimensionError(f"cross_entropy: {targets.shape[0]} targets for {t} rows")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= v:
        raise IndexError(f"cross_entropy: target ids out of range [0, {v})")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    rows = np.arange(t)
    nll = lse - x[rows, targets]
    # fsum makes the mean invariant to row permutations at the bit level
    out = _wrap(np.asarray(math.fsum(nll.astype(np.float64)) / t, dtype=x.dtype))
    probs = e / z

    def back(g):
        d = probs.copy()
        d[rows, targets] -= 1.0
        d *= g / t
        return (d,)

    return _record(out, (logits,), back)


# ---------------------------------------------------------------------------
# gather / scatter (token dispatch primitives)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along axis 0 by an integer index array; backward scatter-adds.

    Also serves as the embedding lookup: ``take_rows(table[V,d], ids[B,T])``
    yields [B, T, d].
    """
    a = as_tensor(a)
    indices = np.asarray(indices)
    out = _wrap(a.data[indices])
    src_shape = a.data.shape
    flat_idx = indices.reshape(-1)

    def back(g):
        acc = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(acc, flat_idx, g.reshape((-1,) + src_shape[1:]))
        return (acc,)

    return _record(out, (a,), back)


def take_along(a: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """np.take_along_axis as a differentiable op."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out = _wrap(np.take_along_axis(a.data, indices, axis=axis))
    src_shape = a.data.shape

    def back(g):
        acc = np.zeros(src_shape, dtype=g.dtype)
        if axis in (-1, a.data.ndim - 1) and a.data.ndim == 2:
            np.add.at(acc, (np.arange(src_shape[0])[:, None], indices), g)
        else:
            raise ContractError("take_along backward implemented for 2-D, last axis only")
        return (acc,)

    return _record(out, (a,), back)


def put_rows(n_rows: int, rows: np.ndarray, values: Tensor) -> Tensor:
    """Scatter-add value rows into a fresh zero tensor of ``n_rows`` rows."""
    values = as_tensor(values)
    rows = np.asarray(rows)
    out_d = np.zeros((n_rows,) + values.data.shape[1:], dtype=values.dtype)
    np.add.at(out_d, rows, values.data)
    out = _wrap(out_d)
    return _record(out, (values,), lambda g: (g[rows],))


def scatter_cols(n_cols: int, col_indices: np.ndarray, values: Tensor) -> Tensor:
    """Build a [T, n_cols] tensor with ``values`` [T, k] scattered at per-row columns.

    Used to densify sparse gate weights into a full [tokens, experts] matrix.
    """
    values = as_tensor(values)
    col_indices = np.asarray(col_indices)
    t, k = values.data.shape
    if col_indices.shape != (t, k):
        raise DimensionError(f"scatter_cols: indices {col_indices.shape} vs values {values.data.shape}")
    out_d = np.zeros((t, n_cols), dtype=values.dtype)
    rows = np.arange(t)[:, None]
    np.add.at(out_d, (rows, col_indices), values.data)
    out = _wrap(out_d)
    return _record(out, (values,), lambda g: (g[rows, col_indices],))


# ---------------------------------------------------------------------------
# finite-difference oracle


def numeric_gradient(
    fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, indices: np.ndarray | None = None
) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``x``.

    ``fn`` must recompute the loss from current tensor contents each call.
    Run under ``precision(np.float64)``; float32 differencing is noise.
    With ``indices`` (flat positions) only those elements are probed and a
    1-D array of that length is returned; otherwise the full gradient comes
    back in ``x``'s shape.
    """
    flat = x.data.reshape(-1)
    probe = np.arange(flat.size) if indices is None else np.asarray(indices)
    grad = np.zeros(probe.size, dtype=flat.dtype)
    for j, i in enumerate(probe):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data)
        flat[i] = orig - eps
        lo = float(fn().data)
        flat[i] = orig
        grad[j] = (hi - lo) / (2 * eps)
    return grad.reshape(x.data.shape) if indices is None else grad


def gradcheck(
    fn: Callable[[], Tensor],
    wrt: Iterable[Tensor],
    eps: float = 1e-5,
    rtol: float = 1e-5,
    atol: float = 1e-9,
    max_elements: int | None = None,
    sample_seed: int = 0,
) -> float:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    An element passes when ``|analytic - numeric| <= atol + rtol*max(|analytic|,
    |numeric|)``; the small atol absorbs finite-difference noise (~eps^2) on
    elements whose true gradient is essentially zero, where a pure ratio is
    meaningless. Returns the worst normalized error (<= rtol means pass) and
    raises NumericError past tolerance. Tensors larger than ``max_elements``
    are probed at a deterministic random subset of positions.
    """
    wrt = list(wrt)
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    rng = np.random.default_rng(sample_seed)
    worst = 0.0
    for x in wrt:
        if x.grad is None:
            raise NumericError("gradcheck: tensor received no gradient")
        size = x.data.size
        if max_elements is not None and size > max_elements:
            idx = rng.choice(size, size=max_elements, replace=False)
        else:
            idx = np.arange(size)
        num = numeric_gradient(fn, x, eps=eps, indices=idx)
        ana = x.grad.reshape(-1)[idx]
        rel = np.abs(ana - num) / (np.maximum(np.abs(ana), np.abs(num)) + atol / rtol)
        worst = max(worst, float(rel.max()))
        x.grad = None
    if worst > rtol:
        raise NumericError(f"gradient check failed: worst normalized error {worst:.3e} > {rtol}")
    return worst
