"""A small reverse-mode autodiff engine over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it;
:func:`backward` replays the tape in reverse.  Outside a tape, operations are
plain numpy computations and their outputs are constants.

    with Tape() as tape:
        loss = (x @ w).sum()
    backward(loss, tape)

Broadcasting is deliberately narrow: a binary op accepts two equal shapes, or
one operand whose shape equals the trailing dimensions of the other (the bias
case).  Scalars are handled by :func:`scale`.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import LabelIndexError, NumericError, ShapeError, SupervisionError, VocabularyError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording: ops inside produce constants even if a tape is active."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError("division is only supported by scalars")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


@dataclass(eq=False)
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of the primitive operations executed while active."""

    def __init__(self) -> None:
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def output_ids(self) -> set[int]:
        return {id(r.output) for r in self.records}

    def input_ids(self) -> set[int]:
        return {id(t) for r in self.records for t in r.inputs}

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


def apply_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out`` as a tensor, recording ``backward_fn`` when differentiable.

    ``backward_fn(g)`` returns one gradient (or None) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs, dtype=out.dtype)
    if needs:
        tape.records.append(Record(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable requires_grad tensor."""
    if tape is None:
        tape = active_tape()
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        raise ShapeError("backward needs a tape")
    if not loss.requires_grad:
        raise ShapeError("loss does not depend on any requires_grad tensor on this tape")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    found = False
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.output), None)
        if rec.output is loss:
            found = True
        if g is None:
            continue
        out = rec.output
        out.grad = g if out.grad is None else out.grad + g
        grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            adj[key] = gi if key not in adj else adj[key] + gi
            leaves[key] = inp
    if not found and id(loss) in adj:
        # loss is itself a leaf
        leaves[id(loss)] = loss
    for key, g in adj.items():
        t = leaves.get(key)
        if t is None:
            continue
        g = np.asarray(g, dtype=t.dtype)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# shape helpers


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    out = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "add")
    return apply_op("add", (a, b), a.data + b.data,
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "sub")
    return apply_op("sub", (a, b), a.data - b.data,
                    lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "mul")
    return apply_op("mul", (a, b), a.data * b.data,
                    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return apply_op("scale", (a,), a.data * a.dtype.type(c), lambda g: (g * a.dtype.type(c),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return apply_op("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return apply_op("sigmoid", (a,), s, lambda g: (g * s * (1 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return apply_op("silu", (a,), a.data * s, lambda g: (g * s * (1 + a.data * (1 - s)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def swiglu_gate(gate: Tensor, up: Tensor) -> Tensor:
    """silu(gate) * up, fused."""
    if gate.shape != up.shape:
        raise ShapeError(f"swiglu_gate: shapes {gate.shape} and {up.shape} differ")
    s = _sigmoid(gate.data)
    act = gate.data * s

    def bw(g):
        return g * up.data * s * (1 + gate.data * (1 - s)), g * act

    return apply_op("swiglu_gate", (gate, up), act * up.data, bw)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim == 2:
        out = a.data @ b.data

        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return apply_op("matmul", (a, b), out, bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    out = a.data @ b.data
    return apply_op("matmul", (a, b), out,
                    lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply_op("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return apply_op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return apply_op("index", (a,), np.array(out, copy=True), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise VocabularyError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise VocabularyError(f"token id out of range [0, {weight.shape[0]})")

    def bw(g):
        z = np.zeros_like(weight.data)
        np.add.at(z, ids, g)
        return (z,)

    return apply_op("embedding", (weight,), weight.data[ids], bw)


def repeat(a: Tensor, repeats: int, axis: int) -> Tensor:
    """np.repeat along ``axis``; gradient sums each group of copies."""
    axis = axis % a.ndim
    out = np.repeat(a.data, repeats, axis=axis)

    def bw(g):
        shp = a.shape[:axis] + (a.shape[axis], repeats) + a.shape[axis + 1:]
        return (g.reshape(shp).sum(axis=axis + 1),)

    return apply_op("repeat", (a,), out, bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return apply_op("concat", tuple(tensors), out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return apply_op("sum", (a,), np.asarray(out, dtype=a.dtype), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# reductions used by losses


def _lse(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    return (np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m).squeeze(axis)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"logsumexp over an empty axis (shape {a.shape})")
    out = _lse(a.data, axis)

    def bw(g):
        p = np.exp(a.data - np.expand_dims(out, axis))
        return (p * np.expand_dims(g, axis),)

    return apply_op("logsumexp", (a,), out, bw)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise max-shifted log-sum-exp of an ``m x n`` matrix."""
    if x.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"logsumexp_rows needs a non-empty m x n matrix, got {x.shape}")
    return logsumexp(x, axis=-1)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax(a.data, axis)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return apply_op("softmax", (a,), y, bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """gain * x / sqrt(mean(x^2) + eps) over the last axis."""
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match {x.shape}")
    d = x.shape[-1]
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + x.dtype.type(eps))
    xhat = x.data * r

    def bw(g):
        u = g * gain.data
        gx = r * u - xhat * (r * np.sum(u * xhat, axis=-1, keepdims=True) / d)
        return gx, _unbroadcast(g * xhat, gain.shape)

    return apply_op("rms_norm", (x, gain), xhat * gain.data, bw)


def rope(x: Tensor, positions, theta: float) -> Tensor:
    """Rotate consecutive pairs of the last axis by ``pos * theta**(-2i/d)``.

    ``x`` has shape ``(..., T, d)`` with ``d`` even; ``positions`` has length T.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rope needs an even head dimension, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[-2],):
        raise ShapeError(f"rope: {pos.shape[0] if pos.ndim else 0} positions for length {x.shape[-2]}")
    freqs = theta ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos[:, None] * freqs[None, :]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    x0, x1 = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def bw(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return apply_op("rope", (x,), out, bw)


def cross_entropy_from_logits(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean over non-ignored rows of ``logsumexp(logits) - logits[target]``."""
    c = logits.shape[-1]
    flat = logits.data.reshape(-1, c)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {tgt.shape[0]} targets for {flat.shape[0]} rows")
    valid = np.ones_like(tgt, dtype=bool) if ignore_index is None else tgt != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise SupervisionError("no supervised positions")
    t = tgt[valid]
    if t.min() < 0 or t.max() >= c:
        raise LabelIndexError(f"target out of range [0, {c})")
    rows = flat[valid]
    lse = _lse(rows, -1)
    picked = rows[np.arange(n), t]
    loss = np.asarray(np.mean(lse - picked), dtype=logits.dtype)

    def bw(g):
        p = np.exp(rows - lse[:, None])
        p[np.arange(n), t] -= 1
        full = np.zeros_like(flat)
        full[valid] = p * (g / n)
        return (full.reshape(logits.shape),)

    return apply_op("cross_entropy", (logits,), loss, bw)


# ---------------------------------------------------------------------------


def finite_diff_check(f, x: Tensor, eps: float = 1e-5, coords=None) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    base = x.data.copy()
    xt = Tensor(base.copy(), requires_grad=True, dtype=base.dtype)
    with Tape() as tape:
        y = f(xt)
    if y.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got shape {y.shape}")
    if not np.all(np.isfinite(y.data)):
        raise NumericError("f(x) is not finite")
    if y.requires_grad:
        backward(y, tape)
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    flat_idx = range(base.size) if coords is None else coords
    worst = 0.0
    for i in flat_idx:
        probe = base.copy().reshape(-1)
        probe[i] += eps
        fp = float(f(Tensor(probe.reshape(base.shape), dtype=base.dtype)).data)
        probe[i] -= 2 * eps
        fm = float(f(Tensor(probe.reshape(base.shape), dtype=base.dtype)).data)
        central = (fp - fm) / (2 * eps)
        err = abs(float(analytic.reshape(-1)[i]) - central) / (abs(central) + 1e-8)
        worst = max(worst, err)
    return worst
