"""Dense row-major tensors with tape-based reverse-mode autodiff.

The op surface is exactly what the model stack needs: 2-D matmuls, bias
adds, layer norm, GELU, row softmax, embedding lookup, masked
cross-entropy, plus slice/concat/transpose for attention-head
bookkeeping. There is no general broadcasting; the only shape mismatch
an op tolerates is a 1-D bias added over the last axis.

Gradients are recorded on an explicit Tape. A tape is single-use: one
training step builds one tape, ``backward`` replays it once and consumes
it. Forward evaluation with no active tape records nothing and is safe
to run concurrently over shared weights.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

F32 = "f32"
F64 = "f64"

_NP_DTYPES = {F32: np.float32, F64: np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): F32, np.dtype(np.float64): F64}


class ShapeError(ValueError):
    """Operand shapes (or dtypes) do not satisfy an op's contract."""


class GradError(RuntimeError):
    """Backward pass invoked on an invalid loss/tape combination."""


class Tensor:
    """Dense array plus optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, dtype: str | None = None, requires_grad: bool = False):
        if dtype is None:
            # f32 is the compute default; an explicit f32/f64 ndarray keeps its dtype
            if isinstance(data, np.ndarray) and data.dtype in _DTYPE_NAMES:
                arr = data
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=_NP_DTYPES[dtype])
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind, inputs, out, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered op record for one forward pass; replayed once by backward().

    Usable as a context manager; ops executed inside the ``with`` block
    whose inputs require grad are recorded in topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise GradError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _record(kind: str, inputs: Sequence[Tensor], out: Tensor,
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and not tape.consumed and any(
            isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(kind, list(inputs), out, backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every tensor reaching ``loss``; consumes the tape."""
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise GradError("tape already consumed by a previous backward")
    if loss.tape is not tape:
        raise GradError("loss tensor is detached from this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        og = node.out.grad
        if og is None:
            continue
        grads = node.backward(og)
        for inp, g in zip(node.inputs, grads):
            if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = g.copy() if g.base is not None or g is og else g
            else:
                inp.grad = inp.grad + g
    tape.nodes.clear()
    tape.consumed = True


def _same_dtype(kind: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{kind}: mixed dtypes {sorted(dtypes)}")


# ---------------------------------------------------------------------------
# construction helpers

def zeros(shape, dtype: str = F32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_NP_DTYPES[dtype]))


def ones(shape, dtype: str = F32) -> Tensor:
    return Tensor(np.ones(shape, dtype=_NP_DTYPES[dtype]))


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(og):
        return og @ b.data.T, a.data.T @ og

    return _record("matmul", (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add, or 1-D bias broadcast over the last axis."""
    _same_dtype("add", a, b)
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)

        def bwd(og):
            return og, og

    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor(a.data + b.data)
        lead = tuple(range(a.data.ndim - 1))

        def bwd(og):
            return og, og.sum(axis=lead) if lead else og

    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _record("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(og):
        return og * b.data, og * a.data

    return _record("mul", (a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(s))

    def bwd(og):
        return (og * s,)

    return _record("scale", (a,), out, bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def bwd(og):
        return (np.full_like(a.data, og.reshape(())[()]),)

    return _record("sum_all", (a,), out, bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_erf = np.vectorize(math.erf)


def gelu(x: Tensor, exact: bool = False) -> Tensor:
    """GELU activation; tanh approximation by default, erf when exact."""
    xd = x.data
    if exact:
        phi = 0.5 * (1.0 + _erf(xd / math.sqrt(2.0)).astype(xd.dtype))
        out = Tensor(xd * phi)

        def bwd(og):
            pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
            return (og * (phi + xd * pdf),)

    else:
        u = _GELU_C * (xd + 0.044715 * xd ** 3)
        t = np.tanh(u)
        out = Tensor(0.5 * xd * (1.0 + t))

        def bwd(og):
            du = _GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd)
            return (og * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _record("gelu", (x,), out, bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(og):
        return ((og - (og * y).sum(axis=-1, keepdims=True)) * y,)

    return _record("softmax_rows", (x,), out, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine map."""
    _same_dtype("layer_norm", x, gain, bias)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs last extent >= 2, got {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    lead = tuple(range(x.data.ndim - 1))

    def bwd(og):
        dgain = (og * xhat).sum(axis=lead) if lead else og * xhat
        dbias = og.sum(axis=lead) if lead else og
        dxhat = og * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _record("layer_norm", (x, gain, bias), out, bwd)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    v = table.shape[0]
    for i, tid in enumerate(ids):
        if not 0 <= int(tid) < v:
            raise IndexError(f"token id {tid} at position {i} out of range [0, {v})")
    idx = np.asarray(list(ids), dtype=np.int64)
    out = Tensor(table.data[idx].copy())

    def bwd(og):
        g = np.zeros_like(table.data)
        np.add.at(g, idx, og)
        return (g,)

    return _record("embedding_lookup", (table,), out, bwd)


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean of -log softmax(logits)[t, targets[t]] over mask-true positions."""
    t_len, vocab = logits.shape
    if len(targets) != t_len or len(mask) != t_len:
        raise ShapeError(
            f"cross_entropy length mismatch: logits {t_len} rows, "
            f"{len(targets)} targets, {len(mask)} mask entries")
    m = np.asarray(list(mask), dtype=bool)
    if not m.any():
        raise ValueError("cross_entropy: mask excludes every position")
    tgt = np.asarray(list(targets), dtype=np.int64)
    if (tgt < 0).any() or (tgt >= vocab).any():
        bad = int(np.argmax((tgt < 0) | (tgt >= vocab)))
        raise IndexError(f"target id {tgt[bad]} at position {bad} out of range [0, {vocab})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lsm = shifted - lse
    n = int(m.sum())
    picked = lsm[np.arange(t_len), tgt]
    out = Tensor(np.asarray(-(picked * m).sum() / n, dtype=logits.data.dtype))

    def bwd(og):
        p = np.exp(lsm)
        g = p.copy()
        g[np.arange(t_len), tgt] -= 1.0
        g *= m[:, None].astype(g.dtype) / n
        g *= og.reshape(())[()]
        return (g,)

    return _record("cross_entropy", (logits,), out, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of one axis."""
    nd = x.data.ndim
    if axis < 0:
        axis += nd
    extent = x.shape[axis]
    if not (0 <= start and start + length <= extent):
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis {axis} of {x.shape}")
    sl = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(nd))
    out = Tensor(x.data[sl].copy())

    def bwd(og):
        g = np.zeros_like(x.data)
        g[sl] = og
        return (g,)

    return _record("narrow", (x,), out, bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    _same_dtype("concat", *parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    extents = [p.shape[axis] for p in parts]

    def bwd(og):
        grads = []
        off = 0
        for ext in extents:
            sl = tuple(slice(off, off + ext) if i == (axis % og.ndim) else slice(None)
                       for i in range(og.ndim))
            grads.append(og[sl])
            off += ext
        return tuple(grads)

    return _record("concat", tuple(parts), out, bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a 2-D tensor, got {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))

    def bwd(og):
        return (np.ascontiguousarray(og.T),)

    return _record("transpose2d", (x,), out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")
    out = Tensor(x.data.reshape(shape).copy())

    def bwd(og):
        return (og.reshape(x.data.shape),)

    return _record("reshape", (x,), out, bwd)


def rotate_pairs(x: Tensor) -> Tensor:
    """Rotate adjacent lanes 90 degrees along the last axis: (a, b) -> (-b, a)."""
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_pairs needs an even last extent, got {x.shape}")
    y = np.empty_like(x.data)
    y[..., 0::2] = -x.data[..., 1::2]
    y[..., 1::2] = x.data[..., 0::2]
    out = Tensor(y)

    def bwd(og):
        g = np.empty_like(og)
        g[..., 0::2] = og[..., 1::2]
        g[..., 1::2] = -og[..., 0::2]
        return (g,)

    return _record("rotate_pairs", (x,), out, bwd)
