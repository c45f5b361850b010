"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operations the reranker needs: (batched) matrix
multiplication, bias/residual adds, relu, embedding gather, scaled
softmax, layer normalization, a few reductions, and a stable softplus
for the pairwise loss. Values are numpy arrays in a configurable 32- or
64-bit precision; 64-bit is used for finite-difference gradient checks.

Each operation records its parents and a backward closure on the output
tensor when any input requires gradients. ``backward`` walks the graph in
reverse topological order, so gradient accumulation is deterministic.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FLOAT32 = np.dtype("<f4")
FLOAT64 = np.dtype("<f8")

_MAGIC = b"CKPTENS1"
_VERSION = 1


class Tensor:
    """A value array plus optional gradient slot and graph record."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(
        self,
        value: np.ndarray | float | Sequence,
        requires_grad: bool = False,
        dtype: np.dtype = FLOAT64,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        if isinstance(value, np.ndarray):
            self.value = value
        else:
            self.value = np.asarray(value, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def param(value: np.ndarray) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.ascontiguousarray(value), requires_grad=True)


def constant(value: np.ndarray | float, dtype: np.dtype = FLOAT64) -> Tensor:
    """A leaf tensor that never receives gradients."""
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def _make(value: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor(value, requires_grad=True, parents=inputs, backward_fn=backward_fn)
    return Tensor(value)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor, ta: bool = False, tb: bool = False) -> Tensor:
    """Matrix product of 2-D tensors or batched 3-D tensors.

    ``ta``/``tb`` transpose the last two axes of the respective operand.
    Batched operands must share the leading batch dimension; there is no
    implicit broadcasting.
    """
    av, bv = a.value, b.value
    if av.ndim != bv.ndim or av.ndim not in (2, 3):
        raise ValueError(f"matmul needs two 2-D or two 3-D tensors, got {av.shape} and {bv.shape}")
    if av.ndim == 3 and av.shape[0] != bv.shape[0]:
        raise ValueError(f"batch dims differ: {av.shape} vs {bv.shape}")
    left = _swap(av) if ta else av
    right = _swap(bv) if tb else bv
    if left.shape[-1] != right.shape[-2]:
        raise ValueError(f"inner dims differ: {av.shape} (ta={ta}) vs {bv.shape} (tb={tb})")
    out = np.matmul(left, right)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            da = np.matmul(g, _swap(right))
            a.accumulate_grad(_swap(da) if ta else da)
        if b.requires_grad:
            db = np.matmul(_swap(left), g)
            b.accumulate_grad(_swap(db) if tb else db)

    return _make(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a 1-D bias over the last dimension."""
    av, bv = a.value, b.value
    bias = bv.ndim == 1 and av.ndim > 1
    if not bias and av.shape != bv.shape:
        raise ValueError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    if bias and av.shape[-1] != bv.shape[0]:
        raise ValueError(f"bias add shape mismatch: {av.shape} vs {bv.shape}")
    out = av + bv

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            if bias:
                b.accumulate_grad(g.reshape(-1, bv.shape[0]).sum(axis=0))
            else:
                b.accumulate_grad(g)

    return _make(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ValueError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = a.value - b.value

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.value.shape != b.value.shape:
        raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = a.value * b.value

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.value)
        if b.requires_grad:
            b.accumulate_grad(g * a.value)

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.value * c

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(g * c)

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.value, 0.0)

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(g * (a.value > 0.0))

    return _make(out, (a,), backward)


def gather(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup into a 2-D table, the embedding primitive."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ValueError(f"gather table must be 2-D, got {table.value.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise ValueError(f"gather ids out of range for table of {table.value.shape[0]} rows")
    out = table.value[idx]

    def backward(g: np.ndarray) -> None:
        dt = np.zeros_like(table.value)
        np.add.at(dt, idx, g)
        table.accumulate_grad(dt)

    return _make(out, (table,), backward)


def _softmax(x: np.ndarray, scale_by: float) -> np.ndarray:
    z = x / scale_by
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(y: np.ndarray, g: np.ndarray, scale_by: float) -> np.ndarray:
    inner = (g * y).sum(axis=-1, keepdims=True)
    return y * (g - inner) / scale_by


def softmax_rows(a: Tensor, scale_by: float = 1.0) -> Tensor:
    """Row-wise softmax of a 2-D tensor divided by ``scale_by``.

    Numerically stabilized by row-max subtraction; rows of the output sum
    to 1.
    """
    if a.value.ndim != 2:
        raise ValueError(f"softmax_rows needs a 2-D tensor, got {a.value.shape}")
    if scale_by <= 0.0:
        raise ValueError("scale must be positive")
    out = _softmax(a.value, scale_by)

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(_softmax_backward(out, g, scale_by))

    return _make(out, (a,), backward)


def softmax_lastdim(a: Tensor, scale_by: float = 1.0) -> Tensor:
    """Softmax along the last axis of a batched 3-D tensor."""
    if a.value.ndim != 3:
        raise ValueError(f"softmax_lastdim needs a 3-D tensor, got {a.value.shape}")
    if scale_by <= 0.0:
        raise ValueError("scale must be positive")
    out = _softmax(a.value, scale_by)

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(_softmax_backward(out, g, scale_by))

    return _make(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last dimension, then scale and shift."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    x = a.value
    d = x.shape[-1]
    if gamma.value.shape != (d,) or beta.value.shape != (d,):
        raise ValueError(f"gamma/beta must have shape ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.value
            da = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            a.accumulate_grad(da)

    return _make(out, (a, gamma, beta), backward)


def split_heads(a: Tensor, n: int) -> Tensor:
    """Reshape (m, d) into per-head batches (n, m, d // n)."""
    m, d = a.value.shape
    if d % n != 0:
        raise ValueError(f"feature dim {d} not divisible by {n} heads")
    out = np.ascontiguousarray(a.value.reshape(m, n, d // n).transpose(1, 0, 2))

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(g.transpose(1, 0, 2).reshape(m, d))

    return _make(out, (a,), backward)


def merge_heads(a: Tensor) -> Tensor:
    """Concatenate per-head batches (n, m, dh) back into (m, n*dh)."""
    n, m, dh = a.value.shape
    out = np.ascontiguousarray(a.value.transpose(1, 0, 2).reshape(m, n * dh))

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(np.ascontiguousarray(g.reshape(m, n, dh).transpose(1, 0, 2)))

    return _make(out, (a,), backward)


def tile_batch(a: Tensor, n: int) -> Tensor:
    """Repeat a 2-D tensor n times along a new leading batch axis."""
    out = np.broadcast_to(a.value, (n,) + a.value.shape).copy()

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(g.sum(axis=0))

    return _make(out, (a,), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.value[start:stop].copy()

    def backward(g: np.ndarray) -> None:
        da = np.zeros_like(a.value)
        da[start:stop] = g
        a.accumulate_grad(da)

    return _make(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.value.sum())

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(np.full_like(a.value, g))

    return _make(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    size = a.value.size
    out = np.asarray(a.value.mean())

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(np.full_like(a.value, g / size))

    return _make(out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g: np.ndarray) -> None:
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        a.accumulate_grad(g * sig)

    return _make(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return mul(a, constant(keep.astype(a.value.dtype)))


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into the ``grad`` slot of every tensor on the
    path that requires them; leaf gradients add up across calls until
    cleared.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and (p.parents or p.requires_grad):
                stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.value))
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Versioned binary checkpoint with byte-exact round trip.

    Header: magic, version, precision in bytes. Body: per tensor, the
    utf-8 name, the shape, and raw little-endian values. All tensors must
    share one precision.
    """
    arrays = {
        name: (t.value if isinstance(t, Tensor) else np.asarray(t)) for name, t in params.items()
    }
    itemsizes = {a.dtype.itemsize for a in arrays.values()}
    if len(itemsizes) > 1:
        raise ValueError("checkpoint tensors must share one precision")
    prec = itemsizes.pop() if itemsizes else 8
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IBI", _VERSION, prec, len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=FLOAT32 if prec == 4 else FLOAT64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}q", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into name -> array, preserving precision."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, prec, count = struct.unpack("<IBI", fh.read(9))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dtype = FLOAT32 if prec == 4 else FLOAT64
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(n * prec), dtype=dtype).reshape(shape).copy()
            out[name] = arr
    return out
