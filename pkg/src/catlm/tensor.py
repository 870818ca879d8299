"""Minimal dense-tensor library with reverse-mode autodiff.

Tensors wrap numpy float arrays (float32 by default, float64 available as a
shadow mode for gradient checking). Each op records a backward closure on the
output; ``Tensor.backward()`` walks the graph in reverse topological order.
Graphs are rebuilt every forward pass and discarded after backward -- there
are no retained graphs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "EmptyAttentionRowError",
    "no_grad",
    "is_grad_enabled",
    "set_finite_checks",
    "matmul",
    "concat",
    "narrow",
    "take_rows",
    "embedding",
    "masked_softmax",
    "cross_entropy",
    "silu",
    "rmsnorm",
    "rope_rotate",
    "rope_tables",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN/Inf from finite inputs."""


class EmptyAttentionRowError(ValueError):
    """A softmax row had no allowed entries (fully masked)."""


_GRAD_ENABLED = True
_FINITE_CHECKS = True

FLOAT_DTYPES = (np.float32, np.float64)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval / generation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf screening of op outputs; returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    return prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


ArrayLike = Union["Tensor", np.ndarray, float, int, list]


class Tensor:
    """Dense float array with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=np.float32):
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in FLOAT_DTYPES:
            self.data = np.asarray(data)  # keep dtype; np scalars become 0-d arrays
        else:
            self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], tuple]] = None
        self._parents: tuple = ()
        self.name = name

    # -- basic introspection ---------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req}{nm})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autograd ----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from this scalar.

        Repeated calls without ``zero_grad`` accumulate into existing grads.
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    # -- operator sugar ------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor],
          backward: Optional[Callable], op: str, check: bool = False) -> Tensor:
    if check:
        _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED:
        tracked = tuple(p for p in parents if p._needs_grad())
        if tracked:
            out._parents = tracked
            out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        out = []
        if a._needs_grad():
            out.append((a, _unbroadcast(g, a.shape)))
        if b._needs_grad():
            out.append((b, _unbroadcast(g, b.shape)))
        return out

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        out = []
        if a._needs_grad():
            out.append((a, _unbroadcast(g, a.shape)))
        if b._needs_grad():
            out.append((b, _unbroadcast(-g, b.shape)))
        return out

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        out = []
        if a._needs_grad():
            out.append((a, _unbroadcast(g * b.data, a.shape)))
        if b._needs_grad():
            out.append((b, _unbroadcast(g * a.data, b.shape)))
        return out

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def bw(g):
        out = []
        if a._needs_grad():
            out.append((a, _unbroadcast(g / b.data, a.shape)))
        if b._needs_grad():
            out.append((b, _unbroadcast(-g * out_data / b.data, b.shape)))
        return out

    return _make(out_data, (a, b), bw, "div", check=True)


def power(a: ArrayLike, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = a.data ** p

    def bw(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return _make(out, (a,), bw, "pow", check=True)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return ((a, g * out),)

    return _make(out, (a,), bw, "exp", check=True)


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        return ((a, g / a.data),)

    return _make(out, (a,), bw, "log", check=True)


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        return ((a, g * 0.5 / out),)

    return _make(out, (a,), bw, "sqrt", check=True)


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return ((a, g * (1.0 - out * out)),)

    return _make(out, (a,), bw, "tanh")


def np_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) may overflow to inf for very negative x; 1/(1+inf) is a clean 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np_sigmoid(a.data)

    def bw(g):
        return ((a, g * out * (1.0 - out)),)

    return _make(out, (a,), bw, "sigmoid")


def np_silu(x: np.ndarray) -> np.ndarray:
    return x * np_sigmoid(x)


def silu(a: ArrayLike) -> Tensor:
    """x * sigmoid(x), the SwiGLU gate activation."""
    a = as_tensor(a)
    s = np_sigmoid(a.data)
    out = a.data * s

    def bw(g):
        return ((a, g * (s + a.data * s * (1.0 - s))),)

    return _make(out, (a,), bw, "silu")


# -- shape ops ---------------------------------------------------------------


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bw(g):
        return ((a, g.reshape(old)),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def bw(g):
        return ((a, g.transpose(inv)),)

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def swapaxes(a: ArrayLike, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return ((a, g.swapaxes(ax1, ax2)),)

    return _make(a.data.swapaxes(ax1, ax2), (a,), bw, "swapaxes")


def _expand_axes(g: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    if keepdims or axis is None:
        return g
    if isinstance(axis, int):
        return np.expand_dims(g, axis)
    return np.expand_dims(g, tuple(axis))


def reduce_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = _expand_axes(g, axis, keepdims)
        return ((a, np.broadcast_to(gg, a.shape).copy()),)

    return _make(out, (a,), bw, "sum")


def reduce_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        denom = a.data.size
    elif isinstance(axis, int):
        denom = a.data.shape[axis]
    else:
        denom = int(np.prod([a.data.shape[ax] for ax in axis]))

    def bw(g):
        gg = _expand_axes(g / denom, axis, keepdims)
        return ((a, np.broadcast_to(gg, a.shape).copy()),)

    return _make(out, (a,), bw, "mean")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        return [(p, pc) for p, pc in zip(parts, pieces) if p._needs_grad()]

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def narrow(a: ArrayLike, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return _make(a.data[idx].copy(), (a,), bw, "narrow")


def take_rows(a: ArrayLike, indices: np.ndarray, axis: int = -2) -> Tensor:
    """Gather rows along ``axis`` by integer index; backward scatter-adds."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ShapeError("take_rows expects a 1-D index array")
    ax = axis % a.ndim
    out = np.take(a.data, indices, axis=ax)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return ((a, full),)

    return _make(out, (a,), bw, "take_rows")


def assemble_rows(sources: Sequence[tuple["Tensor", np.ndarray]], length: int) -> Tensor:
    """Build a (..., length, D) tensor by placing each source's rows at indices.

    ``sources`` is a list of (tensor, positions) pairs; tensor rows along axis
    -2 land at the given positions of the output. Leading dims broadcast (a
    (1, 1, D) source fans out across the batch). Every output row must be
    covered exactly once. Backward slices the gradient back per source.
    """
    covered = np.concatenate([np.atleast_1d(pos) for _, pos in sources])
    if len(np.unique(covered)) != length or covered.size != length:
        raise ShapeError("assemble_rows: positions must cover each row exactly once")
    parts = [as_tensor(t) for t, _ in sources]
    positions = [np.asarray(pos, dtype=np.int64) for _, pos in sources]
    lead = np.broadcast_shapes(*[p.shape[:-2] for p in parts])
    d = parts[0].shape[-1]
    out = np.empty(lead + (length, d), dtype=parts[0].dtype)
    for p, pos in zip(parts, positions):
        out[..., pos, :] = p.data

    def bw(g):
        pairs = []
        for p, pos in zip(parts, positions):
            if p._needs_grad():
                pairs.append((p, _unbroadcast(g[..., pos, :], p.shape)))
        return pairs

    return _make(out, parts, bw, "assemble_rows")


def embedding(table: Tensor, token_ids: np.ndarray) -> Tensor:
    """Trainable lookup: rows of ``table`` (vocab, dim) selected by token id."""
    token_ids = np.asarray(token_ids)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): "
            f"min={token_ids.min()}, max={token_ids.max()}")
    out = table.data[token_ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, token_ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, full),)

    return _make(out, (table,), bw, "embedding")


# -- matmul ------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands >= 2-D."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        pairs = []
        if a._needs_grad():
            pairs.append((a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)))
        if b._needs_grad():
            if b.ndim == 2 and g.ndim > 2:
                # weight gradient: one flat gemm instead of a gemm per batch
                # element followed by a reduction
                gb = np.ascontiguousarray(a.data).reshape(-1, a.shape[-1]).T \
                    @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
            pairs.append((b, gb))
        return pairs

    return _make(out, (a, b), bw, "matmul", check=True)


# -- fused nn primitives -------------------------------------------------------


def masked_softmax(scores: ArrayLike, mask: np.ndarray,
                   neg_bias: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along the last axis restricted to ``mask`` (bool, broadcastable).

    Disallowed positions get exactly 0 probability; the row max is taken over
    allowed entries only. A row with no allowed entry raises
    EmptyAttentionRowError rather than returning NaN. ``neg_bias`` is an
    optional precomputed additive form of the mask (0 where allowed, -inf
    where not) that skips rebuilding it per call.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise EmptyAttentionRowError("empty attention row: a softmax row has no allowed entries")
    if neg_bias is None:
        neg_bias = np.where(mask, scores.dtype.type(0), scores.dtype.type(-np.inf))
    shifted = scores.data + neg_bias
    shifted -= shifted.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):  # -inf - -inf never occurs: rows non-empty
        probs = np.exp(shifted, out=shifted)
    probs /= probs.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * probs).sum(axis=-1, keepdims=True)
        return ((scores, probs * (g - dot)),)

    return _make(probs, (scores,), bw, "masked_softmax", check=True)


def cross_entropy(logits: ArrayLike, targets: np.ndarray,
                  loss_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood over positions where ``loss_mask`` is true.

    ``logits`` has shape (..., V) and ``targets`` the matching leading shape.
    Gradient flows only through unmasked positions.
    """
    logits = as_tensor(logits)
    vocab = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} != logits rows {logits.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    flat = logits.data.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    if loss_mask is None:
        m = np.ones(tgt.shape, dtype=bool)
    else:
        m = np.asarray(loss_mask, dtype=bool).reshape(-1)
        if m.shape != tgt.shape:
            raise ShapeError("loss_mask shape does not match targets")
    n_active = int(m.sum())
    if n_active == 0:
        raise ValueError("cross_entropy: loss_mask has no true entries")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    soft = np.exp(shifted)
    z = soft.sum(axis=-1, keepdims=True)
    soft /= z
    nll = np.log(z[:, 0]) - shifted[np.arange(flat.shape[0]), tgt]
    loss = np.asarray((nll * m).sum() / n_active, dtype=logits.dtype)

    def bw(g):
        gl = soft.copy()
        gl[np.arange(flat.shape[0]), tgt] -= 1.0
        gl *= (m / n_active)[:, None]
        return ((logits, (float(g) * gl).reshape(logits.shape).astype(logits.dtype)),)

    return _make(loss, (logits,), bw, "cross_entropy", check=True)


def np_rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * weight


def rmsnorm(x: ArrayLike, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square norm over the last axis with a learned scale."""
    x = as_tensor(x)
    d = x.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    out = x.data * inv * weight.data

    def bw(g):
        pairs = []
        if x._needs_grad():
            gx = g * weight.data * inv - x.data * inv ** 3 / d * \
                (g * weight.data * x.data).sum(axis=-1, keepdims=True)
            pairs.append((x, gx))
        if weight._needs_grad():
            gw = (g * x.data * inv).reshape(-1, d).sum(axis=0)
            pairs.append((weight, gw))
        return pairs

    return _make(out, (x, weight), bw, "rmsnorm")


def rope_tables(positions: np.ndarray, head_dim: int, base: float = 10000.0,
                dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (T, head_dim//2) for the given positions."""
    if head_dim % 2 != 0:
        raise ShapeError(f"rope requires an even head dim, got {head_dim}")
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(positions, inv_freq)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def np_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate adjacent feature pairs (2i, 2i+1); x is (..., T, head_dim)."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x: ArrayLike, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Differentiable rotary rotation; backward rotates by the negated angle."""
    x = as_tensor(x)
    out = np_rope(x.data, cos, sin)

    def bw(g):
        return ((x, np_rope(g, cos, -sin)),)

    return _make(out, (x,), bw, "rope")
