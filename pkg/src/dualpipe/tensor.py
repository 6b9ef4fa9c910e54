"""Reverse-mode autodiff over numpy arrays, restricted to the ops this model needs.

Tensors wrap float32 (training) or float64 (gradient-check) arrays. Every op
validates finiteness of its result: NaN/Inf anywhere is a hard error, never a
silent value. Graph edges are only recorded when an input requires gradients,
so frozen-weight computations carry no tape and gradients with respect to
frozen tensors are never computed at all.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

# Module-level switch; gradcheck and unit tests rely on it staying on.
FINITE_CHECKS = True

_ALLOWED_DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """An immutable-once-built array node in the computation graph.

    `data` is row-major float32/float64. `grad` accumulates during backward()
    and is only ever allocated for tensors with requires_grad=True or tensors
    on a path between such a leaf and the loss.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None,
                 _op: str = "tensor"):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        _check_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    # -- graph --------------------------------------------------------------

    def _needs(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def _accumulate(self, g: np.ndarray) -> None:
        if not (self.requires_grad or self._parents):
            return
        if self.grad is None:
            # copy: g may be shared with another parent's accumulation
            self.grad = np.array(g, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar; accumulates into .grad of leaves."""
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and (p.requires_grad or p._parents):
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)


def as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    """A trainable leaf tensor. dtype=None keeps float32/float64 inputs as-is
    (other dtypes become float32)."""
    arr = np.asarray(data) if dtype is None else np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=True)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _result(data: np.ndarray, parents, backward, op: str) -> Tensor:
    track = any(p.requires_grad or p._parents for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + b

        def bw_scalar(g):
            a._accumulate(g)

        return _result(out, (a,), bw_scalar, "add")
    out = a.data + b.data

    def bw(g):
        if a._needs():
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b._needs():
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(out, (a, b), bw, "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data * b

        def bw_scalar(g):
            a._accumulate(g * b)

        return _result(out, (a,), bw_scalar, "mul")
    out = a.data * b.data

    def bw(g):
        if a._needs():
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b._needs():
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def bw(g):
        a._accumulate(2.0 * a.data * g)

    return _result(out, (a,), bw, "square")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.dtype != b.data.dtype:
        raise DimensionError("matmul dtype mismatch")
    if a.data.ndim == 0 or b.data.ndim == 0 or a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a._needs():
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b._needs():
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _result(out, (a, b), bw, "matmul")


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _result(out, (a,), bw, "transpose")


def tslice(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    return _result(out, (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return _result(out, tuple(tensors), bw, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _result(out, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# -- nonlinearities -----------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out * out))

    return _result(out, (a,), bw, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        a._accumulate(g * out * (1.0 - out))

    return _result(out, (a,), bw, "sigmoid")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a._accumulate((g * (cdf + x * pdf)).astype(x.dtype))

    return _result(out, (a,), bw, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out)

    return _result(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _result(out, (a,), bw, "log")


# -- fused layers -------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. `mask` is a boolean array (True = keep),
    broadcastable to `a`; masked positions get exactly zero probability."""
    x = a.data
    if mask is not None:
        neg = np.asarray(-1e30, dtype=x.dtype)
        x = np.where(mask, x, neg)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    if np.any(denom == 0.0):
        raise DimensionError("softmax over fully-masked axis")
    out = e / denom

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate((out * (g - dot)).astype(a.data.dtype))

    return _result(out, (a,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance,
    then apply the affine transform gamma * xhat + beta."""
    d = x.data.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad or gamma._parents:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad or beta._parents:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad or x._parents:
            gh = g * gamma.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((term * inv).astype(x.data.dtype))

    return _result(out, (x, gamma, beta), bw, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; ids is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DimensionError(f"embedding id out of range [0, {table.data.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accumulate(full)

    return _result(out, (table,), bw, "embedding")


def log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-numpy log-softmax for inference paths (no tape)."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean token-level cross entropy. `logits` is [N, V], `targets` [N] int;
    positions equal to ignore_index contribute nothing."""
    t = np.asarray(targets)
    if logits.data.ndim != 2 or t.shape != (logits.data.shape[0],):
        raise DimensionError(f"cross_entropy shapes {logits.shape} vs targets {t.shape}")
    keep = t != ignore_index
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise DimensionError("cross_entropy with all targets ignored")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe_t = np.where(keep, t, 0)
    picked = logp[np.arange(x.shape[0]), safe_t]
    loss = -(picked * keep).sum() / n_keep
    out = np.asarray(loss, dtype=x.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(x.shape[0]), safe_t] -= 1.0
        p *= (keep[:, None] * (float(g) / n_keep)).astype(x.dtype)
        logits._accumulate(p)

    return _result(out, (logits,), bw, "cross_entropy")


# -- LoRA ---------------------------------------------------------------------


def lora_linear(x: Tensor, w: Tensor, adapter) -> Tensor:
    """y = x @ W, plus the scaled low-rank branch (alpha/r) * (x @ A) @ B when
    the adapter has rank > 0. Weights are stored input-major: W is
    [d_in, d_out], A is [d_in, r], B is [r, d_out]."""
    base = matmul(x, w)
    if adapter is None or adapter.rank == 0:
        return base
    branch = matmul(matmul(x, adapter.a), adapter.b)
    return add(base, mul(branch, adapter.alpha / adapter.rank))


__all__ = [
    "Tensor", "NonFiniteError", "DimensionError", "as_tensor", "parameter",
    "add", "mul", "square", "matmul", "reshape", "transpose", "tslice",
    "concat", "tsum", "tmean", "tanh", "sigmoid", "gelu", "exp", "log",
    "softmax", "layer_norm", "embedding", "cross_entropy", "lora_linear",
    "log_softmax_np",
]
