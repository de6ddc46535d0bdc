"""Reverse-mode autodiff on numpy buffers.

A Tensor wraps a float32/float64 ndarray and records the computation graph
whenever an input requires gradients. Kernels are plain numpy; everything is
single-threaded and bitwise deterministic for fixed inputs. Every forward op
checks its output for non-finite values unless the check is disabled.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class NumericsError(Exception):
    pass


class ShapeError(NumericsError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class DtypeError(NumericsError):
    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(NumericsError):
    """Raised when a forward op produces NaN or Inf and checks are on."""

    def __init__(self, op: str):
        super().__init__(f"{op}: non-finite values in output")
        self.op = op


class BackwardError(NumericsError):
    pass


_grad_enabled = True
_finite_checks = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Debug switch for the non-finite output check."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _finite_checks:
        # single-pass probe: the float64 sum is non-finite iff data holds
        # nan/inf (float32 finites cannot overflow a float64 accumulator)
        if not np.isfinite(data.sum(dtype=np.float64)):
            raise NonFiniteError(op)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = "leaf"
        self._done = False

    # -- construction ------------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple, op: str, backward_fn) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        out._done = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"tensor has {self.data.size} elements")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar loss, accumulating into .grad fields."""
        if self.data.size != 1:
            raise BackwardError("backward: loss must be scalar")
        if self._done:
            raise BackwardError("backward: called twice on the same graph without reset")
        self._done = True
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                # free intermediate grads/graph as we go; leaves keep grads
                node._backward_fn = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, e):
        return power(self, e)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_check(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise DtypeError(op, f"dtype mismatch: {a.dtype} vs {b.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops --------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    _binary_check("add", a, b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), "add", bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    _binary_check("sub", a, b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(out_data, (a, b), "sub", bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    _binary_check("mul", a, b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), "mul", bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("div", a, b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out_data, (a, b), "div", bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(-g)

    return Tensor._from_op(-a.data, (a,), "neg", bwd)


def power(a: Tensor, e: float) -> Tensor:
    e = float(e)
    out_data = a.data**e

    def bwd(g):
        a._accumulate(g * e * a.data ** (e - 1.0))

    return Tensor._from_op(out_data, (a,), "power", bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out_data)

    return Tensor._from_op(out_data, (a,), "exp", bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return Tensor._from_op(out_data, (a,), "log", bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        a._accumulate(g * 0.5 / out_data)

    return Tensor._from_op(out_data, (a,), "sqrt", bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor._from_op(out_data, (a,), "tanh", bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    th = np.tanh(c * (x + 0.044715 * (x2 * x)))
    half_one_plus = 0.5 * (1.0 + th)
    out_data = x * half_one_plus

    def bwd(g):
        d = half_one_plus + (0.5 * c) * x * (1.0 - th * th) * (1.0 + 0.134145 * x2)
        a._accumulate(g * d)

    return Tensor._from_op(out_data, (a,), "gelu", bwd)


# -- structural ops ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise DtypeError("matmul", f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    # fast path for the ubiquitous [..., k] @ [k, n] layer case: one flat gemm
    flat_weight = b.ndim == 2 and a.ndim >= 2
    if flat_weight:
        out_data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if flat_weight:
            g2 = g.reshape(-1, b.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g2)
            return
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._from_op(out_data, (a, b), "matmul", bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None

    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._from_op(out_data, (a,), "reshape", bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} invalid for ndim {a.ndim}")
    out_data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        a._accumulate(g.transpose(inv))

    return Tensor._from_op(out_data, (a,), "transpose", bwd)


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat", "empty tensor list")
    dt = tensors[0].dtype
    for t in tensors:
        if t.dtype != dt:
            raise DtypeError("concat", "mixed dtypes")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("concat", str(e)) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._from_op(out_data, tuple(tensors), "concat", bwd)


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out_data = np.pad(a.data, widths)

    def bwd(g):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(before, before + a.shape[axis])
        a._accumulate(g[tuple(idx)])

    return Tensor._from_op(out_data, (a,), "pad_axis", bwd)


def slice_(a: Tensor, key) -> Tensor:
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, np.integer, slice)):
            raise ShapeError("slice", f"unsupported index {k!r}; use ints and slices")
    out_data = a.data[key]

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        a._accumulate(buf)

    return Tensor._from_op(out_data, (a,), "slice", bwd)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take", "indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("take", f"index out of range for axis 0 of size {a.shape[0]}")
    out_data = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    return Tensor._from_op(out_data, (a,), "take", bwd)


def add_rows(base: Tensor, indices: np.ndarray, rows: Tensor) -> Tensor:
    """out = base with rows[i] added at position indices[i] (axis 0)."""
    idx = np.asarray(indices)
    if rows.shape[0] != idx.shape[0]:
        raise ShapeError("add_rows", f"{rows.shape[0]} rows for {idx.shape[0]} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise ShapeError("add_rows", "index out of range")
    out_data = base.data.copy()
    np.add.at(out_data, idx, rows.data)

    def bwd(g):
        if base.requires_grad:
            base._accumulate(g)
        if rows.requires_grad:
            rows._accumulate(g[idx])

    return Tensor._from_op(out_data, (base, rows), "add_rows", bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data, dtype=a.dtype)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return Tensor._from_op(out_data, (a,), "sum", bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- neural-net primitives ----------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("softmax", f"axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return Tensor._from_op(out_data, (a,), "softmax", bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("log_softmax", f"axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def bwd(g):
        a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out_data, (a,), "log_softmax", bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (pre-affine)."""
    if a.ndim < 1:
        raise ShapeError("layer_norm", "needs at least one axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = (xc * inv).astype(a.dtype)

    def bwd(g):
        n = a.shape[-1]
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - out_data * (g * out_data).mean(axis=-1, keepdims=True))
        a._accumulate(gx.astype(a.dtype))
        del n

    return Tensor._from_op(out_data, (a,), "layer_norm", bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding", "ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"id out of range for vocab {table.shape[0]}")
    return take(table, ids)


_MASK_CACHE: dict = {}


def causal_bias(n: int, dtype) -> np.ndarray:
    """Additive [n, n] bias: 0 on/below the diagonal, a large negative above."""
    key = (n, np.dtype(dtype).str)
    if key not in _MASK_CACHE:
        m = np.zeros((n, n), dtype=dtype)
        m[np.triu_indices(n, k=1)] = -1e30
        _MASK_CACHE[key] = m
    return _MASK_CACHE[key]


def attention(q: Tensor, k: Tensor, v: Tensor, *, causal: bool = False, bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    q: [..., Lq, dh], k: [..., Lk, dh], v: [..., Lk, dv]. `bias` is an additive
    mask broadcastable to [..., Lq, Lk]; `causal` adds the triangular bias.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention", f"q/k feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", f"k/v lengths differ: {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, swap_axes(k, -1, -2)), scale)
    if causal:
        if q.shape[-2] != k.shape[-2]:
            raise ShapeError("attention", "causal mask needs Lq == Lk")
        scores = add(scores, Tensor(causal_bias(q.shape[-2], q.dtype)))
    if bias is not None:
        scores = add(scores, Tensor(np.asarray(bias, dtype=q.dtype)))
    return matmul(softmax(scores, axis=-1), v)


def l2_normalize(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Unit-normalize over the last axis."""
    sq = sum_(mul(a, a), axis=-1, keepdims=True)
    return div(a, sqrt(add(sq, Tensor(np.asarray(eps, dtype=a.dtype)))))


# -- losses -------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood. logits [N, V], integer targets [N]."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", f"logits must be [N, V], got {logits.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy", f"targets shape {t.shape} does not match logits {logits.shape}")
    if t.dtype.kind not in "iu":
        raise ShapeError("cross_entropy", "targets must be integers")
    n, vocab = logits.shape
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise ShapeError("cross_entropy", f"target id out of range for vocab {vocab}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out_data = np.asarray(-logp[np.arange(n), t].mean(), dtype=logits.dtype)

    def bwd(g):
        probs = np.exp(logp)
        probs[np.arange(n), t] -= 1.0
        logits._accumulate(probs * (g / n))

    return Tensor._from_op(out_data, (logits,), "cross_entropy", bwd)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    target = _lift(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError("mse", f"shape mismatch: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))
