"""Parameters, module tree, and the shared transformer building blocks."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter:
    """A named, optionally trainable tensor. Names are assigned hierarchically
    when the owning module tree is traversed."""

    __slots__ = ("tensor", "trainable", "name")

    def __init__(self, data: np.ndarray, trainable: bool = True):
        self.tensor = Tensor(np.asarray(data), requires_grad=trainable)
        self.tensor.grad = np.zeros_like(self.tensor.data)
        self.trainable = trainable
        self.name = ""

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.tensor.requires_grad = flag

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.tensor.shape}, trainable={self.trainable})"


class Module:
    """Minimal module tree: children and parameters are registered by attribute
    assignment, in insertion order, which fixes the traversal order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Parameter]:
        for key, p in self._params.items():
            p.name = f"{prefix}{key}"
            yield p
        for key, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.grad = np.zeros_like(p.tensor.data)

    def freeze(self) -> None:
        for p in self.parameters():
            p.set_trainable(False)

    def num_params(self) -> int:
        return sum(p.tensor.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self.mods = list(mods)
        for i, m in enumerate(self.mods):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self.mods)

    def __len__(self):
        return len(self.mods)

    def __getitem__(self, i):
        return self.mods[i]


def set_trainable_by_prefix(params: list[Parameter], prefixes: tuple[str, ...]) -> None:
    """Freeze everything, then unfreeze parameters whose name starts with a prefix."""
    for p in params:
        p.set_trainable(any(p.name.startswith(pre) for pre in prefixes))


def normal_init(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    """y = x @ W + b with W stored [in, out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, *, std: float | None = None,
                 bias: bool = True, zero_init: bool = False, dtype=np.float32):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = normal_init(rng, (d_in, d_out), std if std is not None else d_in**-0.5, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = T.add(y, self.bias.tensor)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x, eps=self.eps), self.gamma.tensor), self.beta.tensor)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, *, std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.table = Parameter(normal_init(rng, (vocab, dim), std, dtype))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table.tensor, ids)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., L, d] -> [..., heads, L, d/heads]"""
    *lead, L, d = x.shape
    x = T.reshape(x, (*lead, L, heads, d // heads))
    return T.swap_axes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., heads, L, dh] -> [..., L, heads*dh]"""
    x = T.swap_axes(x, -2, -3)
    *lead, L, h, dh = x.shape
    return T.reshape(x, (*lead, L, h * dh))


class MultiHeadAttention(Module):
    """Self- or cross-attention. For cross-attention pass `kv` (dim may differ)."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, *,
                 kv_dim: int | None = None, std: float = 0.02, dtype=np.float32):
        super().__init__()
        if d_model % heads != 0:
            raise T.ShapeError("attention", f"d_model {d_model} not divisible by heads {heads}")
        kv_dim = kv_dim if kv_dim is not None else d_model
        self.heads = heads
        self.wq = Linear(d_model, d_model, rng, std=std, dtype=dtype)
        self.wk = Linear(kv_dim, d_model, rng, std=std, dtype=dtype)
        self.wv = Linear(kv_dim, d_model, rng, std=std, dtype=dtype)
        self.wo = Linear(d_model, d_model, rng, std=std, dtype=dtype)

    def __call__(self, x: Tensor, kv: Tensor | None = None, *, causal: bool = False,
                 bias: np.ndarray | None = None) -> Tensor:
        src = kv if kv is not None else x
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(src), self.heads)
        v = _split_heads(self.wv(src), self.heads)
        if bias is not None and bias.ndim == 3:
            # per-batch bias [B, Lq, Lk] -> broadcast over heads
            bias = bias[:, None, :, :]
        out = T.attention(q, k, v, causal=causal, bias=bias)
        return self.wo(_merge_heads(out))


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator, *, std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(d_model, hidden, rng, std=std, dtype=dtype)
        self.fc2 = Linear(hidden, d_model, rng, std=std, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: self-attention, optional cross-attention, MLP."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, *,
                 mlp_ratio: int = 4, cross_dim: int | None = None, std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.attn = MultiHeadAttention(d_model, heads, rng, std=std, dtype=dtype)
        if cross_dim is not None:
            self.ln_x = LayerNorm(d_model, dtype=dtype)
            self.cross = MultiHeadAttention(d_model, heads, rng, kv_dim=cross_dim, std=std, dtype=dtype)
        else:
            self.cross = None
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.mlp = FeedForward(d_model, mlp_ratio * d_model, rng, std=std, dtype=dtype)

    def __call__(self, x: Tensor, *, causal: bool = False, cond: Tensor | None = None,
                 cond_bias: np.ndarray | None = None, ablate_cross: bool = False) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), causal=causal))
        if self.cross is not None and cond is not None and not ablate_cross:
            x = T.add(x, self.cross(self.ln_x(x), kv=cond, bias=cond_bias))
        return T.add(x, self.mlp(self.ln2(x)))
