"""Parameterised building blocks on top of the tensor ops."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = ""):
        seen: set[int] = set()
        yield from self._named(prefix, seen)

    def _named(self, prefix, seen):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name, seen):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        yield from value._named(name + ".", seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}", seen)


class Linear(Module):
    """y = x W + b with fan-in scaled uniform weights and zero bias."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02,
                 sparse: bool = False, dtype=np.float32):
        self.weight = Parameter(rng.normal(0.0, std, (n, dim)).astype(dtype), sparse=sparse)

    def forward(self, idx: np.ndarray) -> Tensor:
        return T.embedding(self.weight, idx)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.rms_norm(x, self.gain, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class CausalSelfAttention(Module):
    """Multi-head self-attention with a causal mask over ``[..., N, d]`` inputs."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 attn_dropout: float = 0.0, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)
        self.attn_dropout = attn_dropout
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = self.qkv(x).reshape(*lead, n, 3, h, dh)
        nl = len(lead)
        # -> [3, ..., h, n, dh]
        qkv = qkv.transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        y = T.causal_self_attention(q, k, v, dropout_p=self.attn_dropout, rng=self.rng,
                                    training=self.training)
        # [..., h, n, dh] -> [..., n, h*dh]
        y = y.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, d)
        return self.out(y)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then x + FFN(LN(x)) with GELU."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0,
                 attn_dropout: float = 0.0, ffn_mult: int = 4, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = CausalSelfAttention(dim, heads, rng, attn_dropout, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.ff1 = Linear(dim, ffn_mult * dim, rng, dtype=dtype)
        self.ff2 = Linear(ffn_mult * dim, dim, rng, dtype=dtype)
        self.dropout = dropout
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        x = x + T.dropout(self.attn(self.ln1(x)), self.dropout, self.rng, self.training)
        h = self.ff2(T.gelu(self.ff1(self.ln2(x))))
        return x + T.dropout(h, self.dropout, self.rng, self.training)
