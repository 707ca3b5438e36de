"""Parameter containers and layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, add, get_default_dtype, gelu


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


class Buffer(Tensor):
    """Non-trainable array saved with the module (e.g. fixed anchor points)."""
    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=False, dtype=dtype, name=name)


class Module:
    """Minimal module tree: attributes that are Parameters, Modules or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Buffer):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update((name, b.data.copy()) for name, b in self.named_buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, b in self.named_buffers():
            b.data = b.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.W = Parameter(_uniform(rng, (d_in, d_out), bound))
        self.b = Parameter(_uniform(rng, (d_out,), bound)) if bias else None

    def forward(self, x):
        return F.linear(x, self.W, self.b)


class MLP(Module):
    def __init__(self, dims: list[int], rng: np.random.Generator, activation=None):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation

    def forward(self, x):
        return F.mlp(x, [(l.W, l.b) for l in self.layers], self.activation)


class LayerNorm(Module):
    def __init__(self, d: int):
        dt = get_default_dtype()
        self.gain = Parameter(np.ones(d, dtype=dt))
        self.bias = Parameter(np.zeros(d, dtype=dt))

    def forward(self, x):
        return F.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d)).astype(get_default_dtype()))

    def forward(self, idx):
        return self.weight[np.asarray(idx, dtype=np.int64)]


class LSTM(Module):
    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_hidden)
        self.W_ih = Parameter(_uniform(rng, (d_in, 4 * d_hidden), bound))
        self.W_hh = Parameter(_uniform(rng, (d_hidden, 4 * d_hidden), bound))
        self.b = Parameter(_uniform(rng, (4 * d_hidden,), bound))

    def forward(self, seq):
        return F.recurrent_encode(seq, self.W_ih, self.W_hh, self.b)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def forward(self, query, key, value, mask=None):
        out = F.multihead_attention(self.q(query), self.k(key), self.v(value), mask, self.heads)
        return self.o(out)


class AttentionBlock(Module):
    """Pre-norm residual attention + feed-forward block.

    With ``context=None`` it is a self-attention encoder layer; otherwise the
    queries attend over ``context``.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ff_mult: int = 4):
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm_ff = LayerNorm(d)
        self.ff = MLP([d, ff_mult * d, d], rng, activation=gelu)

    def forward(self, x, context=None, mask=None):
        q = self.norm_q(x)
        kv = q if context is None else self.norm_kv(context)
        h = add(x, self.attn(q, kv, kv, mask))
        return add(h, self.ff(self.norm_ff(h)))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype)
    return total


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = (p.data - self.lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}
