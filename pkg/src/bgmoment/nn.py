"""Layer building blocks on top of the autodiff tensors."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


class Module:
    """Minimal parameter container; submodules and parameters are found by attribute scan."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = ad.parameter(xavier_uniform(rng, d_in, d_out))
        self.bias = ad.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects width {self.d_in}, got input of shape {x.shape}")
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = ad.parameter(np.ones(d))
        self.beta = ad.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, dropout: float = 0.0):
        if len(dims) < 2:
            raise ContractError("MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.dropout(ad.relu(x), self.dropout, self.rng, self.training)
        return x


class MultiheadAttention(Module):
    """Scaled dot-product attention with separate query/key and value widths.

    ``d_qk`` is the width of the incoming queries and keys; ``d_v`` the width of
    values and of the output.  Both must split evenly across heads.
    """

    def __init__(self, d_qk: int, d_v: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if d_qk % heads or d_v % heads:
            raise ContractError(f"widths {d_qk}/{d_v} not divisible by {heads} heads")
        self.heads = heads
        self.d_qk, self.d_v = d_qk, d_v
        self.q_proj = Linear(d_qk, d_qk, rng)
        self.k_proj = Linear(d_qk, d_qk, rng)
        self.v_proj = Linear(d_v, d_v, rng)
        self.out_proj = Linear(d_v, d_v, rng)
        self.dropout = dropout
        self.rng = rng
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor, width: int) -> Tensor:
        b, n, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, n, self.heads, width // self.heads)), (0, 2, 1, 3))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """q: (B, Nq, d_qk); k: (B, Nk, d_qk); v: (B, Nk, d_v); key_mask: (B, Nk) True where valid."""
        b, nq, _ = q.shape
        qh = self._split(self.q_proj(q), self.d_qk)
        kh = self._split(self.k_proj(k), self.d_qk)
        vh = self._split(self.v_proj(v), self.d_v)
        scale = 1.0 / math.sqrt(self.d_qk // self.heads)
        logits = ad.matmul(qh, ad.swapaxes(kh, -1, -2)) * scale
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -np.inf)[:, None, None, :]
            logits = logits + bias
        attn = ad.softmax(logits, axis=-1)
        self.last_attention = attn.data
        attn = ad.dropout(attn, self.dropout, self.rng, self.training)
        out = ad.matmul(attn, vh)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, nq, self.d_v))
        return self.out_proj(out)


def sine_embed(x: np.ndarray, width: int, temperature: float = 10000.0, max_cycles: float = 32.0) -> np.ndarray:
    """Fixed sinusoidal embedding of normalized positions.

    Channel pair k uses angular rate 2*pi*max_cycles / temperature**(2k/width);
    even channels hold the sine, odd channels the cosine.
    """
    if width % 2:
        raise ContractError(f"sinusoidal width must be even, got {width}")
    x = np.asarray(x, dtype=np.float64)
    k = np.arange(width) // 2
    rates = 2.0 * math.pi * max_cycles / temperature ** (2.0 * k / width)
    angles = x[..., None] * rates
    out = np.empty(angles.shape)
    out[..., 0::2] = np.sin(angles[..., 0::2])
    out[..., 1::2] = np.cos(angles[..., 1::2])
    return out


def sine_embed_t(x: Tensor, width: int, temperature: float = 10000.0, max_cycles: float = 32.0) -> Tensor:
    """Differentiable variant of :func:`sine_embed` for learnable positions."""
    k = np.arange(width) // 2
    rates = 2.0 * math.pi * max_cycles / temperature ** (2.0 * k / width)
    angles = ad.mul(ad.expand_dims(x, -1), rates)
    is_sin = (np.arange(width) % 2 == 0)
    return ad.where(np.broadcast_to(is_sin, angles.shape), ad.sin(angles), ad.cos(angles))

