"""Parameter containers with stable dotted names."""
from __future__ import annotations

import math

import numpy as np

from .nn import MASK_FILL, affine, dropout, layer_norm, scaled_dot_attention
from .rng import RngStream
from .tensor import DimensionError, Parameter, Tensor, relu


class Module:
    """Base class: parameters and submodules are discovered from attributes in
    assignment order, so names and iteration order are deterministic."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise KeyError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier_uniform(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngStream):
        self.weight = Parameter(xavier_uniform(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        return affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def key_mask_bias(mask) -> np.ndarray | None:
    """Additive attention bias [B,1,1,Lk] from a boolean key mask (True = real key)."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 0.0, MASK_FILL)[:, None, None, :]


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: RngStream):
        if heads < 1 or d % heads:
            raise ValueError(f"hidden size {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng.child("q"))
        self.k = Linear(d, d, rng.child("k"))
        self.v = Linear(d, d, rng.child("v"))
        self.o = Linear(d, d, rng.child("o"))

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def attend(self, query, key, value, key_mask=None, return_weights: bool = False):
        """Attention core before the output projection: [B,Lq,d] from [B,Lk,d] keys."""
        if key.shape[1] == 0:
            raise DimensionError("attention over an empty key set")
        Q, K, V = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        out, weights = scaled_dot_attention(Q, K, V, key_mask_bias(key_mask), return_weights=True)
        B, H, Lq, dh = out.shape
        out = out.transpose(0, 2, 1, 3).reshape(B, Lq, H * dh)
        return (out, weights) if return_weights else out

    def __call__(self, query, key, value, key_mask=None) -> Tensor:
        return self.o(self.attend(query, key, value, key_mask))


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: RngStream):
        self.inner = Linear(d, hidden, rng.child("inner"))
        self.outer = Linear(hidden, d, rng.child("outer"))

    def __call__(self, x, rate: float = 0.0, rng=None, training: bool = False) -> Tensor:
        return self.outer(dropout(relu(self.inner(x)), rate, rng, training))
