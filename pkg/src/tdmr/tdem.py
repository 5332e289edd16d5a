"""Temporal dynamics: start token, first-difference tokenizer, text-guided
cross-attention for each branch, and the weighted fusion of the two branches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (
    DimensionError,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
    Parameter,
    RngStream,
    Tensor,
    add,
    as_tensor,
    concat,
    dropout,
    mul,
    sub,
)

ST_INIT_STD = 0.02


class EmptyTextError(ValueError):
    pass


class StartToken(Module):
    """Learnable vector standing in for the clip before the first one."""

    def __init__(self, dim: int, rng: RngStream):
        self.st = Parameter(rng.normal(size=dim, scale=ST_INIT_STD))

    @property
    def dim(self) -> int:
        return self.st.shape[0]


def tokenize_dynamics(video_tokens, st) -> Tensor:
    """First differences along the clip axis, with ``st`` as the predecessor of clip 0.

    Works on ``[L, D]`` or batched ``[B, L, D]`` input.  Differences that land on
    padded positions are meaningless and must be masked downstream.
    """
    v = as_tensor(video_tokens)
    st = st.st if isinstance(st, StartToken) else as_tensor(st)
    if v.shape[-2] < 1:
        raise DimensionError("tokenize_dynamics needs at least one clip")
    if v.shape[-1] != st.shape[-1]:
        raise DimensionError(f"start token has dim {st.shape[-1]}, clips have {v.shape[-1]}")
    lead = v.shape[:-2]
    D = v.shape[-1]
    prev = concat([np.zeros(lead + (1, D)), v[..., :-1, :]], axis=-2)
    first = np.zeros((v.shape[-2], 1))
    first[0, 0] = 1.0
    return sub(sub(v, prev), mul(first, st))


class TextInteraction(Module):
    """Pre-norm transformer layer whose queries come from one branch and whose
    keys and values come from the text."""

    def __init__(self, d: int, heads: int, ffn: int, rng: RngStream):
        self.norm_q = LayerNorm(d)
        self.norm_t = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng.child("attn"))
        self.norm_ff = LayerNorm(d)
        self.ffn = FeedForward(d, ffn, rng.child("ffn"))

    def __call__(self, tokens, text, text_mask=None, rate: float = 0.0, rng=None, training: bool = False):
        if text.shape[-2] == 0:
            raise EmptyTextError("text interaction needs at least one text token")
        t = self.norm_t(text)
        x = add(tokens, dropout(self.attn(self.norm_q(tokens), t, t, text_mask), rate, rng, training))
        return add(x, dropout(self.ffn(self.norm_ff(x), rate, rng, training), rate, rng, training))


def text_interact(tokens, text, heads: int, layer: TextInteraction | None = None, rng: RngStream | None = None):
    """Single-sample convenience wrapper: ``[L, d]`` tokens attend over ``[W, d]`` text."""
    tokens, text = as_tensor(tokens), as_tensor(text)
    if text.shape[0] == 0:
        raise EmptyTextError("text interaction needs at least one text token")
    d = tokens.shape[-1]
    if layer is None:
        layer = TextInteraction(d, heads, 4 * d, rng or RngStream(0))
    out = layer(tokens.reshape(1, *tokens.shape), text.reshape(1, *text.shape))
    return out.reshape(tokens.shape)


@dataclass(frozen=True)
class FusionConfig:
    beta: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def fuse(video_attended, dynamics_attended, cfg: FusionConfig) -> Tensor:
    """``beta * video + (1 - beta) * dynamics``; the endpoints return an input
    object unchanged so that they are exact rather than merely close."""
    video_attended = as_tensor(video_attended)
    if dynamics_attended is None:
        if cfg.beta != 1.0:
            raise ValueError("dynamics branch missing while beta < 1")
        return video_attended
    dynamics_attended = as_tensor(dynamics_attended)
    if video_attended.shape != dynamics_attended.shape:
        raise DimensionError(f"fusion shapes differ: {video_attended.shape} vs {dynamics_attended.shape}")
    if cfg.beta == 1.0:
        return video_attended
    if cfg.beta == 0.0:
        return dynamics_attended
    return add(mul(video_attended, cfg.beta), mul(dynamics_attended, 1.0 - cfg.beta))
