"""Encoder-decoder moment retrieval network with moment queries and prediction heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .numcore import (
    DimensionError,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    RngStream,
    Tensor,
    add,
    as_stream,
    div,
    dropout,
    mul,
    relu,
    sigmoid,
    sum_,
    xavier_uniform,
)
from .tdem import FusionConfig, StartToken, TextInteraction, fuse, tokenize_dynamics

FOREGROUND = 0  # class index of "this query is a moment" in the 2-way head


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    video_dim: int
    text_dim: int
    hidden: int = 256
    enc_layers: int = 3
    dec_layers: int = 3
    num_queries: int = 10
    heads: int = 8
    ffn_dim: int = 0  # 0 means 4 * hidden
    dropout: float = 0.1
    input_dropout: float = 0.5
    beta: float = 0.7
    dynamics: bool = True

    def __post_init__(self):
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} must be a positive multiple of heads {self.heads}")
        if self.num_queries < 1:
            raise ConfigError("need at least one moment query")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigError("layer counts must be nonnegative")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if not self.dynamics and self.beta != 1.0:
            raise ConfigError("a model without the dynamics branch needs beta = 1")
        for rate in (self.dropout, self.input_dropout):
            if not 0.0 <= rate < 1.0:
                raise ConfigError("dropout rates must lie in [0, 1)")

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def sinusoid_table(length: int, d: int) -> np.ndarray:
    """Fixed position code: sin on even channels, cos on odd channels."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class Batch:
    """Zero-padded inputs plus boolean masks marking real clips and words."""

    video: np.ndarray  # [B, L, Dv]
    video_mask: np.ndarray  # [B, L]
    text: np.ndarray  # [B, W, Dt]
    text_mask: np.ndarray  # [B, W]

    def __len__(self) -> int:
        return self.video.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.video_mask.sum(axis=1)


def collate(videos, texts) -> Batch:
    if len(videos) != len(texts) or not videos:
        raise ValueError("collate needs matching, non-empty lists of videos and texts")
    videos = [np.asarray(v, dtype=np.float64) for v in videos]
    texts = [np.asarray(t, dtype=np.float64) for t in texts]
    B, L, W = len(videos), max(v.shape[0] for v in videos), max(t.shape[0] for t in texts)
    if min(t.shape[0] for t in texts) == 0:
        raise ValueError("every query needs at least one text token")
    V = np.zeros((B, L, videos[0].shape[1]))
    T = np.zeros((B, W, texts[0].shape[1]))
    vm, tm = np.zeros((B, L), dtype=bool), np.zeros((B, W), dtype=bool)
    for b, (v, t) in enumerate(zip(videos, texts)):
        V[b, : v.shape[0]], vm[b, : v.shape[0]] = v, True
        T[b, : t.shape[0]], tm[b, : t.shape[0]] = t, True
    return Batch(V, vm, T, tm)


@dataclass
class MomentPrediction:
    spans: Tensor  # [B, N, 2] normalised (center, width)
    logits: Tensor  # [B, N, 2] class logits, FOREGROUND first
    saliency: Tensor  # [B, L]
    video_mask: np.ndarray
    neg_logit: Tensor | None = None  # [B] saliency logit of the mismatched (video, text) pairing

    @property
    def fg_probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=-1, keepdims=True))[..., FOREGROUND]


class EncoderLayer(Module):
    def __init__(self, d: int, heads: int, ffn: int, rng: RngStream):
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng.child("attn"))
        self.norm_ff = LayerNorm(d)
        self.ffn = FeedForward(d, ffn, rng.child("ffn"))

    def __call__(self, x, mask, rate, rng, training):
        h = self.norm_attn(x)
        x = add(x, dropout(self.attn(h, h, h, mask), rate, rng, training))
        return add(x, dropout(self.ffn(self.norm_ff(x), rate, rng, training), rate, rng, training))


class DecoderLayer(Module):
    def __init__(self, d: int, heads: int, ffn: int, rng: RngStream):
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng.child("self"))
        self.norm_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng.child("cross"))
        self.norm_ff = LayerNorm(d)
        self.ffn = FeedForward(d, ffn, rng.child("ffn"))

    def __call__(self, x, memory, memory_keys, mask, rate, rng, training):
        h = self.norm_self(x)
        x = add(x, dropout(self.self_attn(h, h, h), rate, rng, training))
        x = add(x, dropout(self.cross_attn(self.norm_cross(x), memory_keys, memory, mask), rate, rng, training))
        return add(x, dropout(self.ffn(self.norm_ff(x), rate, rng, training), rate, rng, training))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the last axis restricted to ``mask`` ([B, L] -> [B])."""
    m = np.asarray(mask, dtype=np.float64)
    return div(sum_(mul(x, m), axis=-1), np.maximum(m.sum(axis=-1), 1.0))


class Model(Module):
    def __init__(self, config: ModelConfig, rng=0):
        rng = as_stream(rng)
        self.config = config
        d, h, f = config.hidden, config.heads, config.ffn
        self.video_proj = Linear(config.video_dim, d, rng.child("video_proj"))
        self.text_proj = Linear(config.text_dim, d, rng.child("text_proj"))
        self.video_interact = TextInteraction(d, h, f, rng.child("video_interact"))
        if config.dynamics:
            self.start = StartToken(config.video_dim, rng.child("start"))
            self.dyn_proj = Linear(config.video_dim, d, rng.child("dyn_proj"))
            self.dyn_interact = TextInteraction(d, h, f, rng.child("dyn_interact"))
        self.encoder = [EncoderLayer(d, h, f, rng.child("encoder", i)) for i in range(config.enc_layers)]
        self.enc_norm = LayerNorm(d)
        self.saliency_head = Linear(d, 1, rng.child("saliency_head"))
        self.query_embed = Parameter(xavier_uniform(rng.child("query_embed"), config.num_queries, d))
        self.decoder = [DecoderLayer(d, h, f, rng.child("decoder", i)) for i in range(config.dec_layers)]
        self.dec_norm = LayerNorm(d)
        self.span_mlp = [Linear(d, d, rng.child("span", 0)), Linear(d, d, rng.child("span", 1)),
                         Linear(d, 2, rng.child("span", 2))]
        self.class_head = Linear(d, 2, rng.child("class_head"))
        self.fusion = FusionConfig(config.beta)

    # ------------------------------------------------------------------ stages

    @staticmethod
    def _sub(rng, name):
        return rng.child(name) if rng is not None else None

    def embed_inputs(self, batch: Batch, training: bool = False, rng: RngStream | None = None):
        """Project clips and words to the hidden size; clips also get a position code."""
        cfg = self.config
        if batch.video.shape[-1] != cfg.video_dim or batch.text.shape[-1] != cfg.text_dim:
            raise DimensionError(
                f"inputs have dims ({batch.video.shape[-1]}, {batch.text.shape[-1]}), "
                f"model expects ({cfg.video_dim}, {cfg.text_dim})"
            )
        pe = sinusoid_table(batch.video.shape[1], cfg.hidden)
        v = self.video_proj(dropout(batch.video, cfg.input_dropout, self._sub(rng, "video_in"), training))
        t = self.text_proj(dropout(batch.text, cfg.input_dropout, self._sub(rng, "text_in"), training))
        return add(v, pe), t

    def embed_dynamics(self, batch: Batch, training: bool = False, rng: RngStream | None = None):
        cfg = self.config
        T = tokenize_dynamics(batch.video, self.start)
        pe = sinusoid_table(batch.video.shape[1], cfg.hidden)
        return add(self.dyn_proj(dropout(T, cfg.input_dropout, self._sub(rng, "dyn_in"), training)), pe)

    def interact(self, video_emb, dyn_emb, text_emb, batch: Batch, training=False, rng=None):
        rate = self.config.dropout
        va = self.video_interact(video_emb, text_emb, batch.text_mask, rate, self._sub(rng, "video_interact"), training)
        if dyn_emb is None:
            return fuse(va, None, self.fusion)
        da = self.dyn_interact(dyn_emb, text_emb, batch.text_mask, rate, self._sub(rng, "dyn_interact"), training)
        return fuse(va, da, self.fusion)

    def encode(self, fused, mask, training: bool = False, rng: RngStream | None = None):
        """Self-attention stack over the fused clips; returns (memory, saliency [B, L])."""
        x = fused
        for i, layer in enumerate(self.encoder):
            x = layer(x, mask, self.config.dropout, self._sub(rng, f"encoder{i}"), training)
        if self.encoder:
            x = self.enc_norm(x)
        sal = self.saliency_head(x)
        return x, sal.reshape(sal.shape[:-1])

    def decode(self, memory, mask, training: bool = False, rng: RngStream | None = None):
        B, L, d = memory.shape
        keys = add(memory, sinusoid_table(L, d))
        x = add(np.zeros((B, self.config.num_queries, d)), self.query_embed)
        for i, layer in enumerate(self.decoder):
            x = layer(x, memory, keys, mask, self.config.dropout, self._sub(rng, f"decoder{i}"), training)
        if self.decoder:
            x = self.dec_norm(x)
        return x

    def predict_heads(self, decoded):
        h = relu(self.span_mlp[0](decoded))
        h = relu(self.span_mlp[1](h))
        return sigmoid(self.span_mlp[2](h)), self.class_head(decoded)

    def uses_dynamics(self) -> bool:
        return self.config.dynamics and self.config.beta < 1.0

    def forward(self, batch: Batch, training: bool = False, rng: RngStream | None = None,
                negatives: bool = False) -> MomentPrediction:
        if training and rng is None:
            raise ValueError("a training forward needs a random stream for dropout")
        v, t = self.embed_inputs(batch, training, rng)
        dyn = self.embed_dynamics(batch, training, rng) if self.uses_dynamics() else None
        fused = self.interact(v, dyn, t, batch, training, self._sub(rng, "pos"))
        memory, sal = self.encode(fused, batch.video_mask, training, self._sub(rng, "pos"))
        spans, logits = self.predict_heads(self.decode(memory, batch.video_mask, training, rng))
        neg = None
        if negatives and len(batch) > 1:
            neg = self.negative_logit(v, dyn, t, batch, training, self._sub(rng, "neg"))
        return MomentPrediction(spans, logits, sal, batch.video_mask, neg)

    def negative_logit(self, v, dyn, t, batch: Batch, training=False, rng=None) -> Tensor:
        """Mean clip saliency when every video is paired with its neighbour's query
        (queries rolled by one position in the batch)."""
        order = np.roll(np.arange(len(batch)), 1)
        rolled = Batch(batch.video, batch.video_mask, batch.text[order], batch.text_mask[order])
        fused = self.interact(v, dyn, t[order], rolled, training, rng)
        _, sal = self.encode(fused, batch.video_mask, training, rng)
        return masked_mean(sal, batch.video_mask)

    __call__ = forward
