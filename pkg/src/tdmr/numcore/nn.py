"""Fused differentiable building blocks: affine maps, softmax, attention, layer norm."""
from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, _result, as_tensor, matmul, mul, unbroadcast

LN_EPS = 1e-5
MASK_FILL = -1e9


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[-1] != W.shape[0] or W.shape[1:] != b.shape:
        raise DimensionError(f"affine shapes disagree: x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data
    lead = xd.shape[:-1]

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ Wd.T) if x.requires_grad else None
        gW = (xd.reshape(-1, xd.shape[-1]).T @ g2) if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    out = (xd.reshape(-1, xd.shape[-1]) @ Wd + b.data).reshape(*lead, Wd.shape[1])
    return _result(out, (x, W, b), backward)


def softmax_rows(x, mask_bias=None) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max.

    ``mask_bias`` is a constant added to the logits (``MASK_FILL`` hides a key).
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data if mask_bias is None else x.data + mask_bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward)


def masked_logsumexp(x, mask) -> Tensor:
    """log Σ exp(x) over the last axis restricted to ``mask``; rows with no
    selected entries return 0 and receive no gradient."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    mask = np.broadcast_to(mask, np.broadcast_shapes(mask.shape, x.shape))
    xd = np.broadcast_to(x.data, mask.shape)
    any_sel = mask.any(axis=-1)
    m = np.where(mask, xd, -np.inf).max(axis=-1)
    m = np.where(any_sel, m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, xd, 0.0) - m[..., None]), 0.0)
    s = e.sum(axis=-1)
    out = np.where(any_sel, m + np.log(np.where(any_sel, s, 1.0)), 0.0)
    w = e / np.where(any_sel, s, 1.0)[..., None]
    xshape = x.shape

    def backward(g):
        return (unbroadcast(g[..., None] * w, xshape),)

    return _result(out, (x,), backward)


def scaled_dot_attention(Q, K, V, mask_bias=None, return_weights: bool = False):
    """softmax(Q Kᵀ / √d) V over the last two axes."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if K.shape[-2] == 0:
        raise DimensionError("attention over an empty key set")
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention shapes disagree: Q{Q.shape} K{K.shape} V{V.shape}")
    d = Q.shape[-1]
    scores = mul(matmul(Q, K.transpose(*range(K.ndim - 2), K.ndim - 1, K.ndim - 2)), 1.0 / math.sqrt(d))
    weights = softmax_rows(scores, mask_bias)
    out = matmul(weights, V)
    return (out, weights) if return_weights else out


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise each row of the last axis to zero mean, unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, n)
        ggain = (g2 * xhat.reshape(-1, n)).sum(axis=0) if gain.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(xhat * gd + bias.data, (x, gain, bias), backward)


def dropout(x, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return mul(x, keep / (1.0 - rate))
