from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Parameter, Tape, Tensor


def grad_check(f, params, h: float = 1e-5, max_entries: int | None = None, rng=None) -> float:
    """Compare tape gradients of scalar ``f()`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over every entry of
    every parameter (or a random subset of ``max_entries`` per parameter).
    ``f`` must rebuild its computation on each call and be deterministic.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    params = list(params.values()) if isinstance(params, dict) else list(params)
    for p in params:
        if isinstance(p, Parameter):
            p.zero_grad()
        else:
            p.grad = None
    with Tape() as tape:
        out = f()
        if not isinstance(out, Tensor):
            out = Tensor(out)
        if not np.isfinite(out.data).all():
            raise NonFiniteError("objective is not finite")
        tape.backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f())
            flat[i] = orig - h
            fm = _scalar(f())
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def _scalar(out) -> float:
    val = float(out.data) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(val):
        raise NonFiniteError("objective is not finite")
    return val
