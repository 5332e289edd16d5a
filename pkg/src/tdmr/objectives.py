"""Set matching between predicted and annotated spans, and every training loss.

Spans are ``(center, width)`` pairs normalised by the video duration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    RngStream,
    Tensor,
    abs_,
    add,
    as_tensor,
    div,
    log_softmax,
    masked_logsumexp,
    maximum,
    minimum,
    mul,
    relu,
    softplus,
    sub,
    sum_,
    take,
)

TERMS = ("l1", "giou", "cls", "margin", "cont", "neg")


class DegenerateSpanError(ValueError):
    pass


class TrainingDivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class CostWeights:
    l1: float = 10.0
    giou: float = 1.0
    cls: float = 4.0

    def __post_init__(self):
        vals = (self.l1, self.giou, self.cls)
        if min(vals) < 0 or max(vals) == 0:
            raise ValueError("matching cost weights must be nonnegative and not all zero")


@dataclass(frozen=True)
class LossWeights:
    l1: float = 10.0
    giou: float = 1.0
    cls: float = 4.0
    margin: float = 1.0
    cont: float = 1.0
    neg: float = 1.0

    def __post_init__(self):
        if min(getattr(self, t) for t in TERMS) < 0:
            raise ValueError("loss weights must be nonnegative")

    def costs(self) -> CostWeights:
        return CostWeights(self.l1, self.giou, self.cls)


@dataclass(frozen=True)
class ObjectiveConfig:
    weights: LossWeights = LossWeights()
    margin_delta: float = 0.2
    tau: float = 0.5
    bg_weight: float = 0.1  # down-weights the (many) unmatched queries in classification


@dataclass
class LossReport:
    terms: dict  # term name -> float
    weights: dict
    total: float
    total_tensor: Tensor | None = None
    flags: list = field(default_factory=list)
    grad_norm: float = 0.0

    def to_record(self) -> dict:
        return {**{k: float(v) for k, v in self.terms.items()}, "total": float(self.total)}


# ------------------------------------------------------------ span geometry


def _bounds(span):
    c, w = float(span[0]), float(span[1])
    if not w > 0:
        raise DegenerateSpanError(f"span width must be positive, got {w}")
    return c - w / 2.0, c + w / 2.0


def span_iou(a, b) -> float:
    (s1, e1), (s2, e2) = _bounds(a), _bounds(b)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    return inter / ((e1 - s1) + (e2 - s2) - inter)


def span_giou(a, b) -> float:
    (s1, e1), (s2, e2) = _bounds(a), _bounds(b)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    hull = max(e1, e2) - min(s1, s2)
    return inter / union - (hull - union) / hull


def giou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise gIoU between [N,2] and [G,2] (center, width) arrays."""
    ps, pe = pred[:, 0] - pred[:, 1] / 2, pred[:, 0] + pred[:, 1] / 2
    gs, ge = gt[:, 0] - gt[:, 1] / 2, gt[:, 0] + gt[:, 1] / 2
    inter = np.maximum(0.0, np.minimum(pe[:, None], ge[None]) - np.maximum(ps[:, None], gs[None]))
    union = (pe - ps)[:, None] + (ge - gs)[None] - inter
    hull = np.maximum(pe[:, None], ge[None]) - np.minimum(ps[:, None], gs[None])
    return inter / union - (hull - union) / hull


def giou_pairs(pred, gt) -> Tensor:
    """Differentiable gIoU of matched rows: pred [M,2] tensor, gt [M,2] array."""
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    half = mul(pred[:, 1], 0.5)
    ps, pe = sub(pred[:, 0], half), add(pred[:, 0], half)
    gs, ge = gt[:, 0] - gt[:, 1] / 2, gt[:, 0] + gt[:, 1] / 2
    inter = relu(sub(minimum(pe, ge), maximum(ps, gs)))
    union = sub(add(pred[:, 1], gt[:, 1]), inter)
    hull = sub(maximum(pe, ge), minimum(ps, gs))
    return sub(div(inter, union), div(sub(hull, union), hull))


# ------------------------------------------------------------ assignment


def hungarian(cost) -> list:
    """Minimum-cost assignment of ``min(N, M)`` rows to distinct columns.

    Shortest augmenting paths with row/column potentials, O(n^2 m).  Returns
    ``(row, col)`` pairs sorted by row.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError("cost must be a matrix")
    if C.size == 0:
        return []
    if not np.isfinite(C).all():
        raise ValueError("costs must be finite")
    transposed = C.shape[0] > C.shape[1]
    if transposed:
        C = C.T
    n, m = C.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j]]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


def assignment_cost(cost, pairs) -> float:
    return math.fsum(float(np.asarray(cost)[r, c]) for r, c in pairs)


def match_cost(pred_spans: np.ndarray, fg_probs: np.ndarray, gts: np.ndarray, w: CostWeights) -> np.ndarray:
    pred_spans, gts = np.asarray(pred_spans, dtype=np.float64), np.asarray(gts, dtype=np.float64)
    l1 = np.abs(pred_spans[:, None, :] - gts[None, :, :]).sum(axis=-1)
    return w.l1 * l1 - w.giou * giou_matrix(pred_spans, gts) - w.cls * np.asarray(fg_probs)[:, None]


def match(pred_spans, fg_probs, gts, w: CostWeights = CostWeights()) -> list:
    """Hungarian assignment of predictions (rows) to ground-truth spans (columns)."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if len(gts) == 0:
        raise ValueError("matching needs at least one ground-truth span")
    return hungarian(match_cost(pred_spans, fg_probs, gts, w))


# ------------------------------------------------------------ per-sample terms


def moment_loss(spans, logits, gts, assignment, bg_weight: float = 0.1) -> dict:
    """L1, 1 - gIoU and weighted 2-class cross-entropy for one sample.

    ``spans`` and ``logits`` are [N,2] tensors; ``gts`` is [G,2].
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    rows = np.array([r for r, _ in assignment], dtype=np.int64)
    cols = np.array([c for _, c in assignment], dtype=np.int64)
    matched = take(spans, rows)
    target = gts[cols]
    M = len(rows)
    l1 = div(sum_(abs_(sub(matched, target))), M)
    giou = sub(1.0, div(sum_(giou_pairs(matched, target)), M))
    N = spans.shape[0]
    cls_target = np.ones(N, dtype=np.int64)
    cls_target[rows] = 0
    qw = np.full(N, bg_weight)
    qw[rows] = 1.0
    logp = take(log_softmax(logits), (np.arange(N), cls_target))
    cls = div(sum_(mul(logp, -qw)), qw.sum())
    return {"l1": l1, "giou": giou, "cls": cls}


def margin_pairs(labels, gt_mask, rng: RngStream):
    """(high, low) clip index pairs: highs are GT clips at the top GT label, lows
    are clips outside GT.  Returns ``None`` when either side is empty."""
    labels = np.asarray(labels)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if not gt_mask.any() or gt_mask.all():
        return None
    top = labels[gt_mask].max()
    highs = np.flatnonzero(gt_mask & (labels == top))
    lows = np.flatnonzero(~gt_mask)
    n = min(len(highs), len(lows))
    hi = highs[np.sort(rng.choice(len(highs), size=n, replace=False))]
    lo = lows[np.sort(rng.choice(len(lows), size=n, replace=False))]
    return hi, lo


def saliency_losses(saliency, labels, gt_mask, neg_logit=None, tau: float = 0.5, delta: float = 0.2,
                    rng: RngStream | None = None) -> tuple[dict, list]:
    """Margin ranking, rank-aware contrastive and negative-pair terms for one sample.

    ``saliency`` is an [L] tensor over real clips only.  Terms with nothing to
    rank are 0 and named in the returned flag list.
    """
    saliency = as_tensor(saliency)
    labels = np.asarray(labels, dtype=np.int64)
    flags = []
    zero = Tensor(0.0)
    pairs = margin_pairs(labels, gt_mask, rng or RngStream(0))
    if pairs is None:
        margin = zero
        flags.append("margin")
    else:
        hi, lo = pairs
        margin = div(sum_(relu(add(sub(saliency[lo], saliency[hi]), delta))), len(hi))
    levels = [r for r in range(1, int(labels.max(initial=0)) + 1) if (labels == r).any()]
    if not levels:
        cont = zero
        flags.append("cont")
    else:
        pos = np.stack([labels >= r for r in levels])
        z = mul(saliency, 1.0 / tau)
        lse_pos = masked_logsumexp(z, pos)
        lse_all = masked_logsumexp(z, np.ones_like(pos))
        cont = div(sum_(sub(lse_all, lse_pos)), len(levels))
    neg = softplus(neg_logit) if neg_logit is not None else zero
    if neg_logit is None:
        flags.append("neg")
    return {"margin": margin, "cont": cont, "neg": neg}, flags


def total_loss(moment_terms: dict, saliency_terms: dict, w: LossWeights = LossWeights(), flags=()) -> LossReport:
    terms = {**moment_terms, **saliency_terms}
    values = {k: float(as_tensor(terms[k]).data) for k in TERMS}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDivergenceError(f"non-finite loss terms {bad}: {values}")
    weights = {k: getattr(w, k) for k in TERMS}
    total = Tensor(0.0)
    for k in TERMS:
        if weights[k]:
            total = add(total, mul(terms[k], weights[k]))
    return LossReport(values, weights, math.fsum(weights[k] * values[k] for k in TERMS), total, list(flags))


# ------------------------------------------------------------ batch objective


@dataclass
class Target:
    """Supervision for one sequence: normalised GT spans, clip labels, GT clip mask."""

    spans: np.ndarray  # [G, 2] (center, width) in [0, 1]
    labels: np.ndarray  # [L]
    gt_mask: np.ndarray  # [L] bool


def batch_objective(pred, targets: list, cfg: ObjectiveConfig = ObjectiveConfig(),
                    rng: RngStream | None = None) -> LossReport:
    """Mean over samples of every per-sample term, weighted and summed.

    The moment terms are computed in one vectorised pass over all matched pairs;
    the result equals averaging :func:`moment_loss` over samples.
    """
    rng = rng or RngStream(0)
    B, N, _ = pred.spans.shape
    if len(targets) != B:
        raise ValueError("one target per batch row is required")
    spans_np, fg = pred.spans.data, pred.fg_probs
    costs = cfg.weights.costs()
    mb, mq, tgt, pair_w = [], [], [], []
    cls_target = np.ones((B, N), dtype=np.int64)
    qw = np.full((B, N), cfg.bg_weight)
    for b, t in enumerate(targets):
        pairs = match(spans_np[b], fg[b], t.spans, costs)
        for r, c in pairs:
            mb.append(b)
            mq.append(r)
            tgt.append(t.spans[c])
            pair_w.append(1.0 / (len(pairs) * B))
            cls_target[b, r] = 0
            qw[b, r] = 1.0
    mb, mq, tgt, pair_w = np.array(mb), np.array(mq), np.array(tgt), np.array(pair_w)
    matched = take(pred.spans, (mb, mq))
    l1 = sum_(mul(sum_(abs_(sub(matched, tgt)), axis=1), pair_w))
    giou = sub(1.0, sum_(mul(giou_pairs(matched, tgt), pair_w)))
    logp = take(log_softmax(pred.logits), (np.arange(B)[:, None], np.arange(N)[None, :], cls_target))
    cls = sum_(mul(logp, -qw / (qw.sum(axis=1, keepdims=True) * B)))

    flags = []
    margin_terms, cont_rows, cont_w = [], [], []
    L = pred.saliency.shape[1]
    hb, hi, lb, lo, hw = [], [], [], [], []
    for b, t in enumerate(targets):
        n = len(t.labels)
        pairs = margin_pairs(t.labels, t.gt_mask, rng.child("margin", b))
        if pairs is None:
            flags.append(("margin", b))
        else:
            hb += [b] * len(pairs[0])
            hi += list(pairs[0])
            lo += list(pairs[1])
            hw += [1.0 / (len(pairs[0]) * B)] * len(pairs[0])
        labels = np.asarray(t.labels, dtype=np.int64)
        levels = [r for r in range(1, int(labels.max(initial=0)) + 1) if (labels == r).any()]
        if not levels:
            flags.append(("cont", b))
        for r in levels:
            pos = np.zeros(L, dtype=bool)
            pos[:n] = labels >= r
            valid = np.zeros(L, dtype=bool)
            valid[:n] = True
            cont_rows.append((b, pos, valid))
            cont_w.append(1.0 / (len(levels) * B))
    if hb:
        hb = np.array(hb)
        s_hi = take(pred.saliency, (hb, np.array(hi)))
        s_lo = take(pred.saliency, (hb, np.array(lo)))
        margin = sum_(mul(relu(add(sub(s_lo, s_hi), cfg.margin_delta)), np.array(hw)))
    else:
        margin = Tensor(0.0)
    if cont_rows:
        rows = np.array([r[0] for r in cont_rows])
        z = mul(take(pred.saliency, rows), 1.0 / cfg.tau)
        lse_pos = masked_logsumexp(z, np.stack([r[1] for r in cont_rows]))
        lse_all = masked_logsumexp(z, np.stack([r[2] for r in cont_rows]))
        cont = sum_(mul(sub(lse_all, lse_pos), np.array(cont_w)))
    else:
        cont = Tensor(0.0)
    if pred.neg_logit is not None:
        neg = div(sum_(softplus(pred.neg_logit)), B)
    else:
        neg = Tensor(0.0)
        flags.append(("neg", -1))
    return total_loss({"l1": l1, "giou": giou, "cls": cls}, {"margin": margin, "cont": cont, "neg": neg},
                      cfg.weights, flags)
