"""Spurious-pair selection and ground-truth preserving video synthesis.

Within a batch every video is paired with its most similar other video (mean
pairwise clip cosine similarity).  A synthesized video keeps the whole GT span of
its own video, keeps each of its other clips with probability ``alpha`` and each
clip of the partner with probability ``1 - alpha``, then assembles the kept
clips in order and adjusts the length to ``L ± round(length_bias_frac * L)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data.schema import ClipFeatureSequence, IndexSpan
from .numcore import RngStream

log = logging.getLogger(__name__)

PLACEMENTS = ("split", "append", "prepend")


class InsufficientBatchError(ValueError):
    pass


class SynthesisDegenerateError(ValueError):
    """The requested output length cannot hold the GT span plus two context clips."""


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # diagonal holds -inf so it never wins an argmax
    zero_norm_clips: int = 0


@dataclass
class PairPlan:
    partners: list
    similarities: list

    def __len__(self) -> int:
        return len(self.partners)


@dataclass
class SynthesisResult:
    tokens: np.ndarray
    gt_span: IndexSpan
    saliency_labels: list
    provenance: list  # (source, index) per output token, source in {"self", "partner"}
    stats: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


def batch_similarity(batch) -> SimilarityMatrix:
    clips = [v.clips if isinstance(v, ClipFeatureSequence) else np.asarray(v, dtype=np.float64) for v in batch]
    if len(clips) < 2:
        raise InsufficientBatchError("similarity needs at least two videos")
    if len({c.shape[1] for c in clips}) != 1:
        raise ValueError("all videos in a batch must share a feature dimension")
    zero = 0
    means = []
    for c in clips:
        norms = np.linalg.norm(c, axis=1)
        nz = norms > 0
        zero += int((~nz).sum())
        unit = np.zeros_like(c)
        unit[nz] = c[nz] / norms[nz, None]
        # mean over all clip pairs of cos(p, q) factorises into a dot of mean unit vectors
        means.append(unit.mean(axis=0))
    M = np.stack(means)
    S = M @ M.T
    S = np.clip((S + S.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(S, -np.inf)
    if zero:
        log.warning("%d zero-norm clips treated as orthogonal to everything", zero)
    return SimilarityMatrix(S, zero)


def select_pairs(S: SimilarityMatrix) -> PairPlan:
    vals = S.values
    n = vals.shape[0]
    if n < 2:
        raise InsufficientBatchError("pair selection needs at least two videos")
    partners, sims = [], []
    for i in range(n):
        row = vals[i].copy()
        row[i] = -np.inf
        k = int(np.argmax(row))  # first maximum, i.e. lowest index on ties
        partners.append(k)
        sims.append(float(row[k]))
    return PairPlan(partners, sims)


def select_random_pairs(n: int, rng: RngStream, S: SimilarityMatrix | None = None) -> PairPlan:
    if n < 2:
        raise InsufficientBatchError("pair selection needs at least two videos")
    partners = []
    for i in range(n):
        k = int(rng.integers(0, n - 1))
        partners.append(k + (k >= i))
    sims = [float(S.values[i, k]) if S is not None else float("nan") for i, k in enumerate(partners)]
    return PairPlan(partners, sims)


def synthesize(
    self_video: ClipFeatureSequence,
    gt: IndexSpan,
    partner: ClipFeatureSequence,
    alpha: float,
    length_bias_frac: float,
    placement: str,
    rng: RngStream,
    saliency_labels=None,
) -> SynthesisResult:
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    L = self_video.length
    Lp = partner.length
    if gt.last >= L:
        raise ValueError(f"GT span {gt} outside a {L}-clip video")
    if saliency_labels is None:
        saliency_labels = [3 if j in gt else 0 for j in range(L)]
    gt_len = len(gt)

    self_draw = rng.random(L)
    partner_draw = rng.random(Lp)
    self_keep = [j for j in range(L) if j in gt or self_draw[j] < alpha]
    partner_keep = [j for j in range(Lp) if partner_draw[j] < 1.0 - alpha]
    nongt_total = L - gt_len
    nongt_kept = len(self_keep) - gt_len

    b = int(round(length_bias_frac * L))
    shift = int(rng.integers(-b, b, endpoint=True))
    if alpha >= 1.0:
        # nothing is dropped and nothing is borrowed: the original video, unchanged
        target = L
    else:
        lo, hi = max(L - b, gt_len + 2), min(L + b, L + Lp)
        if lo > hi:
            raise SynthesisDegenerateError(
                f"cannot fit a {gt_len}-clip GT plus context into length {L}±{b} with {Lp} partner clips"
            )
        target = min(max(L + shift, lo), hi)

    # partner clips with index < cut go before the self clips, the rest after
    if placement == "append":
        cut = 0
    elif placement == "prepend":
        cut = Lp
    else:
        c = int(rng.integers(0, len(partner_keep), endpoint=True))
        cut = partner_keep[c] if c < len(partner_keep) else Lp

    n_now = len(self_keep) + len(partner_keep)
    padded = 0
    if n_now < target:
        spare = [j for j in range(Lp) if partner_draw[j] >= 1.0 - alpha]
        need = target - n_now
        if need > len(spare):
            raise SynthesisDegenerateError(f"needs {need} extra partner clips, only {len(spare)} unused")
        extra = rng.choice(len(spare), size=need, replace=False)
        partner_keep = sorted(partner_keep + [spare[int(e)] for e in extra])
        padded = need

    before = [("partner", j) for j in partner_keep if j < cut]
    after = [("partner", j) for j in partner_keep if j >= cut]
    seq = before + [("self", j) for j in self_keep] + after

    trimmed = 0
    right = True
    while len(seq) > target:
        def is_gt(item):
            return item[0] == "self" and item[1] in gt

        if right and not is_gt(seq[-1]):
            seq.pop()
        elif not is_gt(seq[0]):
            seq.pop(0)
        else:
            seq.pop()
        right = not right
        trimmed += 1

    sources = {"self": self_video.clips, "partner": partner.clips}
    tokens = np.stack([sources[s][j] for s, j in seq])
    first = next(p for p, (s, j) in enumerate(seq) if s == "self" and j == gt.first)
    labels = [int(saliency_labels[j]) if s == "self" else 0 for s, j in seq]
    return SynthesisResult(
        tokens=tokens,
        gt_span=IndexSpan(first, first + gt_len - 1),
        saliency_labels=labels,
        provenance=seq,
        stats={
            "self_nongt_total": nongt_total,
            "self_nongt_kept": nongt_kept,
            "partner_sampled": len(partner_keep) - padded,
            "padded": padded,
            "trimmed": trimmed,
            "target_length": target,
        },
    )


def passthrough(video: ClipFeatureSequence, gt: IndexSpan, saliency_labels=None) -> SynthesisResult:
    L = video.length
    labels = list(saliency_labels) if saliency_labels is not None else [3 if j in gt else 0 for j in range(L)]
    return SynthesisResult(video.clips.copy(), gt, labels, [("self", j) for j in range(L)], {"passthrough": True})


def synthesize_batch(
    batch,
    plans: PairPlan,
    alpha: float,
    rng: RngStream,
    length_bias_frac: float = 0.1,
    placement: str = "split",
    on_degenerate: str = "raise",
) -> list:
    """Build both members of every spurious pair.

    ``batch`` holds ``(video, gt_span, saliency_labels)`` triples.  Entry ``i`` of
    the result is ``(V~_i, V~_k)``: ``V~_i`` keeps GT of ``i`` with context from
    its partner ``k``, and ``V~_k`` keeps GT of ``k`` with context from ``i``.
    Each member uses its own derived stream, so results do not depend on the
    order in which pairs are processed.
    """
    if len(batch) < 2:
        log.info("batch of one: synthesis skipped")
        return [(passthrough(*batch[0]), passthrough(*batch[0]))] if batch else []
    if len(plans) != len(batch):
        raise ValueError("pair plan does not match the batch")

    def build(owner: int, other: int, role: str) -> SynthesisResult:
        video, gt, labels = batch[owner]
        try:
            return synthesize(
                video, gt, batch[other][0], alpha, length_bias_frac, placement, rng.child(role, owner, other), labels
            )
        except SynthesisDegenerateError:
            if on_degenerate == "raise":
                raise
            log.info("synthesis degenerate for batch item %d; passing it through", owner)
            return passthrough(video, gt, labels)

    out = []
    for i, k in enumerate(plans.partners):
        out.append((build(i, k, "self"), build(k, i, "partner")))
    return out
