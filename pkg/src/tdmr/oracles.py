"""Slow, independent reference computations.

Each function here recomputes something the package computes elsewhere, by a
deliberately different route (plain loops, enumeration, brute force).  The test
suite and ``tdmr verify`` compare the fast paths against them.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def naive_attention(Q, K, V) -> np.ndarray:
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    Lq, d = Q.shape
    Lk = K.shape[0]
    out = np.zeros((Lq, V.shape[1]))
    for i in range(Lq):
        logits = [sum(Q[i, c] * K[j, c] for c in range(d)) / math.sqrt(d) for j in range(Lk)]
        top = max(logits)
        weights = [math.exp(x - top) for x in logits]
        total = sum(weights)
        for j in range(Lk):
            for c in range(V.shape[1]):
                out[i, c] += weights[j] / total * V[j, c]
    return out


def naive_similarity(videos) -> np.ndarray:
    """Mean pairwise clip cosine similarity by double loop; diagonal left as computed."""
    n = len(videos)
    out = np.zeros((n, n))
    for j in range(n):
        for l in range(n):
            total = 0.0
            for p in videos[j]:
                for q in videos[l]:
                    npn, nqn = math.sqrt(float(p @ p)), math.sqrt(float(q @ q))
                    if npn > 0 and nqn > 0:
                        total += float(p @ q) / (npn * nqn)
            out[j, l] = total / (len(videos[j]) * len(videos[l]))
    return out


def brute_force_pairs(S) -> list[int]:
    S = np.asarray(S)
    plan = []
    for i in range(S.shape[0]):
        best, best_j = None, None
        for j in range(S.shape[0]):
            if j == i:
                continue
            if best is None or S[i, j] > best:
                best, best_j = S[i, j], j
        plan.append(best_j)
    return plan


def brute_force_assignment(cost) -> float:
    """Minimum total cost over every injective row/column assignment."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        return 0.0
    best = math.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = min(best, math.fsum(cost[i, c] for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = min(best, math.fsum(cost[r, j] for j, r in enumerate(rows)))
    return best


def interval_iou(a, b) -> float:
    """IoU of two [start, end] intervals via explicit case analysis."""
    (s1, e1), (s2, e2) = a, b
    lo, hi = max(s1, s2), min(e1, e2)
    inter = hi - lo if hi > lo else 0.0
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union if union > 0 else 0.0


def interval_giou(a, b) -> float:
    (s1, e1), (s2, e2) = a, b
    hull = max(e1, e2) - min(s1, s2)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    # uncovered part of the hull is exactly the gap between disjoint intervals
    gap = max(0.0, max(s1, s2) - min(e1, e2))
    return inter / union - gap / hull


def recall_at_1_oracle(top_predictions, gt_windows, threshold) -> float:
    hits = 0
    for pred, windows in zip(top_predictions, gt_windows):
        if pred is None:
            continue
        if any(interval_iou(pred, w) >= threshold for w in windows):
            hits += 1
    return 100.0 * hits / len(gt_windows)


def average_precision_oracle(ranked, gt_windows, threshold) -> float:
    """AP by recomputing precision and recall for every prefix of the ranking."""
    n_gt = len(gt_windows)
    points = []
    for k in range(1, len(ranked) + 1):
        used = set()
        tp = 0
        for pred in ranked[:k]:
            cands = [(interval_iou(pred, w), -j, j) for j, w in enumerate(gt_windows) if j not in used]
            cands = [c for c in cands if c[0] >= threshold]
            if cands:
                used.add(max(cands)[2])
                tp += 1
        points.append((Fraction(tp, k), Fraction(tp, n_gt)))
    area, prev_recall = Fraction(0), Fraction(0)
    for precision, recall in points:
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


def check_synthesis(result, self_video, gt, partner, length_bias_frac) -> list[str]:
    """Scan a synthesis result's provenance and list every broken invariant."""
    problems = []
    tokens = result.tokens
    L_self = self_video.clips.shape[0]
    sources = {"self": self_video.clips, "partner": partner.clips}
    for pos, (src, idx) in enumerate(result.provenance):
        if not np.array_equal(tokens[pos], sources[src][idx]):
            problems.append(f"token {pos} differs from {src}[{idx}]")
    for src in sources:
        seq = [idx for s, idx in result.provenance if s == src]
        if any(b <= a for a, b in zip(seq, seq[1:])):
            problems.append(f"{src} provenance not strictly increasing")
    gt_positions = [
        pos for pos, (s, idx) in enumerate(result.provenance) if s == "self" and gt.first <= idx <= gt.last
    ]
    expected = list(range(gt.first, gt.last + 1))
    got = [result.provenance[p][1] for p in gt_positions]
    if got != expected:
        problems.append(f"GT tokens {got} != {expected}")
    elif gt_positions != list(range(gt_positions[0], gt_positions[0] + len(expected))):
        problems.append("GT tokens not contiguous")
    elif (result.gt_span.first, result.gt_span.last) != (gt_positions[0], gt_positions[-1]):
        problems.append("remapped span does not cover the GT tokens")
    b = int(round(length_bias_frac * L_self))
    if abs(tokens.shape[0] - L_self) > b:
        problems.append(f"length {tokens.shape[0]} outside {L_self}±{b}")
    if len(result.saliency_labels) != tokens.shape[0] or len(result.provenance) != tokens.shape[0]:
        problems.append("label/provenance length mismatch")
    return problems
