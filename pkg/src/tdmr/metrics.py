"""Recall@1 and mean average precision over temporal windows, plus the
target-masked (spurious) and swapped-context evaluation protocols."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import MomentDataset, build_dynamic_context_split, masked_dataset
from .data.io import FormatError
from .numcore import RngStream, no_grad

MODES = ("standard", "spurious", "dynamic-context")
AVG_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
MAX_PREDICTIONS = 10
LAYOUT = {
    "standard": {"R1": (0.5, 0.7), "mAP": (0.5, 0.75, "avg")},
    "dynamic-context": {"R1": (0.5, 0.7), "mAP": (0.5, 0.75, "avg")},
    "spurious": {"R1": (0.7, 0.9), "mAP": (0.75, "avg")},
}


@dataclass(frozen=True)
class ScoredPrediction:
    start: float
    end: float
    confidence: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"prediction needs start < end, got [{self.start}, {self.end}]")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def temporal_iou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def rank_predictions(preds, cap: int | None = MAX_PREDICTIONS) -> list:
    """Highest confidence first; ties go to the earlier start, then the lower index."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].start, i))
    ranked = [preds[i] for i in order]
    return ranked[:cap] if cap is not None else ranked


def recall_at_1(top_predictions, gt_windows, threshold: float) -> float:
    """Percent of queries whose top prediction reaches ``threshold`` IoU with some GT window.

    ``top_predictions[q]`` is a ``(start, end)`` pair or ``None`` (scored as a miss).
    """
    if not top_predictions:
        raise ValueError("recall needs at least one query")
    hits = 0
    for top, gts in zip(top_predictions, gt_windows, strict=True):
        if top is not None and any(temporal_iou(top, g) >= threshold for g in gts):
            hits += 1
    return 100.0 * hits / len(top_predictions)


def average_precision(ranked, gt_windows, threshold: float) -> float:
    """Exact area under the step precision-recall curve for one query.

    ``ranked`` holds ``(start, end)`` pairs, best first.  Each prediction claims
    the unclaimed GT window it overlaps most, if that overlap reaches the threshold.
    The area is accumulated as an exact rational and rounded once.
    """
    if not gt_windows:
        raise ValueError("average precision needs at least one GT window")
    claimed = [False] * len(gt_windows)
    hits = 0
    area = Fraction(0)
    for k, p in enumerate(ranked, start=1):
        best, best_iou = -1, -1.0
        for j, g in enumerate(gt_windows):
            if claimed[j]:
                continue
            iou = temporal_iou(p, g)
            if iou >= threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            claimed[best] = True
            hits += 1
            area += Fraction(hits, k)
    return float(area / len(gt_windows))


@dataclass
class MetricsReport:
    mode: str
    values: dict  # (metric, threshold) -> percent
    num_queries: int = 0
    misses: int = 0  # queries that had no prediction at all
    extra: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def records(self) -> list:
        return [{"metric": m, "threshold": t, "value": v, "mode": self.mode} for (m, t), v in self.values.items()]

    def to_json(self) -> str:
        return json.dumps(self.records(), indent=2)

    def to_text(self) -> str:
        prefix = "Spurious " if self.mode == "spurious" else ""
        lines = [f"mode: {self.mode}  queries: {self.num_queries}"]
        for (m, t), v in self.values.items():
            label = f"{prefix}{m}@{t}" if t != "avg" else f"{prefix}{m} avg"
            lines.append(f"  {label:<22} {v:8.2f}")
        return "\n".join(lines)


def score(predictions: dict, gt_windows: dict, mode: str = "standard") -> MetricsReport:
    """Report for ``predictions[qid]`` (lists of :class:`ScoredPrediction`) against ``gt_windows[qid]``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not gt_windows:
        raise ValueError("cannot evaluate an empty dataset")
    qids = sorted(gt_windows)
    ranked = {q: [(p.start, p.end) for p in rank_predictions(predictions.get(q, []))] for q in qids}
    tops = [ranked[q][0] if ranked[q] else None for q in qids]
    gts = [gt_windows[q] for q in qids]
    values = {}
    layout = LAYOUT[mode]
    for t in layout["R1"]:
        values[("R1", t)] = recall_at_1(tops, gts, t)
    ap_cache = {}

    def mean_ap(t):
        if t not in ap_cache:
            ap_cache[t] = 100.0 * math.fsum(average_precision(ranked[q], gt_windows[q], t) for q in qids) / len(qids)
        return ap_cache[t]

    for t in layout["mAP"]:
        if t == "avg":
            values[("mAP", "avg")] = math.fsum(mean_ap(x) for x in AVG_THRESHOLDS) / len(AVG_THRESHOLDS)
        else:
            values[("mAP", t)] = mean_ap(t)
    return MetricsReport(mode, values, len(qids), sum(1 for t in tops if t is None))


def to_windows(spans: np.ndarray, probs: np.ndarray, duration: float) -> list:
    """Normalised (center, width) predictions to second-based scored windows."""
    out = []
    for (c, w), p in zip(spans, probs):
        s = min(max((c - w / 2.0) * duration, 0.0), duration)
        e = min(max((c + w / 2.0) * duration, 0.0), duration)
        if e <= s:  # collapsed by clipping at a video boundary
            s, e = (s, s + 1e-6) if s < duration else (e - 1e-6, e)
        out.append(ScoredPrediction(float(s), float(e), float(min(max(p, 0.0), 1.0))))
    return out


def predict(model, dataset: MomentDataset, batch_size: int = 32) -> dict:
    """Eval-mode predictions for every annotation, keyed by qid."""
    from .model import collate

    out = {}
    samples = list(dataset.samples())
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        for _, ann in chunk:
            if ann.query_tokens is None:
                raise ValueError(f"query {ann.qid} has no text features")
        batch = collate([v.clips for v, _ in chunk], [a.query_tokens for _, a in chunk])
        with no_grad():
            pred = model.forward(batch, training=False)
        fg = pred.fg_probs
        for b, (_, ann) in enumerate(chunk):
            out[ann.qid] = to_windows(pred.spans.data[b], fg[b], ann.duration)
    return out


def prepare_split(dataset: MomentDataset, mode: str, seed: int = 0) -> MomentDataset:
    """Apply the feature surgery that defines ``mode``; GT windows never change."""
    if mode == "standard":
        return dataset
    if mode == "spurious":
        return masked_dataset(dataset, RngStream(seed).child("spurious"))
    if mode == "dynamic-context":
        return build_dynamic_context_split(dataset, RngStream(seed).child("dynamic-context"))
    raise ValueError(f"mode must be one of {MODES}")


def gt_windows(dataset: MomentDataset) -> dict:
    return {a.qid: [list(map(float, w)) for w in a.relevant_windows] for a in dataset.annotations}


def evaluate(model, dataset: MomentDataset, mode: str = "standard", seed: int = 0, batch_size: int = 32,
             return_predictions: bool = False):
    if not dataset.annotations:
        raise ValueError("cannot evaluate an empty dataset")
    split = prepare_split(dataset, mode, seed)
    preds = predict(model, split, batch_size)
    report = score(preds, gt_windows(split), mode)
    return (report, preds) if return_predictions else report


def dump_predictions(path, predictions: dict) -> None:
    with open(path, "w") as fh:
        for qid in sorted(predictions):
            spans = [[p.start, p.end, p.confidence] for p in predictions[qid]]
            fh.write(json.dumps({"qid": qid, "spans": spans}, sort_keys=True) + "\n")


def load_predictions(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out[rec["qid"]] = [ScoredPrediction(float(s), float(e), float(c)) for s, e, c in rec["spans"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: line {n}: {exc}") from exc
    return out


def score_predictions(path, dataset: MomentDataset, mode: str = "standard") -> MetricsReport:
    """Score a dumped prediction file without a model."""
    return score(load_predictions(path), gt_windows(dataset), mode)
