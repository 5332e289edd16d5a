"""Self-check battery: every fast path against its slow reference."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import oracles
from .data import ClipFeatureSequence, IndexSpan
from .metrics import average_precision, recall_at_1
from .model import Model, ModelConfig, collate
from .numcore import RngStream, grad_check
from .objectives import ObjectiveConfig, Target, assignment_cost, batch_objective, hungarian, span_giou, span_iou
from .tdem import tokenize_dynamics
from .vsdc import PLACEMENTS, SynthesisDegenerateError, batch_similarity, select_pairs, synthesize

GRAD_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def tiny_problem(seed: int = 0, beta: float = 0.7):
    """Smallest full pipeline: two samples, L=6 clips, W=4 words, d=8, 2 heads, one layer each, 3 queries."""
    g = np.random.default_rng(seed)
    cfg = ModelConfig(video_dim=5, text_dim=4, hidden=8, heads=2, enc_layers=1, dec_layers=1, num_queries=3,
                      dropout=0.0, input_dropout=0.0, beta=beta)
    model = Model(cfg, RngStream(seed))
    batch = collate([g.normal(size=(6, 5)) for _ in range(2)], [g.normal(size=(4, 4)) for _ in range(2)])
    targets = []
    for _ in range(2):
        first = int(g.integers(0, 4))
        last = int(g.integers(first, 6))
        labels = np.zeros(6, dtype=np.int64)
        labels[first:last + 1] = g.integers(1, 5, size=last - first + 1)
        span = np.array([[(first + last + 1) / 12.0, (last + 1 - first) / 6.0]])
        targets.append(Target(span, labels, labels > 0))
    return model, batch, targets


def end_to_end_gradcheck(seed: int = 0, max_entries: int | None = None, h: float = 1e-6) -> float:
    model, batch, targets = tiny_problem(seed)

    def objective():
        pred = model.forward(batch, training=False, negatives=True)
        return batch_objective(pred, targets, ObjectiveConfig(), RngStream(seed)).total_tensor

    return grad_check(objective, model.parameters(), h=h, max_entries=max_entries, rng=RngStream(seed).child("fd"))


def suite_gradcheck(max_entries=40):
    err = end_to_end_gradcheck(0, max_entries)
    return err <= GRAD_TOL, f"max relative error {err:.2e}"


def suite_hungarian(seeds=200):
    for seed in range(seeds):
        g = np.random.default_rng(seed)
        n, m = int(g.integers(1, 7)), int(g.integers(1, 7))
        C = g.normal(size=(n, m))
        pairs = hungarian(C)
        rows, cols = [r for r, _ in pairs], [c for _, c in pairs]
        if len(pairs) != min(n, m) or len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            return False, f"seed {seed}: invalid assignment {pairs}"
        best = oracles.brute_force_assignment(C)
        if assignment_cost(C, pairs) != best:
            return False, f"seed {seed}: cost {assignment_cost(C, pairs)} != optimum {best}"
    return True, f"{seeds} matrices up to 6x6 optimal"


def suite_giou(trials=2000, giou_fn=span_giou):
    g = np.random.default_rng(0)
    for _ in range(trials):
        a = (g.uniform(0, 1), g.uniform(0.01, 0.5))
        b = (g.uniform(0, 1), g.uniform(0.01, 0.5))
        ia, ib = (a[0] - a[1] / 2, a[0] + a[1] / 2), (b[0] - b[1] / 2, b[0] + b[1] / 2)
        want = oracles.interval_giou(ia, ib)
        got = giou_fn(a, b)
        if abs(got - want) > 1e-12 or abs(span_iou(a, b) - oracles.interval_iou(ia, ib)) > 1e-12:
            return False, f"gIoU {got} != oracle {want} for {a}, {b}"
    return True, f"{trials} random span pairs agree"


def _fuzz_instance(g):
    n_gt = int(g.integers(1, 6))
    gts = []
    for _ in range(n_gt):
        s = float(np.round(g.uniform(0, 100), 1))
        gts.append((s, s + float(np.round(g.uniform(0.5, 40), 1))))
    preds = []
    for _ in range(int(g.integers(0, 21))):
        s = float(np.round(g.uniform(0, 120), 1))
        preds.append((s, s + float(np.round(g.uniform(0.5, 40), 1))))
    return preds, gts


def suite_metrics(instances=1000):
    g = np.random.default_rng(0)
    tops, gts_all = [], []
    for i in range(instances):
        preds, gts = _fuzz_instance(g)
        for t in (0.3, 0.5, 0.7):
            a, b = average_precision(preds, gts, t), oracles.average_precision_oracle(preds, gts, t)
            if a != b:
                return False, f"instance {i}: AP {a} != oracle {b} at {t}"
        tops.append(preds[0] if preds else None)
        gts_all.append(gts)
    for t in (0.5, 0.7):
        if recall_at_1(tops, gts_all, t) != oracles.recall_at_1_oracle(tops, gts_all, t):
            return False, f"R@1 disagrees at {t}"
    return True, f"{instances} fuzzed queries agree"


def suite_synthesis(calls=2000):
    g = np.random.default_rng(0)
    root = RngStream(0)
    for t in range(calls):
        L, Lp = int(g.integers(3, 40)), int(g.integers(1, 40))
        first = int(g.integers(0, L))
        gt = IndexSpan(first, int(g.integers(first, L)))
        v = ClipFeatureSequence("a", g.normal(size=(L, 3)), 1.0, float(L))
        p = ClipFeatureSequence("b", g.normal(size=(Lp, 3)), 1.0, float(Lp))
        alpha = (0.0, 0.3, 0.5, 0.7, 1.0)[t % 5]
        try:
            res = synthesize(v, gt, p, alpha, 0.1, PLACEMENTS[t % 3], root.child(t))
        except SynthesisDegenerateError:
            continue
        problems = oracles.check_synthesis(res, v, gt, p, 0.1)
        if alpha == 1.0 and not np.array_equal(res.tokens, v.clips):
            problems.append("alpha=1 output differs from input")
        if problems:
            return False, f"call {t}: {problems[0]}"
    batch = [g.normal(size=(int(g.integers(1, 6)), 3)) for _ in range(5)]
    S = batch_similarity(batch).values
    ref = oracles.naive_similarity(batch)
    off = ~np.eye(5, dtype=bool)
    if np.max(np.abs(S[off] - ref[off])) > 1e-10:
        return False, "similarity disagrees with the double loop"
    if select_pairs(batch_similarity(batch)).partners != oracles.brute_force_pairs(S):
        return False, "pair plan disagrees with brute force"
    return True, f"{calls} synthesis calls pass the provenance scan"


def suite_tokenizer(inputs=1000):
    g = np.random.default_rng(0)
    worst = 0.0
    for _ in range(inputs):
        L, D = int(g.integers(1, 20)), int(g.integers(1, 8))
        v, st = g.normal(size=(L, D)), g.normal(size=D)
        T = tokenize_dynamics(v, st).data
        worst = max(worst, float(np.max(np.abs(st + np.cumsum(T, axis=0) - v))))
    return worst <= 1e-12, f"max reconstruction error {worst:.1e}"


SUITES = {
    "gradcheck": suite_gradcheck,
    "hungarian": suite_hungarian,
    "giou": suite_giou,
    "metrics": suite_metrics,
    "synthesis": suite_synthesis,
    "tokenizer": suite_tokenizer,
}

FAULTS = {"giou-sign": ("giou", {"giou_fn": lambda a, b: -span_giou(a, b)})}


def run(names=None, fault: str | None = None) -> list:
    """Run the named suites (all by default).  ``fault`` injects a known bug
    into one suite's code under test; it exists to prove the battery can fail."""
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suites {unknown}; choose from {sorted(SUITES)}")
    if fault is not None and fault not in FAULTS:
        raise KeyError(f"unknown fault {fault!r}")
    results = []
    for name in names:
        kwargs = FAULTS[fault][1] if fault is not None and FAULTS[fault][0] == name else {}
        t0 = time.perf_counter()
        try:
            ok, detail = SUITES[name](**kwargs)
        except Exception as exc:  # a crash is a failure of the suite, reported like one
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(SuiteResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
