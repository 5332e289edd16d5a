import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdmr.data import SynthConfig, synthetic_dataset
from tdmr.data.io import FormatError
from tdmr.metrics import (
    AVG_THRESHOLDS,
    LAYOUT,
    ScoredPrediction,
    average_precision,
    dump_predictions,
    evaluate,
    gt_windows,
    load_predictions,
    predict,
    prepare_split,
    rank_predictions,
    recall_at_1,
    score,
    score_predictions,
    temporal_iou,
    to_windows,
)
from tdmr.model import Model, ModelConfig
from tdmr.oracles import average_precision_oracle, recall_at_1_oracle
from tdmr.verify import _fuzz_instance


def _data(n=6, seed=0):
    return synthetic_dataset(SynthConfig(num_samples=n, feature_dim=6, text_dim=5, length_range=(8, 12),
                                         moment_length_range=(2, 4), words_per_query=3), seed)


def _oracle_predictions(gts):
    return {q: [ScoredPrediction(w[0], w[1], 1.0) for w in ws] for q, ws in gts.items()}


def test_scored_prediction_validation():
    with pytest.raises(ValueError):
        ScoredPrediction(3.0, 3.0, 0.5)
    with pytest.raises(ValueError):
        ScoredPrediction(1.0, 3.0, 1.5)


def test_recall_examples():
    gts = [[(0.0, 10.0)], [(20.0, 30.0)]]
    assert recall_at_1([(0.0, 10.0), (20.0, 30.0)], gts, 0.7) == 100.0
    # IoU 0.6: [0, 10] vs [0, 6]
    shifted = [(0.0, 6.0), (20.0, 30.0)]
    assert temporal_iou(shifted[0], gts[0][0]) == pytest.approx(0.6)
    assert recall_at_1(shifted, gts, 0.5) == 100.0
    assert recall_at_1(shifted, gts, 0.7) == 50.0
    assert recall_at_1([None, (20.0, 30.0)], gts, 0.5) == 50.0


def test_average_precision_examples():
    assert average_precision([(0.0, 10.0)], [(0.0, 10.0)], 0.5) == 1.0
    # rank 1 misses, rank 2 hits the only GT: precision 1/2 at recall 1
    assert average_precision([(50.0, 60.0), (0.0, 10.0)], [(0.0, 10.0)], 0.5) == 0.5
    assert average_precision([], [(0.0, 10.0)], 0.5) == 0.0
    # two GTs, hits at ranks 1 and 3: (1/1 + 2/3) / 2
    ranked = [(0.0, 10.0), (70.0, 80.0), (20.0, 30.0)]
    assert average_precision(ranked, [(0.0, 10.0), (20.0, 30.0)], 0.5) == pytest.approx(5 / 6, abs=1e-15)
    with pytest.raises(ValueError):
        average_precision([(0.0, 1.0)], [], 0.5)


def test_duplicate_prediction_cannot_claim_a_gt_twice():
    assert average_precision([(0.0, 10.0), (0.0, 10.0)], [(0.0, 10.0)], 0.5) == 1.0
    assert average_precision([(0.0, 10.0), (0.0, 10.0)], [(0.0, 10.0), (100.0, 110.0)], 0.5) == 0.5


def test_fuzz_against_oracles():
    g = np.random.default_rng(11)
    tops, gts_all = [], []
    for _ in range(1000):
        preds, gts = _fuzz_instance(g)
        for t in (0.1, 0.5, 0.75, 0.95):
            assert average_precision(preds, gts, t) == average_precision_oracle(preds, gts, t)
        tops.append(preds[0] if preds else None)
        gts_all.append(gts)
    for t in (0.3, 0.5, 0.7, 0.9):
        assert recall_at_1(tops, gts_all, t) == recall_at_1_oracle(tops, gts_all, t)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_ap_monotone_in_threshold(seed):
    preds, gts = _fuzz_instance(np.random.default_rng(seed))
    aps = [average_precision(preds, gts, t) for t in AVG_THRESHOLDS]
    assert all(a >= b for a, b in zip(aps, aps[1:]))
    assert all(0.0 <= a <= 1.0 for a in aps)


def test_ranking_ties_and_cap():
    preds = [ScoredPrediction(5.0, 6.0, 0.5), ScoredPrediction(1.0, 2.0, 0.5), ScoredPrediction(1.0, 3.0, 0.5),
             ScoredPrediction(9.0, 10.0, 0.9)]
    ranked = rank_predictions(preds)
    assert [(p.start, p.end) for p in ranked] == [(9.0, 10.0), (1.0, 2.0), (1.0, 3.0), (5.0, 6.0)]
    many = [ScoredPrediction(float(i), i + 1.0, 0.5) for i in range(15)]
    assert len(rank_predictions(many)) == 10


def test_score_invariant_to_prediction_order_and_qid_relabel():
    g = np.random.default_rng(3)
    gts, preds = {}, {}
    for q in range(20):
        p, w = _fuzz_instance(g)
        gts[q] = w
        preds[q] = [ScoredPrediction(s, e, float(np.round(g.uniform(), 1))) for s, e in p]
    base = score(preds, gts)
    shuffled = {q: [ps[i] for i in g.permutation(len(ps))] for q, ps in preds.items()}
    assert score(shuffled, gts).values == base.values
    relabel = {q: f"x{99 - q:03d}" for q in gts}
    renamed = score({relabel[q]: v for q, v in preds.items()}, {relabel[q]: v for q, v in gts.items()})
    assert renamed.values == base.values


@pytest.mark.parametrize("mode", list(LAYOUT))
def test_report_layout(mode):
    gts = {"a": [[0.0, 10.0]], "b": [[4.0, 8.0]]}
    report = score(_oracle_predictions(gts), gts, mode)
    want = [("R1", t) for t in LAYOUT[mode]["R1"]] + [("mAP", t) for t in LAYOUT[mode]["mAP"]]
    assert list(report.values) == want
    assert all(v == 100.0 for v in report.values.values())
    recs = json.loads(report.to_json())
    assert {tuple(sorted(r)) for r in recs} == {("metric", "mode", "threshold", "value")}
    assert ("Spurious R1@0.7" in report.to_text()) == (mode == "spurious")


def test_oracle_predictor_standard_and_spurious():
    data = _data()
    gts = gt_windows(data)
    assert all(v == 100.0 for v in score(_oracle_predictions(gts), gts, "standard").values.values())
    masked = prepare_split(data, "spurious", seed=0)
    assert gt_windows(masked) == gts
    assert not np.array_equal(masked.sample(0)[0].clips, data.sample(0)[0].clips)
    assert score(_oracle_predictions(gt_windows(masked)), gt_windows(masked), "spurious")[("R1", 0.7)] == 100.0


def test_far_constant_predictor_scores_zero():
    data = _data()
    gts = gt_windows(data)
    durations = {a.qid: a.duration for a in data.annotations}
    preds = {q: [ScoredPrediction(0.99 * durations[q], durations[q], 1.0)] for q in gts}
    assert all(max(temporal_iou((p.start, p.end), w) for w in gts[q]) < 0.5 for q, ps in preds.items() for p in ps)
    report = score(preds, gts)
    assert all(v == 0.0 for v in report.values.values())


def test_missing_predictions_count_as_misses():
    gts = {"a": [[0.0, 10.0]], "b": [[4.0, 8.0]]}
    report = score({"a": [ScoredPrediction(0.0, 10.0, 1.0)]}, gts)
    assert report[("R1", 0.5)] == 50.0 and report.misses == 1


def test_empty_dataset_errors():
    with pytest.raises(ValueError):
        score({}, {})
    data = _data()
    data.annotations = []
    with pytest.raises(ValueError):
        evaluate(None, data)
    with pytest.raises(ValueError):
        score({}, {"a": [[0, 1]]}, "weird")


def test_to_windows_clips_and_orders():
    out = to_windows(np.array([[0.5, 0.2], [0.0, 0.1], [1.0, 0.5]]), np.array([0.3, 0.2, 1.0]), 100.0)
    assert (out[0].start, out[0].end) == pytest.approx((40.0, 60.0))
    assert out[1].start == 0.0 and out[1].end == pytest.approx(5.0)
    assert out[2].end == 100.0 and all(p.start < p.end for p in out)


def _tiny_model(data):
    v, a = data.sample(0)
    cfg = ModelConfig(video_dim=v.dim, text_dim=a.query_tokens.shape[1], hidden=8, heads=2, enc_layers=1,
                      dec_layers=1, num_queries=4)
    return Model(cfg, 0)


@pytest.mark.parametrize("mode", ["standard", "spurious", "dynamic-context"])
def test_dump_then_score_reproduces_live_report(tmp_path, mode):
    data = _data(n=8)
    model = _tiny_model(data)
    live, preds = evaluate(model, data, mode, seed=2, batch_size=3, return_predictions=True)
    again = evaluate(model, data, mode, seed=2, batch_size=5)
    assert again.values == live.values
    path = tmp_path / "preds.jsonl"
    dump_predictions(path, preds)
    assert load_predictions(path) == preds
    split = prepare_split(data, mode, seed=2)
    assert score_predictions(path, split, mode).values == live.values
    assert all(0.0 <= v <= 100.0 for v in live.values.values())


def test_predict_batch_size_invariant():
    data = _data(n=5)
    model = _tiny_model(data)
    a, b = predict(model, data, batch_size=1), predict(model, data, batch_size=5)
    for q in a:
        for x, y in zip(a[q], b[q]):
            assert x.start == pytest.approx(y.start, abs=1e-9) and x.confidence == pytest.approx(y.confidence, abs=1e-12)


def test_bad_prediction_file(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"qid": 1, "spans": [[0, 1, 0.5]]}\n{"qid": 2}\n')
    with pytest.raises(FormatError):
        load_predictions(path)
