import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdmr.data import ClipFeatureSequence, IndexSpan
from tdmr.numcore import RngStream
from tdmr.oracles import brute_force_pairs, check_synthesis, naive_similarity
from tdmr.vsdc import (
    PLACEMENTS,
    InsufficientBatchError,
    SimilarityMatrix,
    SynthesisDegenerateError,
    batch_similarity,
    select_pairs,
    select_random_pairs,
    synthesize,
    synthesize_batch,
)


def _video(clips, vid="v"):
    clips = np.asarray(clips, dtype=np.float64)
    return ClipFeatureSequence(vid, clips, 2.0, 2.0 * clips.shape[0])


def _random_video(g, L, D=4, vid="v"):
    return _video(g.normal(size=(L, D)), vid)


def _sim(off_diag):
    S = np.array(off_diag, dtype=np.float64)
    np.fill_diagonal(S, -np.inf)
    return SimilarityMatrix(S)


def test_similarity_examples():
    S = batch_similarity([_video([[1, 0], [0, 1]]), _video([[1, 0]])])
    assert S.values[0, 1] == pytest.approx(0.5) and S.values[1, 0] == pytest.approx(0.5)
    S = batch_similarity([_video([[0.3, 0.4]]), _video([[0.3, 0.4]])])
    assert S.values[0, 1] == pytest.approx(1.0)
    assert np.isneginf(S.values[0, 0])


@pytest.mark.parametrize("seed", range(10))
def test_similarity_matches_double_loop(seed):
    g = np.random.default_rng(seed)
    batch = [_random_video(g, int(g.integers(1, 8))) for _ in range(4)]
    S = batch_similarity(batch).values
    ref = naive_similarity([v.clips for v in batch])
    off = ~np.eye(4, dtype=bool)
    assert np.max(np.abs(S[off] - ref[off])) <= 1e-10
    assert np.max(np.abs(S[off] - S.T[off])) <= 1e-9
    assert np.all(np.abs(S[off]) <= 1.0)


def test_similarity_zero_norm_and_errors():
    S = batch_similarity([_video([[0, 0], [1, 0]]), _video([[1, 0]])])
    assert S.zero_norm_clips == 1 and S.values[0, 1] == pytest.approx(0.5)
    with pytest.raises(InsufficientBatchError):
        batch_similarity([_video([[1, 0]])])
    with pytest.raises(ValueError):
        batch_similarity([_video([[1, 0]]), _video([[1, 0, 0]])])


def test_select_pairs_examples():
    plan = select_pairs(_sim([[0, 0.9, 0.2], [0.9, 0, 0.1], [0.2, 0.1, 0]]))
    assert plan.partners == [1, 0, 0]
    assert plan.similarities == pytest.approx([0.9, 0.9, 0.2])
    plan = select_pairs(_sim(np.full((4, 4), 0.3)))
    assert plan.partners == [1, 0, 0, 0]
    with pytest.raises(InsufficientBatchError):
        select_pairs(_sim([[0.0]]))


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_select_pairs_matches_brute_force(n):
    g = np.random.default_rng(n)
    for _ in range(50):
        batch = [_random_video(g, int(g.integers(1, 6)), D=3) for _ in range(n)]
        S = batch_similarity(batch)
        plan = select_pairs(S)
        assert plan.partners == brute_force_pairs(S.values)
        for i, k in enumerate(plan.partners):
            assert k != i
            assert plan.similarities[i] == max(S.values[i, j] for j in range(n) if j != i)


def test_select_pairs_quantized_ties_match_brute_force():
    g = np.random.default_rng(1)
    for _ in range(200):
        n = int(g.integers(2, 7))
        A = g.integers(0, 3, size=(n, n)) / 2.0
        S = _sim((A + A.T) / 2)
        assert select_pairs(S).partners == brute_force_pairs(S.values)


def test_random_pairs_never_self():
    plan = select_random_pairs(5, RngStream(0))
    assert all(k != i for i, k in enumerate(plan.partners))
    assert plan.partners == select_random_pairs(5, RngStream(0)).partners


@pytest.mark.parametrize("placement", PLACEMENTS)
def test_alpha_one_is_identity(placement):
    g = np.random.default_rng(0)
    v, p = _random_video(g, 12), _random_video(g, 9)
    gt = IndexSpan(3, 6)
    for frac in (0.0, 0.2):
        res = synthesize(v, gt, p, 1.0, frac, placement, RngStream(2))
        assert np.array_equal(res.tokens, v.clips)
        assert res.gt_span == gt
        assert all(s == "self" for s, _ in res.provenance)


@pytest.mark.parametrize("placement", PLACEMENTS)
def test_alpha_zero_keeps_only_gt_from_self(placement):
    g = np.random.default_rng(1)
    v, p = _random_video(g, 6), _random_video(g, 8)
    gt = IndexSpan(2, 3)
    for seed in range(20):
        res = synthesize(v, gt, p, 0.0, 0.0, placement, RngStream(seed))
        assert res.length == 6
        assert [j for s, j in res.provenance if s == "self"] == [2, 3]
        assert sum(s == "partner" for s, _ in res.provenance) == 4
        assert res.saliency_labels[res.gt_span.first:res.gt_span.last + 1] == [3, 3]
        assert not check_synthesis(res, v, gt, p, 0.0)


def test_invalid_arguments():
    g = np.random.default_rng(0)
    v, p = _random_video(g, 5), _random_video(g, 5)
    with pytest.raises(ValueError):
        synthesize(v, IndexSpan(0, 1), p, 1.5, 0.1, "split", RngStream(0))
    with pytest.raises(ValueError):
        synthesize(v, IndexSpan(0, 1), p, 0.5, 0.1, "shuffle", RngStream(0))
    with pytest.raises(ValueError):
        synthesize(v, IndexSpan(3, 5), p, 0.5, 0.1, "split", RngStream(0))


def test_degenerate_when_gt_fills_video():
    g = np.random.default_rng(0)
    v, p = _random_video(g, 5), _random_video(g, 5)
    with pytest.raises(SynthesisDegenerateError):
        synthesize(v, IndexSpan(0, 4), p, 0.5, 0.0, "split", RngStream(0))


@settings(max_examples=300, deadline=None)
@given(
    st.integers(3, 30),
    st.integers(1, 30),
    st.data(),
    st.floats(0, 1),
    st.sampled_from([0.0, 0.1, 0.3]),
    st.sampled_from(PLACEMENTS),
    st.integers(0, 2**32 - 1),
)
def test_synthesis_invariants_property(L, Lp, data, alpha, frac, placement, seed):
    first = data.draw(st.integers(0, L - 1))
    last = data.draw(st.integers(first, L - 1))
    g = np.random.default_rng(seed)
    v, p = _random_video(g, L), _random_video(g, Lp)
    gt = IndexSpan(first, last)
    try:
        res = synthesize(v, gt, p, alpha, frac, placement, RngStream(seed))
    except SynthesisDegenerateError:
        return
    assert check_synthesis(res, v, gt, p, frac) == []
    if alpha < 1:
        assert res.length >= len(gt) + 2


def test_invariant_checker_over_many_calls_and_composition():
    # 10,000 seeded calls: every result passes the provenance scan, and the
    # share of non-GT self clips kept before trimming matches alpha within 3 sigma
    g = np.random.default_rng(7)
    v, p = _random_video(g, 60, D=2), _random_video(g, 50, D=2)
    gt = IndexSpan(20, 29)
    kept = total = 0
    root = RngStream(123)
    for t in range(10_000):
        res = synthesize(v, gt, p, 0.5, 0.1, PLACEMENTS[t % 3], root.child("trial", t))
        if t % 10 == 0:
            assert check_synthesis(res, v, gt, p, 0.1) == []
        kept += res.stats["self_nongt_kept"]
        total += res.stats["self_nongt_total"]
    sigma = np.sqrt(0.25 / total)
    assert abs(kept / total - 0.5) <= 3 * sigma


def test_synthesis_determinism():
    g = np.random.default_rng(3)
    v, p = _random_video(g, 20), _random_video(g, 15)
    a = synthesize(v, IndexSpan(5, 8), p, 0.5, 0.1, "split", RngStream(9))
    b = synthesize(v, IndexSpan(5, 8), p, 0.5, 0.1, "split", RngStream(9))
    assert a.provenance == b.provenance and np.array_equal(a.tokens, b.tokens)


def _batch(g, n, L_range=(10, 20)):
    out = []
    for i in range(n):
        L = int(g.integers(*L_range))
        first = int(g.integers(0, L - 4))
        gt = IndexSpan(first, first + 2)
        out.append((_random_video(g, L, vid=f"v{i}"), gt, [3 if j in gt else 0 for j in range(L)]))
    return out


def test_batch_of_two_preserves_each_gt():
    g = np.random.default_rng(0)
    batch = _batch(g, 2)
    plan = select_pairs(batch_similarity([b[0] for b in batch]))
    out = synthesize_batch(batch, plan, 0.5, RngStream(1))
    assert len(out) == 2
    for i, (own, other) in enumerate(out):
        k = plan.partners[i]
        assert check_synthesis(own, batch[i][0], batch[i][1], batch[k][0], 0.1) == []
        assert check_synthesis(other, batch[k][0], batch[k][1], batch[i][0], 0.1) == []


def test_batch_alpha_one_is_identity():
    g = np.random.default_rng(1)
    batch = _batch(g, 4)
    plan = select_pairs(batch_similarity([b[0] for b in batch]))
    for i, (own, other) in enumerate(synthesize_batch(batch, plan, 1.0, RngStream(0))):
        assert np.array_equal(own.tokens, batch[i][0].clips)
        assert np.array_equal(other.tokens, batch[plan.partners[i]][0].clips)


def test_batch_of_eight_passes_checker_and_is_order_stable():
    g = np.random.default_rng(2)
    batch = _batch(g, 8)
    plan = select_pairs(batch_similarity([b[0] for b in batch]))
    out = synthesize_batch(batch, plan, 0.7, RngStream(5))
    for i, (own, other) in enumerate(out):
        k = plan.partners[i]
        assert check_synthesis(own, batch[i][0], batch[i][1], batch[k][0], 0.1) == []
        assert check_synthesis(other, batch[k][0], batch[k][1], batch[i][0], 0.1) == []
    # each member depends only on its own derived stream, not on processing order
    single = synthesize_batch(batch[:1] + batch[1:], plan, 0.7, RngStream(5))
    assert all(a[0].provenance == b[0].provenance for a, b in zip(out, single))
    direct = synthesize(batch[3][0], batch[3][1], batch[plan.partners[3]][0], 0.7, 0.1, "split",
                        RngStream(5).child("self", 3, plan.partners[3]), batch[3][2])
    assert direct.provenance == out[3][0].provenance


def test_batch_of_one_passes_through():
    g = np.random.default_rng(0)
    batch = _batch(g, 1)
    ((own, other),) = synthesize_batch(batch, None, 0.5, RngStream(0))
    assert np.array_equal(own.tokens, batch[0][0].clips) and own.gt_span == batch[0][1]


def test_batch_degenerate_policy():
    g = np.random.default_rng(0)
    full = _random_video(g, 4, vid="a")
    batch = [(full, IndexSpan(0, 3), [3] * 4), (_random_video(g, 10, vid="b"), IndexSpan(2, 3), None)]
    plan = select_pairs(batch_similarity([b[0] for b in batch]))
    with pytest.raises(SynthesisDegenerateError):
        synthesize_batch(batch, plan, 0.5, RngStream(0))
    out = synthesize_batch(batch, plan, 0.5, RngStream(0), on_degenerate="passthrough")
    assert np.array_equal(out[0][0].tokens, full.clips)
