import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdmr.numcore import DimensionError, Parameter, RngStream, Tape, Tensor, grad_check, sum_
from tdmr.oracles import naive_attention
from tdmr.tdem import (
    EmptyTextError,
    FusionConfig,
    StartToken,
    TextInteraction,
    fuse,
    text_interact,
    tokenize_dynamics,
)


def test_tokenize_example():
    T = tokenize_dynamics(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2))
    assert T.data.tolist() == [[1, 2], [2, 2]]


def test_static_video_has_no_dynamics():
    c = np.array([0.3, -1.2, 5.0])
    T = tokenize_dynamics(np.tile(c, (7, 1)), c)
    assert np.array_equal(T.data, np.zeros((7, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_prefix_sum_inverts_tokenizer(seed):
    g = np.random.default_rng(seed)
    L, D = int(g.integers(1, 30)), int(g.integers(1, 9))
    v, st_ = g.normal(size=(L, D)), g.normal(size=D)
    T = tokenize_dynamics(v, st_).data
    assert np.max(np.abs(st_ + np.cumsum(T, axis=0) - v)) <= 1e-12


def test_tokenizer_batched_matches_single():
    g = np.random.default_rng(0)
    v, st_ = g.normal(size=(3, 5, 4)), g.normal(size=4)
    batched = tokenize_dynamics(v, st_).data
    for b in range(3):
        assert np.array_equal(batched[b], tokenize_dynamics(v[b], st_).data)


def test_start_token_gradient_closed_form():
    g = np.random.default_rng(1)
    token = StartToken(4, RngStream(0))
    v = Parameter(g.normal(size=(6, 4)))
    up = g.normal(size=(6, 4))
    with Tape() as tape:
        out = sum_(tokenize_dynamics(v, token) * up)
        tape.backward(out)
    assert np.allclose(token.st.grad, -up[0], atol=0, rtol=0)
    expect = up.copy()
    expect[:-1] -= up[1:]
    assert np.allclose(v.grad, expect, atol=1e-15)


def test_tokenizer_gradcheck():
    g = np.random.default_rng(2)
    v, st_ = Parameter(g.normal(size=(5, 3))), Parameter(g.normal(size=3))
    w = g.normal(size=(5, 3))
    assert grad_check(lambda: sum_(tokenize_dynamics(v, st_) * tokenize_dynamics(v, st_) * w), [v, st_]) <= 1e-6


def test_start_token_init():
    token = StartToken(512, RngStream(3))
    assert token.dim == 512 and abs(token.st.data.std() - 0.02) < 0.003
    with pytest.raises(DimensionError):
        tokenize_dynamics(np.zeros((3, 4)), token)


def test_single_text_token_attention_rows_equal_its_value():
    g = np.random.default_rng(0)
    layer = TextInteraction(8, 2, 16, RngStream(1))
    tokens, text = g.normal(size=(1, 5, 8)), g.normal(size=(1, 1, 8))
    t = layer.norm_t(text)
    core = layer.attn.attend(layer.norm_q(tokens), t, t).data[0]
    value = layer.attn.v(t).data[0, 0]
    assert np.allclose(core, np.tile(value, (5, 1)), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 6), st.sampled_from([1, 2, 4]))
def test_text_interact_shape(L, W, heads):
    g = np.random.default_rng(L * 10 + W)
    out = text_interact(g.normal(size=(L, 8)), g.normal(size=(W, 8)), heads)
    assert out.shape == (L, 8)


def test_single_head_core_matches_naive_attention():
    g = np.random.default_rng(4)
    layer = TextInteraction(6, 1, 12, RngStream(2))
    tokens, text = g.normal(size=(1, 4, 6)), g.normal(size=(1, 3, 6))
    q_in, t = layer.norm_q(tokens), layer.norm_t(text)
    core = layer.attn.attend(q_in, t, t).data[0]
    Q, K, V = (lin(x).data[0] for lin, x in ((layer.attn.q, q_in), (layer.attn.k, t), (layer.attn.v, t)))
    assert np.max(np.abs(core - naive_attention(Q, K, V))) <= 1e-10


def test_text_permutation_equivariance():
    g = np.random.default_rng(5)
    layer = TextInteraction(8, 2, 16, RngStream(3))
    tokens, text = g.normal(size=(1, 6, 8)), g.normal(size=(1, 5, 8))
    perm = g.permutation(5)
    a = layer(tokens, text).data
    b = layer(tokens, text[:, perm]).data
    assert np.allclose(a, b, atol=1e-12)


def test_text_mask_hides_padding():
    g = np.random.default_rng(6)
    layer = TextInteraction(8, 2, 16, RngStream(3))
    tokens, text = g.normal(size=(1, 4, 8)), g.normal(size=(1, 3, 8))
    padded = np.concatenate([text, g.normal(size=(1, 2, 8)) * 50], axis=1)
    mask = np.array([[True] * 3 + [False] * 2])
    assert np.allclose(layer(tokens, text).data, layer(tokens, padded, mask).data, atol=1e-12)


def test_empty_text_rejected():
    with pytest.raises(EmptyTextError):
        text_interact(np.zeros((3, 4)), np.zeros((0, 4)), 1)


def test_fuse_boundaries_and_default():
    g = np.random.default_rng(7)
    a, b = Tensor(g.normal(size=(4, 3))), Tensor(g.normal(size=(4, 3)))
    assert fuse(a, b, FusionConfig(1.0)) is a
    assert fuse(a, b, FusionConfig(0.0)) is b
    out = fuse(np.ones((2, 2)), np.zeros((2, 2)), FusionConfig())
    assert FusionConfig().beta == 0.7 and np.all(out.data == 0.7)


def test_fuse_errors():
    with pytest.raises(DimensionError):
        fuse(np.ones((2, 2)), np.ones((2, 3)), FusionConfig(0.5))
    with pytest.raises(ValueError):
        FusionConfig(1.5)


def test_fuse_gradients():
    g = np.random.default_rng(8)
    a, b = Parameter(g.normal(size=(3, 2))), Parameter(g.normal(size=(3, 2)))
    w = g.normal(size=(3, 2))
    assert grad_check(lambda: sum_(fuse(a, b, FusionConfig(0.3)) * w), [a, b]) <= 1e-8
