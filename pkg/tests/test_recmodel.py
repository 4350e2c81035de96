import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fednewsrec.errors import InputError, ProtocolError
from fednewsrec.recmodel import (
    NewsContent,
    NewsEncoderParams,
    TrainingSample,
    UserModelParams,
    backward,
    encode_corpus,
    encode_news,
    encode_user,
    news_encoder_backward,
    sample_loss,
    score,
    softmax,
    user_loss,
)


# ---------------------------------------------------------------------------
# independent oracles: plain loops, no shared code with the package


def oracle_softmax(xs):
    m = max(xs)
    ex = [math.exp(x - m) for x in xs]
    s = sum(ex)
    return [e / s for e in ex]


def oracle_user(p, X):
    """Loop-by-loop multi-head self-attention + additive attention."""
    M, d = len(X), p.news_dim
    h = p.n_heads
    dh = d // h
    wq, wk, wv, aw, aq = p["wq"], p["wk"], p["wv"], p["attn_w"], p["attn_q"]

    def matvec(x, W, cols):
        return [sum(x[r] * W[r][c] for r in range(d)) for c in cols]

    H = [[0.0] * d for _ in range(M)]
    for k in range(h):
        cols = range(k * dh, (k + 1) * dh)
        Q = [matvec(X[i], wq, cols) for i in range(M)]
        K = [matvec(X[i], wk, cols) for i in range(M)]
        V = [matvec(X[i], wv, cols) for i in range(M)]
        for i in range(M):
            logits = [sum(Q[i][c] * K[j][c] for c in range(dh)) / math.sqrt(dh) for j in range(M)]
            a = oracle_softmax(logits)
            for c in range(dh):
                H[i][k * dh + c] = sum(a[j] * V[j][c] for j in range(M))
    e = []
    for i in range(M):
        hid = [math.tanh(sum(H[i][r] * aw[r][c] for r in range(d))) for c in range(len(aq))]
        e.append(sum(hid[c] * aq[c] for c in range(len(aq))))
    alpha = oracle_softmax(e)
    return np.array([sum(alpha[i] * H[i][c] for i in range(M)) for c in range(d)])


def identity_user(d, n_heads=2, attn_dim=3):
    p = UserModelParams(d, n_heads, attn_dim)
    p["wv"] = np.eye(d)
    return p


def tiny_world(seed, d=4, n_items=6, vocab=10, dtok=3, pooling="mean"):
    rng = np.random.default_rng(seed)
    user = UserModelParams(d, 2, 3)
    user.flat[:] = rng.normal(0, 0.5, user.size)
    enc = NewsEncoderParams(vocab, dtok, d, pooling)
    enc.flat[:] = rng.normal(0, 0.5, enc.size)
    contents = [
        NewsContent(f"n{i}", tuple(int(t) for t in rng.integers(0, vocab, rng.integers(1, 4))))
        for i in range(n_items)
    ]
    reprs = {c.id: rng.normal(0, 1, d) for c in contents}
    return rng, user, enc, contents, reprs


def random_samples(rng, ids, n, k=2, max_hist=3):
    out = []
    for _ in range(n):
        hist = tuple(rng.choice(ids, rng.integers(1, max_hist + 1)))
        cands = tuple(rng.choice(ids, k + 1, replace=False))
        out.append(TrainingSample(hist, cands, int(rng.integers(0, k + 1))))
    return out


def central_diff(f, x, step=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        hi = f()
        x[i] = orig - step
        lo = f()
        x[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, abs_=1e-7):
    err = np.abs(analytic - numeric)
    ok = err <= np.maximum(abs_, rel * np.abs(numeric))
    assert ok.all(), f"max err {err.max()} at {np.argmax(err)}"


# ---------------------------------------------------------------------------
# encode_news


def test_zero_embeddings_give_zero_vector():
    p = NewsEncoderParams(5, 3, 4)
    p["projection"] = np.ones((3, 4))
    assert np.array_equal(encode_news(p, NewsContent("a", (0, 1, 4))).vec, np.zeros(4))


def test_single_token_identity_projection_returns_embedding_row():
    rng = np.random.default_rng(0)
    p = NewsEncoderParams(6, 4, 4)
    p["token_embeddings"] = rng.normal(size=(6, 4))
    p["projection"] = np.eye(4)
    out = encode_news(p, NewsContent("a", (3,))).vec
    assert np.array_equal(out, p["token_embeddings"][3])


def test_three_token_title_matches_dense_oracle():
    rng = np.random.default_rng(1)
    p = NewsEncoderParams(8, 3, 5)
    p.flat[:] = rng.uniform(-0.1, 0.1, p.size)
    toks = (1, 6, 6)
    E, P = p["token_embeddings"], p["projection"]
    expected = [
        sum(sum(E[t][r] for t in toks) / 3 * P[r][c] for r in range(3)) for c in range(5)
    ]
    np.testing.assert_allclose(encode_news(p, NewsContent("a", toks)).vec, expected, atol=1e-15)


def test_attention_pooling_matches_loop_oracle():
    rng = np.random.default_rng(2)
    p = NewsEncoderParams(8, 3, 4, pooling="attention")
    p.flat[:] = rng.normal(size=p.size)
    toks = (0, 5, 7)
    hidden = [p["token_embeddings"][t] @ p["projection"] for t in toks]
    w = oracle_softmax([float(hv @ p["attention_query"]) for hv in hidden])
    expected = sum(wi * hv for wi, hv in zip(w, hidden))
    np.testing.assert_allclose(encode_news(p, NewsContent("a", toks)).vec, expected, atol=1e-12)


def test_token_out_of_range_is_input_error():
    p = NewsEncoderParams(4, 2, 2)
    with pytest.raises(InputError):
        encode_news(p, NewsContent("a", (4,)))
    with pytest.raises(InputError):
        NewsContent("b", ())


@pytest.mark.parametrize("pooling", ["mean", "attention"])
def test_encode_corpus_rows_match_single_encodes(pooling):
    _, _, enc, contents, _ = tiny_world(3, pooling=pooling)
    table = encode_corpus(enc, contents)
    for row, c in zip(table, contents):
        np.testing.assert_allclose(row, encode_news(enc, c).vec, atol=1e-14)


# ---------------------------------------------------------------------------
# encode_user


def test_singleton_history_identity_transforms_returns_input():
    p = identity_user(4)
    x = np.array([0.3, -1.0, 2.0, 0.5])
    np.testing.assert_allclose(encode_user(p, [x]), x, atol=1e-15)


def test_duplicated_history_equals_single():
    p = identity_user(4)
    x = np.array([0.3, -1.0, 2.0, 0.5])
    np.testing.assert_allclose(encode_user(p, [x, x]), encode_user(p, [x]), atol=1e-15)


def test_three_item_history_matches_bruteforce_attention():
    rng = np.random.default_rng(4)
    p = UserModelParams(4, 2, 3)
    p.flat[:] = rng.uniform(-0.1, 0.1, p.size) * 10
    X = rng.normal(size=(3, 4))
    np.testing.assert_allclose(encode_user(p, X), oracle_user(p, X.tolist()), atol=1e-12)


def test_empty_history_gives_zero_vector():
    p = UserModelParams(4, 2, 3)
    assert np.array_equal(encode_user(p, []), np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_user_encoder_is_permutation_invariant(seed, m):
    rng = np.random.default_rng(seed)
    p = UserModelParams(4, 2, 3)
    p.flat[:] = rng.normal(0, 0.5, p.size)
    X = rng.normal(size=(m, 4))
    perm = rng.permutation(m)
    np.testing.assert_allclose(encode_user(p, X[perm]), encode_user(p, X), atol=1e-10)


# ---------------------------------------------------------------------------
# score / sample_loss / user_loss


def test_score_examples():
    assert score(np.zeros(3), [1.0, 2.0, 3.0]) == 0.0
    assert score([1.0, 0.0], [1.0, 0.0]) == 1.0
    assert score([1.0, 2.0], [3.0, -1.0]) == 1.0
    with pytest.raises(InputError):
        score([1.0], [1.0, 2.0])


def test_sample_loss_uniform_scores_is_log5():
    assert sample_loss([0.7] * 5, 2) == pytest.approx(math.log(5), abs=1e-12)
    assert sample_loss([0.7] * 5, 2) == pytest.approx(1.60944, abs=1e-5)


def test_sample_loss_saturated():
    assert sample_loss([60.0, 10.0, 10.0, 10.0, 10.0], 0) < 1e-20


def test_sample_loss_hand_value():
    # -log(e / (e + 4)) evaluated by hand
    expected = math.log(math.e + 4) - 1
    assert expected == pytest.approx(0.90483, abs=1e-5)
    assert sample_loss([1.0, 0.0, 0.0, 0.0, 0.0], 0) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_normalised_and_loss_nonnegative(scores):
    assert abs(softmax(scores).sum() - 1.0) < 1e-12
    for i in range(len(scores)):
        assert sample_loss(scores, i) >= 0.0


def test_user_loss_is_mean_of_sample_losses():
    rng, user, _, contents, reprs = tiny_world(5)
    ids = [c.id for c in contents]
    samples = random_samples(rng, ids, 3)
    losses = [user_loss([s], user, reprs) for s in samples]
    assert user_loss(samples[:1], user, reprs) == losses[0]
    assert user_loss([samples[0], samples[0]], user, reprs) == pytest.approx(losses[0], abs=1e-15)
    assert user_loss(samples, user, reprs) == pytest.approx(sum(losses) / 3, abs=1e-14)


def test_single_sample_loss_matches_direct_scoring():
    rng, user, _, contents, reprs = tiny_world(6)
    s = TrainingSample(("n0", "n1"), ("n2", "n3", "n4"), 1)
    u = encode_user(user, [reprs["n0"], reprs["n1"]])
    direct = sample_loss([score(u, reprs[c]) for c in s.candidates], 1)
    assert user_loss([s], user, reprs) == pytest.approx(direct, abs=1e-14)


# ---------------------------------------------------------------------------
# backward


@pytest.mark.parametrize("seed", range(4))
def test_backward_matches_finite_differences(seed):
    rng, user, _, contents, reprs = tiny_world(10 + seed)
    samples = random_samples(rng, [c.id for c in contents], 3)
    grads = backward(samples, user, reprs)

    num_user = central_diff(lambda: user_loss(samples, user, reprs), user.flat)
    assert_grad_close(grads.user_grad, num_user)

    referenced = set().union(*(s.items() for s in samples))
    assert set(grads.repr_grads) == referenced
    for nid in referenced:
        num = central_diff(lambda: user_loss(samples, user, reprs), reprs[nid])
        assert_grad_close(grads.repr_grads[nid], num)


def test_backward_zero_params_zero_history_gives_zero_user_gradient():
    user = UserModelParams(4, 2, 3)
    reprs = {f"n{i}": np.zeros(4) for i in range(4)}
    g = backward([TrainingSample(("n0",), ("n1", "n2", "n3"), 0)], user, reprs)
    assert not g.user_grad.any()
    assert all(not v.any() for v in g.repr_grads.values())


def test_backward_is_deterministic():
    rng, user, _, contents, reprs = tiny_world(7)
    samples = random_samples(rng, [c.id for c in contents], 4)
    a, b = backward(samples, user, reprs), backward(samples, user, reprs)
    assert np.array_equal(a.user_grad, b.user_grad)
    assert a.repr_grads.keys() == b.repr_grads.keys()
    for k in a.repr_grads:
        assert np.array_equal(a.repr_grads[k], b.repr_grads[k])


def test_backward_missing_item_is_protocol_error():
    user = UserModelParams(4, 2, 3)
    with pytest.raises(ProtocolError):
        backward([TrainingSample(("x",), ("a", "b"), 0)], user, {"a": np.zeros(4), "b": np.zeros(4)})


def test_backward_empty_history_sample_has_gradient_only_through_candidates():
    rng, user, _, contents, reprs = tiny_world(8)
    s = TrainingSample((), ("n1", "n2", "n3"), 0)
    g = backward([s], user, reprs)
    assert not g.user_grad.any()
    assert g.loss == pytest.approx(math.log(3))


def test_dropout_changes_gradient_but_zero_rate_does_not():
    rng, user, _, contents, reprs = tiny_world(9)
    samples = random_samples(rng, [c.id for c in contents], 2)
    exact = backward(samples, user, reprs)
    same = backward(samples, user, reprs, dropout=0.0)
    noisy = backward(samples, user, reprs, dropout=0.5, rng=np.random.default_rng(0))
    assert np.array_equal(exact.user_grad, same.user_grad)
    assert not np.allclose(exact.user_grad, noisy.user_grad)


# ---------------------------------------------------------------------------
# news_encoder_backward


def test_zero_repr_grads_give_zero_encoder_gradient():
    _, _, enc, contents, _ = tiny_world(11)
    g = news_encoder_backward(enc, contents, {c.id: np.zeros(4) for c in contents})
    assert not g.flat.any()


def test_single_item_identity_projection_hand_chain_rule():
    enc = NewsEncoderParams(6, 3, 3)
    enc["projection"] = np.eye(3)
    content = NewsContent("a", (1, 4))
    g = np.array([0.5, -2.0, 1.0])
    grad = news_encoder_backward(enc, [content], {"a": g})
    E = grad["token_embeddings"]
    np.testing.assert_allclose(E[1], g / 2)
    np.testing.assert_allclose(E[4], g / 2)
    assert not np.delete(E, [1, 4], axis=0).any()


@pytest.mark.parametrize("pooling", ["mean", "attention"])
@pytest.mark.parametrize("seed", range(3))
def test_encoder_gradient_matches_finite_differences(pooling, seed):
    rng, _, enc, contents, _ = tiny_world(20 + seed, pooling=pooling)
    gvec = {c.id: rng.normal(size=4) for c in contents[:4]}

    def composite():
        return sum(float(gvec[c.id] @ encode_news(enc, c).vec) for c in contents if c.id in gvec)

    analytic = news_encoder_backward(enc, contents, gvec).flat
    assert_grad_close(analytic, central_diff(composite, enc.flat))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_encoder_backward_is_linear(seed, a, b):
    rng, _, enc, contents, _ = tiny_world(seed % 1000, pooling="attention")
    g1 = {c.id: rng.normal(size=4) for c in contents}
    g2 = {c.id: rng.normal(size=4) for c in contents}
    mix = {k: a * g1[k] + b * g2[k] for k in g1}
    lhs = news_encoder_backward(enc, contents, mix).flat
    rhs = a * news_encoder_backward(enc, contents, g1).flat + b * news_encoder_backward(enc, contents, g2).flat
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_flat_layout_order():
    p = UserModelParams(4, 2, 3)
    names = [n for n, _ in p.layout]
    assert names == ["wq", "wk", "wv", "attn_w", "attn_q"]
    assert p.size == 3 * 16 + 12 + 3
    p["wk"][0, 1] = 7.0
    assert p.flat[16 + 1] == 7.0
