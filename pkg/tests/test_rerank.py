import math

import numpy as np
import pytest

from keymem.numerics import finite_diff_check
from keymem.rerank import (
    CrossAttnParams,
    attention_weights,
    cross_attend,
    cross_attend_backward,
    cross_attend_batch,
    fuse,
    pool,
)
from keymem.retrieval import RetrievalResult


def retrieved(keys, values):
    keys, values = np.asarray(keys, float), np.asarray(values, float)
    return RetrievalResult(np.arange(len(keys)), np.zeros(len(keys)), keys, values)


def straight_line_attention(q, keys, values, wq, wk, wv, heads):
    """Loop-per-head reference, written without the batched einsums."""
    d = len(q)
    dh = d // heads
    out = []
    qp, Kp, Vp = q @ wq, keys @ wk, values @ wv
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = [math.fsum(qp[sl] * kr[sl]) / math.sqrt(dh) for kr in Kp]
        mx = max(s)
        e = [math.exp(x - mx) for x in s]
        a = [x / math.fsum(e) for x in e]
        out.extend(sum(a[j] * Vp[j, sl] for j in range(len(a))))
    return np.array(out)


def test_identity_single_head_example():
    p = CrossAttnParams.identity(2)
    r = retrieved([[1, 0], [0, 1]], [[2, 0], [0, 2]])
    out = cross_attend(p, np.array([1.0, 0.0]), r)
    a = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    assert np.allclose(out, [2 * a, 2 * (1 - a)], atol=1e-12)
    ref = straight_line_attention(np.array([1.0, 0.0]), r.keys, r.values, np.eye(2), np.eye(2), np.eye(2), 1)
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_random_multihead_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 4))
        k = int(rng.integers(1, 7))
        p = CrossAttnParams.init(d, heads, seed=int(rng.integers(1 << 30)))
        q = rng.normal(size=d)
        r = retrieved(rng.normal(size=(k, d)), rng.normal(size=(k, d)))
        ref = straight_line_attention(q, r.keys, r.values, p.wq, p.wk, p.wv, heads)
        assert np.max(np.abs(cross_attend(p, q, r) - ref)) <= 1e-12
        w = attention_weights(p, q, r)
        assert np.all(np.abs(w.sum(axis=-1) - 1) <= 1e-9)


def test_identical_keys_give_mean_of_projected_values():
    rng = np.random.default_rng(1)
    p = CrossAttnParams.init(4, 2, seed=3)
    vals = rng.normal(size=(5, 4))
    out = cross_attend(p, rng.normal(size=4), retrieved(np.tile(rng.normal(size=4), (5, 1)), vals))
    assert np.allclose(out, (vals @ p.wv).mean(axis=0), atol=1e-12)


def test_single_retrieved_row_ignores_score():
    p = CrossAttnParams.init(4, 2, seed=5)
    v = np.array([[1.0, -2.0, 0.5, 3.0]])
    for scale in (1e-3, 1.0, 1e3):
        r = RetrievalResult(np.array([0]), np.array([scale]), np.array([[scale, 0, 0, 0]]), v)
        assert np.allclose(cross_attend(p, np.ones(4) * scale, r), v[0] @ p.wv, atol=1e-12)


def test_empty_retrieval_is_an_error():
    with pytest.raises(ValueError):
        cross_attend(CrossAttnParams.identity(2), [1.0, 0.0], retrieved(np.zeros((0, 2)), np.zeros((0, 2))))


def test_pool_examples():
    assert np.allclose(pool([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
    assert pool([0.0, 0.0]).tolist() == [0.0, 0.0]
    rng = np.random.default_rng(2)
    for _ in range(100):
        v = rng.normal(size=int(rng.integers(1, 20))) * rng.uniform(1e-6, 1e6)
        assert abs(np.linalg.norm(pool(v)) - 1) <= 1e-12


def test_fuse_order_and_shape():
    f = fuse([3.0, 4.0], [0.0, 0.0])
    assert np.allclose(f.vector, [0.6, 0.8, 0, 0], atol=1e-15)
    a, b = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    assert fuse(a, b).vector.shape == (4,)
    assert not np.array_equal(fuse(a, b).vector, fuse(b, a).vector)


def test_fused_parts_unit_or_zero_under_probe_scaling():
    rng = np.random.default_rng(3)
    p = CrossAttnParams.init(6, 3, seed=1)
    r = retrieved(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)))
    q = rng.normal(size=6)
    for c in (0.01, 1.0, 7.0, 300.0):
        part = fuse(cross_attend(p, c * q, r), np.zeros(6))
        assert abs(np.linalg.norm(part.doc_part) - 1) <= 1e-9
        assert np.linalg.norm(part.graph_part) == 0


def _check_backward(seed):
    rng = np.random.default_rng(seed)
    d, k, N, heads = 8, 3, 2, 2
    p = CrossAttnParams.init(d, heads, seed=seed)
    q, K, V = rng.normal(size=(N, d)), rng.normal(size=(N, k, d)), rng.normal(size=(N, k, d))
    R = rng.normal(size=(N, d))
    out, cache = cross_attend_batch(p, q, K, V)
    grads, dq = cross_attend_backward(p, cache, R)
    worst = 0.0
    for name in ("wq", "wk", "wv"):
        w = getattr(p, name)

        def f(x, w=w):
            old = w.copy()
            w[...] = x.reshape(w.shape)
            val = float((cross_attend_batch(p, q, K, V)[0] * R).sum())
            w[...] = old
            return val

        worst = max(worst, finite_diff_check(f, grads[name], w.copy(), 1e-6))
    fq = lambda x: float((cross_attend_batch(p, x.reshape(N, d), K, V)[0] * R).sum())  # noqa: E731
    return max(worst, finite_diff_check(fq, dq, q, 1e-6))


@pytest.mark.parametrize("seed", range(5))
def test_backward_finite_difference(seed):
    assert _check_backward(seed) <= 1e-4


def test_backward_zero_upstream_and_frozen_memory():
    rng = np.random.default_rng(9)
    p = CrossAttnParams.init(4, 2, seed=2)
    K, V = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))
    K0, V0 = K.copy(), V.copy()
    out, cache = cross_attend_batch(p, rng.normal(size=(1, 4)), K, V)
    grads, dq = cross_attend_backward(p, cache, np.zeros((1, 4)))
    assert all(not g.any() for g in grads.values()) and not dq.any()
    assert set(grads) == {"wq", "wk", "wv"}
    assert np.array_equal(K, K0) and np.array_equal(V, V0)


def test_attention_dropout_only_in_training():
    rng = np.random.default_rng(4)
    p = CrossAttnParams.init(4, 2, seed=2, dropout_rate=0.5)
    q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
    a, _ = cross_attend_batch(p, q, K, V)
    b, _ = cross_attend_batch(p, q, K, V)
    assert np.array_equal(a, b)
    c, _ = cross_attend_batch(p, q, K, V, train=True, rng=np.random.default_rng(0))
    assert not np.allclose(a, c)
