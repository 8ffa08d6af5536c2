import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from persam.aggregator import (
    Aggregator,
    Classifier,
    DegenerateAttentionError,
    Projections,
    aggregate,
    class_clinical_relevance,
    class_wise_attention,
    explanatory_attention,
    exploratory_attention,
    pooling_weights,
    project,
)
from persam.autodiff import Tensor
from persam.autodiff import tensor as T
from persam.encoder import TokenMatrix

LN3 = math.log(3.0)


def proj(q_cls=None, k_p=None, q_t=None, k_t=None, v_p=None):
    t = lambda x: None if x is None else Tensor(np.asarray(x, dtype=float))
    return Projections(t(q_cls), t(k_p), t(v_p), t(q_t), t(k_t))


def random_tokens(rng, L, M, C, R):
    return TokenMatrix(Tensor(rng.normal(size=(L + M + C, R))), L, M, C)


def test_identity_projection():
    H = random_tokens(np.random.default_rng(0), 4, 2, 3, 5)
    I = Tensor(np.eye(5))
    p = project(H, I, I, I)
    np.testing.assert_array_equal(p.q_cls.data, H.classes.data)
    np.testing.assert_array_equal(p.k_p.data, H.patches.data)
    np.testing.assert_array_equal(p.v_p.data, H.patches.data)
    np.testing.assert_array_equal(p.q_t.data, H.clinical.data)
    assert p.q_cls.shape[0] == 3 and p.k_p.shape[0] == 4


def test_gradient_reaches_Wq():
    rng = np.random.default_rng(1)
    agg = Aggregator(6, rng)
    att, _ = agg(random_tokens(rng, 5, 2, 3, 6))
    T.tsum(att.a_prime).backward()
    assert np.abs(agg.W_q.grad).sum() > 0


def test_class_wise_values():
    a = class_wise_attention(proj(q_cls=[[1.0, 0.0]], k_p=[[0.0, 1.0], [0.0, -2.0]]))
    np.testing.assert_array_equal(a.data, 0.5)
    a = class_wise_attention(proj(q_cls=[[LN3]], k_p=[[1.0]]))
    assert a.item() == pytest.approx(0.75, abs=1e-15)


def test_class_wise_not_normalized_over_patches():
    a = class_wise_attention(proj(q_cls=[[1.0]], k_p=[[5.0], [5.0], [5.0]]))
    assert a.data.sum() > 2.9


def test_exploratory_values():
    assert exploratory_attention(proj(q_t=[[0.0], [0.0]], k_p=[[1.0]])).item() == 0.5
    one = exploratory_attention(proj(q_t=[[0.7]], k_p=[[1.3]])).item()
    assert one == pytest.approx(1 / (1 + math.exp(-0.91)))
    assert exploratory_attention(proj(q_t=[[LN3], [0.0]], k_p=[[1.0]])).item() == pytest.approx(0.625)


def test_class_clinical_values():
    assert class_clinical_relevance(proj(q_cls=[[1.0]], k_t=[[0.0], [0.0]])).item() == 0.5
    one = class_clinical_relevance(proj(q_cls=[[0.7]], k_t=[[1.3]])).item()
    assert one == pytest.approx(1 / (1 + math.exp(-0.91)))
    assert class_clinical_relevance(proj(q_cls=[[1.0]], k_t=[[LN3], [0.0]])).item() == pytest.approx(0.625)


def test_explanatory_values():
    assert explanatory_attention(Tensor([[1.0]]), Tensor([1.0]), Tensor([1.0])).item() == 1.0
    out = explanatory_attention(Tensor(np.full((2, 3), 0.7)), Tensor([0.5, 0.6, 0.9]), Tensor([0.0, 0.4]))
    np.testing.assert_array_equal(out.data[0], 0.0)
    assert explanatory_attention(Tensor([[0.8]]), Tensor([0.5]), Tensor([0.25])).item() == pytest.approx(0.1)


def test_aggregate_equal_attention_is_mean():
    v = np.random.default_rng(2).normal(size=(4, 3))
    z, w = aggregate(Tensor(np.full((4, 2), 0.3)), Tensor(v))
    np.testing.assert_allclose(z.data, v.mean(axis=0), rtol=1e-12)


def test_aggregate_dominant_patch():
    v = np.random.default_rng(3).normal(size=(4, 3))
    a = np.full((4, 2), 1e-9)
    a[2, 1] = 1.0 - 1e-9
    z, _ = aggregate(Tensor(a), Tensor(v))
    np.testing.assert_allclose(z.data, v[2], atol=1e-7)


def test_aggregate_degenerate_guard():
    with pytest.raises(DegenerateAttentionError):
        pooling_weights(Tensor(np.zeros((3, 2))))


def test_max_ties_go_to_lowest_class():
    a = Tensor(np.array([[0.4, 0.4], [0.2, 0.1]]), requires_grad=True)
    T.tsum(pooling_weights(a) * np.array([1.0, 0.0])).backward()
    assert a.grad[0, 1] == 0.0 and a.grad[0, 0] != 0.0


def test_classifier_contracts():
    rng = np.random.default_rng(4)
    clf = Classifier(5, 7, 3, rng)
    z = Tensor(rng.normal(size=5))
    assert clf(z).data.sum() == pytest.approx(1.0, abs=1e-12)
    last = clf.net.layers[-1]
    last.weight.data[...] = 0.0
    last.bias.data[...] = 0.0
    np.testing.assert_allclose(clf(z).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_shift_invariance_of_argmax():
    logits = np.array([0.2, 1.5, -0.3])
    assert np.argmax(T.softmax(logits).data) == np.argmax(T.softmax(logits + 17.0).data)


@given(st.integers(0, 100_000), st.integers(1, 12), st.integers(1, 3), st.integers(1, 4))
def test_attention_algebra(seed, L, M, C):
    rng = np.random.default_rng(seed)
    R = 6
    agg = Aggregator(R, rng)
    att, p = agg(random_tokens(rng, L, M, C, R))
    a, psi, phi, ap = att.a.data, att.psi.data, att.phi.data, att.a_prime.data
    np.testing.assert_array_equal(ap, a * phi[None, :] * psi[:, None])
    for arr in (a, psi, phi, ap):
        assert np.all((arr > 0) & (arr < 1))
    bound = np.minimum(np.minimum(a, phi[None, :]), psi[:, None])
    assert np.all(ap <= bound)
    z, w = aggregate(att.a_prime, p.v_p)
    assert abs(w.data.sum() - 1.0) < 1e-9
    v = p.v_p.data
    assert np.all(z.data <= v.max(axis=0) + 1e-12) and np.all(z.data >= v.min(axis=0) - 1e-12)


@given(st.integers(0, 100_000), st.floats(0.01, 3.0))
def test_monotone_in_patch_class_score(seed, bump):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(2, 4))
    k = rng.normal(size=(3, 4))
    p0 = proj(q_cls=q, k_p=k, q_t=rng.normal(size=(2, 4)), k_t=rng.normal(size=(2, 4)))
    a0 = class_wise_attention(p0).data
    # raising q_0 . k_0 by moving k_0 along q_0
    k2 = k.copy()
    k2[0] += bump * q[0] / (q[0] @ q[0])
    p1 = proj(q_cls=q, k_p=k2, q_t=p0.q_t.data, k_t=p0.k_t.data)
    a1 = class_wise_attention(p1).data
    assert a1[0, 0] > a0[0, 0]


def test_scaled_flag_divides_by_sqrt_r():
    p = proj(q_cls=[[2.0, 0.0, 0.0, 0.0]], k_p=[[1.0, 0.0, 0.0, 0.0]])
    assert class_wise_attention(p, scaled=True).item() == pytest.approx(1 / (1 + math.exp(-1.0)))
