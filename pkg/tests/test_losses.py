import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from metahar import nn
from metahar.losses import (CE_FLOOR, PairBatch, ZeroEmbeddingError, cosine, cross_entropy, pair_batch_loss,
                            pairwise_loss, pairwise_loss_grad, sample_pairs, softmax_cross_entropy)
from metahar.model import EmbeddingGraph, EmbeddingHyper

phis = st.floats(-1, 1, allow_nan=False)
deltas = st.sampled_from([0, 1])
nonzero_vec = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False)).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


def naive_pairwise(phi, delta, k=10.0):
    s = 1.0 / (1.0 + math.exp(-k * phi))
    return -delta * math.log(s) - (1 - delta) * math.log(1 - s)


# cosine ---------------------------------------------------------------------

@given(nonzero_vec)
def test_cosine_self_is_one(e):
    assert cosine(e, e) == pytest.approx(1.0, abs=1e-12)
    assert cosine(e, -e) == pytest.approx(-1.0, abs=1e-12)


def test_cosine_orthogonal_and_diagonal():
    assert cosine([1, 0], [0, 3]) == 0.0
    assert cosine([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert cosine([1, 0], [1, 1]) == pytest.approx(0.70711, abs=1e-5)


def test_cosine_zero_norm_errors():
    with pytest.raises(ZeroEmbeddingError):
        cosine([0, 0], [1, 1])


@given(nonzero_vec, nonzero_vec)
def test_cosine_range(a, b):
    assert -1.0 <= cosine(a, b) <= 1.0


# pairwise loss --------------------------------------------------------------

def test_pairwise_at_zero_is_ln2():
    assert pairwise_loss(0.0, 1) == pytest.approx(math.log(2), abs=1e-9)
    assert pairwise_loss(0.0, 0) == pytest.approx(math.log(2), abs=1e-9)


def test_pairwise_extremes():
    assert pairwise_loss(1.0, 1) == pytest.approx(4.5399e-5, rel=1e-4)
    assert pairwise_loss(-1.0, 0) == pytest.approx(4.5399e-5, rel=1e-4)
    assert pairwise_loss(1.0, 1) == pytest.approx(-math.log(1 / (1 + math.exp(-10))), rel=1e-12)


@given(phis, deltas)
def test_pairwise_symmetry_exact(phi, delta):
    assert pairwise_loss(phi, delta) == pairwise_loss(-phi, 1 - delta)


@given(phis, deltas)
def test_pairwise_matches_naive_formula(phi, delta):
    assert pairwise_loss(phi, delta) == pytest.approx(naive_pairwise(phi, delta), rel=1e-9, abs=1e-12)
    assert pairwise_loss(phi, delta) >= 0


@given(phis, phis)
def test_pairwise_monotone(a, b):
    lo, hi = sorted([a, b])
    assert pairwise_loss(lo, 1) >= pairwise_loss(hi, 1)
    assert pairwise_loss(lo, 0) <= pairwise_loss(hi, 0)


@given(st.floats(-0.999, 0.999), deltas, st.floats(0.5, 20))
def test_pairwise_grad_finite_difference(phi, delta, slope):
    h = 1e-6
    num = (pairwise_loss(phi + h, delta, slope) - pairwise_loss(phi - h, delta, slope)) / (2 * h)
    ana = pairwise_loss_grad(phi, delta, slope)
    assert abs(ana - num) <= 1e-6 * max(abs(ana), abs(num), 1e-3)


def test_pairwise_vectorized_and_slope_check():
    out = pairwise_loss(np.array([0.0, 1.0]), np.array([1, 1]))
    assert out.shape == (2,)
    with pytest.raises(ValueError):
        pairwise_loss(0.0, 1, slope=0.0)


def test_pair_batch_loss_gradients(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    delta = np.array([1, 0, 1, 0, 0.0])
    loss, ga, gb = pair_batch_loss(a, b, delta)

    def f(a_, b_):
        return float(np.mean([pairwise_loss(cosine(x, y), d) for x, y, d in zip(a_, b_, delta)]))

    assert loss == pytest.approx(f(a, b), rel=1e-12)
    h = 1e-6
    for arr, g, first in ((a, ga, True), (b, gb, False)):
        for idx in np.ndindex(arr.shape):
            up, dn = arr.copy(), arr.copy()
            up[idx] += h
            dn[idx] -= h
            num = (f(up, b) - f(dn, b)) / (2 * h) if first else (f(a, up) - f(a, dn)) / (2 * h)
            assert g[idx] == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_pair_batch_zero_embedding_errors():
    with pytest.raises(ZeroEmbeddingError):
        pair_batch_loss(np.zeros((1, 3)), np.ones((1, 3)), np.array([1.0]))


def test_siamese_grad_equals_two_tied_copies(rng):
    """One batched forward over both members == two separately named copies, gradients summed."""
    hyper = EmbeddingHyper(sensor_axes=(3,), filters=3, embed_dim=5, dropout=0.0)
    base = EmbeddingGraph(hyper).init(rng)
    xa = [rng.normal(size=(4,) + hyper.input_shapes()[0])]
    xb = [rng.normal(size=(4,) + hyper.input_shapes()[0])]
    delta = np.array([1, 0, 0, 1.0])

    emb, tape = nn.forward(EmbeddingGraph(hyper), base, [np.concatenate([xa[0], xb[0]])])
    _, ga, gb = pair_batch_loss(emb[:4], emb[4:], delta)
    shared = nn.backward(tape, np.concatenate([ga, gb]))

    # materialized copies: rename the parameters of each branch
    def renamed(prefix):
        return nn.ParamSet((prefix + k, v) for k, v in base.items())

    two = renamed("A.").merged(renamed("B."))

    def graph(ctx, xs):
        class View:
            def __init__(self, prefix):
                self.prefix = prefix

            def param(self, name):
                return ctx.param(self.prefix + name)

            train, rng = ctx.train, ctx.rng

        g = EmbeddingGraph(hyper)
        return nn.concat([g(View("A."), [xs[0]]), g(View("B."), [xs[1]])], axis=0)

    emb2, tape2 = nn.forward(graph, two, [xa[0], xb[0]])
    np.testing.assert_allclose(emb2, emb, atol=1e-12)
    split = nn.backward(tape2, np.concatenate([ga, gb]))
    for k in base:
        np.testing.assert_allclose(split["A." + k] + split["B." + k], shared[k], atol=1e-8)


# cross-entropy --------------------------------------------------------------

def test_ce_uniform_is_ln_m():
    for m in (2, 4, 7):
        p = np.eye(m)[0]
        assert cross_entropy(p, np.full(m, 1 / m)) == pytest.approx(math.log(m), abs=1e-9)
    assert cross_entropy(np.eye(4)[2], np.full(4, 0.25)) == pytest.approx(1.386294, abs=1e-6)


def test_ce_perfect_prediction_is_zero():
    assert cross_entropy(np.array([0, 1.0]), np.array([0, 1.0])) == 0.0


def test_ce_direct_value():
    assert cross_entropy(np.array([1.0, 0]), np.array([0.8, 0.2])) == pytest.approx(-math.log(0.8), abs=1e-12)
    assert cross_entropy(np.array([1.0, 0]), np.array([0.8, 0.2])) == pytest.approx(0.22314, abs=1e-5)


def test_ce_floor():
    assert cross_entropy(np.array([1.0, 0]), np.array([0.0, 1.0])) == pytest.approx(-math.log(CE_FLOOR))


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_softmax_ce_matches_definition_and_grad(seed, m):
    r = np.random.default_rng(seed)
    z = r.normal(scale=3, size=(5, m))
    y = r.integers(0, m, size=5)
    loss, g = softmax_cross_entropy(z, y)
    q = nn.softmax_array(z)
    ref = np.mean([cross_entropy(np.eye(m)[c], qi) for c, qi in zip(y, q)])
    assert loss == pytest.approx(ref, rel=1e-10)
    h = 1e-6
    for idx in np.ndindex(z.shape):
        up, dn = z.copy(), z.copy()
        up[idx] += h
        dn[idx] -= h
        num = (softmax_cross_entropy(up, y)[0] - softmax_cross_entropy(dn, y)[0]) / (2 * h)
        assert g[idx] == pytest.approx(num, abs=1e-7)


# pair sampling --------------------------------------------------------------

def test_sample_pairs_deterministic():
    labels = np.array([0, 0, 1, 1, 2, 2, 2])
    a = sample_pairs(labels, 50, np.random.default_rng(3))
    b = sample_pairs(labels, 50, np.random.default_rng(3))
    assert np.array_equal(a.first, b.first) and np.array_equal(a.second, b.second)


def test_sample_pairs_balanced():
    labels = np.array([0] * 30 + [1] * 70)
    pb = sample_pairs(labels, 10_000, np.random.default_rng(0))
    assert pb.same.mean() == pytest.approx(0.5, abs=0.02)
    assert np.all(pb.same == (pb.label_first == pb.label_second))


def test_sample_pairs_single_class_all_positive():
    pb = sample_pairs(np.zeros(5, dtype=int), 200, np.random.default_rng(0))
    assert np.all(pb.same == 1)
    assert np.all(pb.first != pb.second)


def test_positive_partner_is_distinct_when_possible():
    labels = np.array([0, 0, 1, 1, 1])
    pb = sample_pairs(labels, 2000, np.random.default_rng(1))
    pos = pb.same == 1
    assert np.all(pb.first[pos] != pb.second[pos])


def test_singleton_class_positive_pairs_itself():
    labels = np.array([0, 1, 1])
    pb = sample_pairs(labels, 500, np.random.default_rng(2))
    pos = (pb.same == 1) & (pb.label_first == 0)
    assert np.all(pb.first[pos] == pb.second[pos])


def test_sample_pairs_errors():
    with pytest.raises(ValueError):
        sample_pairs(np.array([0]), 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_pairs(np.array([0, 1]), 0, np.random.default_rng(0))


@given(st.lists(st.integers(0, 3), min_size=2, max_size=30), st.integers(1, 64), st.integers(0, 1000))
def test_pair_batch_invariants(labels, batch, seed):
    labels = np.array(labels)
    pb = sample_pairs(labels, batch, np.random.default_rng(seed))
    assert len(pb) == batch
    assert np.array_equal(pb.label_first, labels[pb.first]) and np.array_equal(pb.label_second, labels[pb.second])
    assert isinstance(pb, PairBatch)
