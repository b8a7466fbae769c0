import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corexae import tensor as T
from corexae.distributions import (
    BernoulliVec,
    CategoricalDist,
    DiagGaussian,
    bernoulli_log_prob,
    categorical_posterior,
    gauss_kl_general,
    gauss_kl_std,
    gauss_log_prob,
    reparam_sample,
)
from corexae.rng import Rng

LOG_2PI = math.log(2 * math.pi)


def g(mean, log_var):
    return DiagGaussian(np.atleast_2d(mean), np.atleast_2d(log_var))


def test_kl_std_examples():
    assert gauss_kl_std(g([0.0], [0.0])).item() == 0.0
    assert gauss_kl_std(g([1.0], [0.0])).item() == pytest.approx(0.5, abs=1e-15)
    assert gauss_kl_std(g([0.0], [math.log(2)])).item() == pytest.approx(0.5 * (2 - 1 - math.log(2)), abs=1e-12)
    assert gauss_kl_std(g([0.0], [math.log(2)])).item() == pytest.approx(0.153426, abs=1e-6)


def test_kl_general_examples():
    q = g([0.3, -1.0], [0.2, -0.5])
    assert np.allclose(gauss_kl_general(q, q).value, 0.0, atol=1e-15)
    val = gauss_kl_general(g([0.0], [0.0]), g([0.0], [math.log(4)])).item()
    assert val == pytest.approx(0.5 * (math.log(4) + 0.25 - 1), abs=1e-12)
    assert val == pytest.approx(0.318147, abs=1e-6)


def test_kl_general_width_mismatch():
    with pytest.raises(T.ShapeError):
        gauss_kl_general(g([0.0, 1.0], [0.0, 0.0]), g([0.0], [0.0]))


@settings(max_examples=80, deadline=None)
@given(st.floats(-5, 5), st.floats(-8, 8), st.floats(-5, 5), st.floats(-8, 8))
def test_kl_nonnegative_and_std_consistency(mq, lq, mr, lr):
    q, r = g([mq], [lq]), g([mr], [lr])
    assert gauss_kl_general(q, r).item() >= -1e-12
    assert gauss_kl_general(q, g([0.0], [0.0])).item() == pytest.approx(gauss_kl_std(q).item(), abs=1e-12)


def test_kl_matches_monte_carlo():
    q, r = g([0.7], [-0.4]), g([-0.2], [0.6])
    z = reparam_sample(q, Rng(8), 100_000).value[:, 0, 0]
    lq = -0.5 * (LOG_2PI + q.log_var.value[0, 0] + (z - 0.7) ** 2 / q.var.value[0, 0])
    lr = -0.5 * (LOG_2PI + 0.6 + (z + 0.2) ** 2 / math.exp(0.6))
    d = lq - lr
    se = d.std(ddof=1) / math.sqrt(d.size)
    assert abs(d.mean() - gauss_kl_general(q, r).item()) < 3 * se


def test_log_var_clamped():
    q = g([0.0, 0.0], [-50.0, 50.0])
    assert q.log_var.value.tolist() == [[-10.0, 10.0]]


def test_reparam_examples():
    q = g([[1.5, -2.0]], [[0.3, 0.1]])
    assert np.array_equal(reparam_sample(q, Rng(0), eps=np.zeros((1, 1, 2))).value[0], q.mean.value)
    assert reparam_sample(g([0.0], [0.0]), Rng(0), eps=np.ones((1, 1, 1))).item() == 1.0


def test_reparam_variance():
    var = math.exp(0.8)
    z = reparam_sample(g([2.0], [0.8]), Rng(4), 100_000).value.ravel()
    assert abs(z.var() / var - 1) < 0.03


def test_reparam_gradient_flows():
    m, lv = T.parameter(np.array([[0.5]])), T.parameter(np.array([[0.2]]))
    with T.GradTape() as tape:
        z = reparam_sample(DiagGaussian(m, lv), Rng(0), eps=np.full((1, 1, 1), 2.0))
        loss = T.sum(z)
    grads = T.backward(tape, loss)
    assert grads[m].item() == 1.0
    assert grads[lv].item() == pytest.approx(math.exp(0.1), abs=1e-12)


def test_bernoulli_examples():
    assert bernoulli_log_prob(BernoulliVec([[0.0]]), [[1.0]]).item() == pytest.approx(-math.log(2), abs=1e-15)
    assert bernoulli_log_prob(BernoulliVec([[0.0]]), [[0.0]]).item() == pytest.approx(-math.log(2), abs=1e-15)
    v = bernoulli_log_prob(BernoulliVec([[15.0]]), [[1.0]]).item()
    assert v == pytest.approx(-math.log1p(math.exp(-15.0)), rel=1e-12)
    assert v == pytest.approx(-3.06e-7, rel=1e-2)


def test_bernoulli_logits_clamped_and_finite():
    p = BernoulliVec([[-400.0, 400.0]])
    assert p.logits.value.tolist() == [[-15.0, 15.0]]
    assert 0.0 < p.probs.value.min() and p.probs.value.max() < 1.0
    assert np.all(np.isfinite(bernoulli_log_prob(p, [[1.0, 0.0]]).value))


def test_bernoulli_rejects_non_binary():
    with pytest.raises(ValueError):
        bernoulli_log_prob(BernoulliVec([[0.0]]), [[0.5]])


def test_gauss_log_prob_examples():
    base = -0.5 * LOG_2PI
    assert gauss_log_prob(g([1.0], [0.0]), [[1.0]]).item() == pytest.approx(base, abs=1e-15)
    assert gauss_log_prob(g([1.0], [math.log(4)]), [[3.0]]).item() == pytest.approx(base - 0.5 * math.log(4) - 0.5)
    floor = gauss_log_prob(g([0.0], [-40.0]), [[0.0]]).item()
    assert floor == pytest.approx(-0.5 * (LOG_2PI - 10.0), abs=1e-12)


def test_gauss_log_prob_width_mismatch():
    with pytest.raises(T.ShapeError):
        gauss_log_prob(g([0.0, 0.0], [0.0, 0.0]), [[1.0]])


def test_categorical_examples():
    probs, ent = categorical_posterior(CategoricalDist(np.zeros((1, 10))))
    assert ent.item() == pytest.approx(math.log(10), abs=1e-12)
    _, ent = categorical_posterior(CategoricalDist(np.array([[15.0, 0.0]])))
    assert ent.item() < 1e-5


def test_categorical_peaked_entropy_closed_form():
    # one logit at +15 among K: p_small = 1 / (e^15 + K - 1), entropy = -sum p ln p
    for K in (2, 4, 10, 64):
        logits = np.zeros((1, K))
        logits[0, 0] = 15.0
        z = math.exp(15.0) + K - 1
        big, small = math.exp(15.0) / z, 1.0 / z
        expect = -(big * math.log(big) + (K - 1) * small * math.log(small))
        assert categorical_posterior(CategoricalDist(logits))[1].item() == pytest.approx(expect, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
def test_categorical_normalized(logits):
    probs, ent = categorical_posterior(CategoricalDist(np.array([logits])))
    assert abs(probs.value.sum() - 1.0) < 1e-12
    assert -1e-12 <= ent.item() <= math.log(len(logits)) + 1e-12
