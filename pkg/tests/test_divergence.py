import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, rel_err
from frappe_kit.divergence import (LINEAR, LOGISTIC, MSE, GlmFamily, KLBernoulli, bregman_glm, design_matrix,
                                   divergence, divergence_from_dict, divergence_to_dict, kl_bernoulli,
                                   mse_divergence)
from frappe_kit.errors import DimError, SchemaError


def kl_direct(zb, zf):
    pb, pf = 1 / (1 + np.exp(-zb)), 1 / (1 + np.exp(-zf))
    return np.mean(pb * np.log(pb / pf) + (1 - pb) * np.log((1 - pb) / (1 - pf)))


def test_kl_examples():
    assert kl_bernoulli([0.3, -2.0], [0.3, -2.0]).value == 0.0
    res = kl_bernoulli([0.0], [math.log(3.0)])
    assert res.value == pytest.approx(0.5 * math.log(4 / 3), abs=1e-15)
    assert res.value == pytest.approx(0.143841, abs=1e-6)
    np.testing.assert_array_equal(kl_bernoulli([1.0, -1.0], [1.0, -1.0]).grad, 0.0)
    with pytest.raises(DimError):
        kl_bernoulli([0.0], [0.0, 1.0])


def test_kl_matches_direct_formula_and_gradient(rng):
    for reverse in (False, True):
        zb, zf = rng.normal(size=64) * 2, rng.normal(size=64) * 2
        res = kl_bernoulli(zb, zf, reverse)
        expected = kl_direct(zf, zb) if reverse else kl_direct(zb, zf)
        assert res.value == pytest.approx(expected, rel=1e-12)
        num = central_diff(lambda v: kl_bernoulli(zb, v, reverse).value, zf)
        assert rel_err(res.grad, num) <= 1e-6
    sig = lambda z: 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(kl_bernoulli(zb, zf).grad, (sig(zf) - sig(zb)) / 64, atol=1e-17)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30)), min_size=1, max_size=20))
def test_divergences_nonnegative(pairs):
    zb, zf = np.array(pairs).T
    assert kl_bernoulli(zb, zf).value >= 0
    assert kl_bernoulli(zb, zf, reverse=True).value >= 0
    assert mse_divergence(zb, zf).value >= 0


def test_mse_examples(rng):
    assert mse_divergence([0.0, 0.0], [1.0, 3.0]).value == 5.0
    assert mse_divergence([1.0, 2.0], [1.0, 2.0]).value == 0.0
    b, f = rng.normal(size=10), rng.normal(size=10)
    res = mse_divergence(b, f)
    np.testing.assert_allclose(res.grad, 2 * (f - b) / 10, rtol=1e-15)
    assert rel_err(res.grad, central_diff(lambda v: mse_divergence(b, v).value, f)) <= 1e-8


def test_divergence_spec_round_trip():
    for spec in (KLBernoulli(), KLBernoulli(reverse=True), MSE()):
        assert divergence_from_dict(divergence_to_dict(spec)) == spec
    assert divergence_from_dict("MSE") == MSE()
    with pytest.raises(SchemaError):
        divergence_from_dict({"type": "Hellinger"})
    assert divergence(MSE(), [0.0], [2.0]).value == 4.0


def test_bregman_examples():
    x = np.array([[1.0]])
    assert bregman_glm([2.0], [0.0], x, LINEAR) == 4.0
    assert bregman_glm([0.7], [0.7], x, LOGISTIC) == 0.0
    with pytest.raises(DimError):
        bregman_glm([1.0, 2.0], [0.0], x, LINEAR)
    with pytest.raises(SchemaError):
        GlmFamily("poisson")


def bregman_direct_logistic(theta, theta_base, x):
    """Term-by-term definition with explicit loops."""
    n = x.shape[0]
    a_t = a_b = 0.0
    grad = np.zeros_like(theta_base)
    for row in x:
        zt, zb = float(row @ theta), float(row @ theta_base)
        a_t += math.log1p(math.exp(zt)) if zt < 30 else zt + math.log1p(math.exp(-zt))
        a_b += math.log1p(math.exp(zb)) if zb < 30 else zb + math.log1p(math.exp(-zb))
        grad += row / (1 + math.exp(-zb))
    return a_t / n - a_b / n - float(grad / n @ (theta - theta_base))


def test_bregman_logistic_two_implementations(rng):
    for _ in range(20):
        x = design_matrix(rng.normal(size=(30, 3)))
        t, tb = rng.normal(size=4), rng.normal(size=4)
        assert bregman_glm(t, tb, x, LOGISTIC) == pytest.approx(bregman_direct_logistic(t, tb, x), abs=1e-10)


def test_bregman_nonnegative_and_linear_identity(rng):
    for _ in range(50):
        x = design_matrix(rng.normal(size=(20, 3)))
        t, tb = rng.normal(size=4) * 3, rng.normal(size=4) * 3
        assert bregman_glm(t, tb, x, LOGISTIC) >= -1e-10
        mse = np.mean((x @ t - x @ tb) ** 2)
        assert abs(bregman_glm(t, tb, x, LINEAR) - mse) <= 1e-10


def test_glm_losses_reproduce_standard_losses(rng):
    x = rng.normal(size=(25, 3))
    y = (rng.random(25) < 0.5).astype(float)
    t = rng.normal(size=3)
    z = x @ t
    assert LOGISTIC.mean_loss(t, x, y) == pytest.approx(np.mean(np.logaddexp(0, z) - y * z), rel=1e-13)
    yr = rng.normal(size=25)
    assert LINEAR.mean_loss(t, x, yr) == pytest.approx(np.mean((z - yr) ** 2) - np.mean(yr ** 2), rel=1e-12)
