import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from numba import njit

from conftest import REF_H_SIGMA, REF_L1, REF_SIGMA, linear_model, reference_overrides
from petc_lab import certify, dynamics
from petc_lab.errors import AssumptionViolation, ConfigError

A_TEST = np.array([[0.0, 1.0], [-2.0, -3.0]])
P_TEST = np.array([[1.25, 0.25], [0.25, 0.25]])   # solves A'P + PA = -I for A_TEST


def spectral_norm_power_iteration(A, iters=500):
    v = np.ones(A.shape[1])
    for _ in range(iters):
        v = A.T @ (A @ v)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(A @ v))


@pytest.fixture(scope="module")
def linear_case():
    assert np.allclose(A_TEST.T @ P_TEST + P_TEST @ A_TEST, -np.eye(2))
    model = linear_model(A_TEST, P_TEST)
    return model, dynamics.LevelSet(model, 1.0)


def test_L1_matches_operator_norm(linear_case):
    model, ls = linear_case
    exact = spectral_norm_power_iteration(A_TEST)
    assert exact == pytest.approx(np.linalg.norm(A_TEST, 2), rel=1e-10)
    est = certify.estimate_L1(model, ls, samples=100_000, seed=0)
    assert est <= exact * (1 + 1e-12)          # a sampled supremum never overshoots
    assert est >= 0.98 * exact


def test_L2_matches_twice_largest_eigenvalue(linear_case):
    model, ls = linear_case
    exact = 2 * np.linalg.eigvalsh(P_TEST).max()
    est = certify.estimate_L2(model, ls, samples=100_000, seed=0)
    assert est <= exact * (1 + 1e-12)
    assert est >= 0.98 * exact


def test_M_max_scalar_closed_form(scalar_decay):
    # f = -x, V = x^2: (|V'||f| + |f|^2) / |V'f| = (2x^2 + x^2) / 2x^2 = 3/2
    model, ls = scalar_decay
    assert certify.estimate_M_max(model, ls, samples=5000) == pytest.approx(1.5, rel=1e-12)


@njit
def _frozen(x, u):
    return np.zeros_like(x)


def test_M_max_raises_when_lie_derivative_vanishes(scalar_decay):
    model, ls = scalar_decay
    flat = dynamics.SystemModel("flat", 1, 1, _frozen, model.feedback, model.lyapunov,
                                model.lyapunov_gradient, model.gamma)
    with pytest.raises(AssumptionViolation):
        certify.estimate_M_max(flat, dynamics.LevelSet(flat, 1.0), samples=1000)


def test_estimates_grow_with_nested_samples(pendulum):
    model, ls = pendulum
    l1 = [certify.estimate_L1(model, ls, samples=n, seed=2, n_inputs=4) for n in (1000, 2000, 4000)]
    l2 = [certify.estimate_L2(model, ls, samples=n, seed=2) for n in (1000, 2000, 4000)]
    assert l1[0] <= l1[1] <= l1[2]
    assert l2[0] <= l2[1] <= l2[2]


def test_halton_prefix_stability(pendulum):
    _, ls = pendulum
    a = certify.halton_in_set(ls, 300, seed=5)
    b = certify.halton_in_set(ls, 900, seed=5)
    np.testing.assert_array_equal(a, b[:300])
    assert ls.contains_many(b).all()


def test_pendulum_L2_estimate(pendulum):
    # V is quadratic, so V' is linear with Lipschitz constant 2 |P|
    model, ls = pendulum
    exact = 2 * np.linalg.eigvalsh(dynamics.PENDULUM_P).max()
    est = certify.estimate_L2(model, ls, samples=100_000)
    assert 0.98 * exact <= est <= exact * (1 + 1e-12)


def test_mu_examples():
    assert certify.compute_mu(1.0, 1.0) == pytest.approx(4.3670, abs=5e-5)
    assert certify.compute_mu(10.0, 0.0) == pytest.approx(16.487, abs=5e-4)
    assert certify.compute_mu(0.0, 0.0) == 0.0


def test_reference_pendulum_sigma_masp():
    o = reference_overrides()
    mu = certify.compute_mu(o["L1c"], o["L2c"])
    bound = certify.compute_sigma_masp(mu, o["M_max_c"], o["L1c"], REF_SIGMA)
    assert bound.branch == "first"
    assert bound.value == pytest.approx(REF_H_SIGMA, rel=1e-12)
    # second term of the minimum is about 1/4.3 for the pendulum
    assert 1 / (1 + 2 * REF_L1) == pytest.approx(1 / 4.3, rel=1e-12)


def test_certified_period(reference_constants):
    c = reference_constants
    assert c.h_sigma_masp == pytest.approx(2.77e-5, rel=1e-12)
    assert c.h == pytest.approx(1.385e-5, rel=1e-12)
    assert (c.m + 1) * c.h <= c.h_sigma_masp
    assert c.compliant
    assert c.active_branch == c.prior_branch == "first"
    assert c.bound_ratio == pytest.approx(2.25, rel=1e-12)
    assert c.provenance == {"L1c": "override", "L2c": "override", "M_max_c": "override",
                            "mu_c": "formula"}


positive = st.floats(1e-3, 1e3, allow_nan=False)
sigmas = st.floats(0.01, 0.99)


@settings(max_examples=300)
@given(positive, positive, positive, sigmas)
def test_bound_ratio_is_nine_fourths_or_one(mu, M, L1, sigma):
    new = certify.compute_sigma_masp(mu, M, L1, sigma)
    prior = certify.compute_masp_prior(mu, M, L1, sigma)
    assert new.value >= prior.value
    if new.branch == prior.branch == "first":
        assert new.value / prior.value == pytest.approx(2.25, rel=1e-12)
    if new.branch == prior.branch == "second":
        assert new.value == prior.value == 1 / (1 + 2 * L1)


@settings(max_examples=200)
@given(positive, positive, positive, sigmas, sigmas)
def test_bound_nonincreasing_in_sigma(mu, M, L1, s1, s2):
    assume(s1 < s2)
    a = certify.compute_sigma_masp(mu, M, L1, s1).value
    b = certify.compute_sigma_masp(mu, M, L1, s2).value
    assert b <= a


@settings(max_examples=200)
@given(positive, positive, positive, sigmas, st.floats(1.0, 10.0))
def test_bound_nonincreasing_in_constants(mu, M, L1, sigma, scale):
    base = certify.compute_sigma_masp(mu, M, L1, sigma).value
    assert certify.compute_sigma_masp(mu * scale, M, L1, sigma).value <= base
    assert certify.compute_sigma_masp(mu, M * scale, L1, sigma).value <= base
    assert certify.compute_sigma_masp(mu, M, L1 * scale, sigma).value <= base


@given(st.floats(1e-9, 1.0), st.integers(0, 20))
def test_period_for_losses(h_masp, m):
    h = certify.period_for_losses(h_masp, m)
    assert (m + 1) * h <= h_masp
    assert h == pytest.approx(h_masp / (m + 1), rel=1e-14)


@pytest.mark.parametrize("sigma", [0.0, 1.0, 1.2, -0.1])
def test_sigma_outside_unit_interval(sigma):
    with pytest.raises(ConfigError):
        certify.compute_sigma_masp(1.0, 1.0, 1.0, sigma)


def test_zero_curvature_selects_second_branch():
    b = certify.compute_sigma_masp(0.0, 5.0, 1.0, 0.5)
    assert b == (1 / 3, "second")


def test_safety_factor_and_m(pendulum):
    model, ls = pendulum
    raw = certify.RawEstimates(1.0, 2.0, 3.0)
    c0 = certify.certify_system(model, ls, 0.5, 0, estimates=raw)
    assert (c0.L1c, c0.L2c, c0.M_max_c) == pytest.approx((1.1, 2.2, 3.3), rel=1e-15)
    assert c0.mu_c == certify.compute_mu(c0.L1c, c0.L2c)
    assert c0.h == c0.h_sigma_masp
    c2 = certify.certify_system(model, ls, 0.5, 2, estimates=raw)
    assert c2.h == pytest.approx(c0.h / 3, rel=1e-14)
    with pytest.raises(ConfigError):
        certify.certify_system(model, ls, 0.5, -1, estimates=raw)


def test_override_validation():
    with pytest.raises(ConfigError, match="unknown constant"):
        certify.EstimationConfig(overrides={"L3": 1.0})
    with pytest.raises(ConfigError):
        certify.EstimationConfig(safety_factor=0.5)


def test_report_and_csv_roundtrip(reference_constants):
    c = reference_constants
    text = c.report()
    assert "h = 1.3850000000000000e-05" in text
    assert "active_branch = 'first'" in text
    header, row = c.csv_header().split(","), c.csv_row().split(",")
    values = dict(zip(header, row))
    assert float(values["h"]) == c.h
    assert float(values["h_sigma_masp"]) == c.h_sigma_masp
    assert int(values["m"]) == 1


def test_estimated_pendulum_certificate(pendulum):
    model, ls = pendulum
    cfg = certify.EstimationConfig(samples=20_000)
    c = certify.certify_system(model, ls, REF_SIGMA, 1, config=cfg)
    assert c.compliant
    assert c.provenance["L1c"] == "estimate x1.1"
    assert c.h > 0 and math.isfinite(c.h)
    assert c.bound_ratio == pytest.approx(2.25, rel=1e-12)
