import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petc_lab import trigger as trg
from petc_lab.dynamics import PENDULUM_P
from petc_lab.errors import ConfigError, DomainError, ProtocolViolation

X0 = np.array([0.43, 0.0])


def sigma_z_by_hand(x, u, h, m, m_bar, mu):
    """Growth prediction written out with plain numpy for the pendulum."""
    f = np.array([x[1], 0.1 * (math.sin(x[0]) - u * math.cos(x[0]))])
    g = 2 * PENDULUM_P @ x
    r = h * (m - m_bar + 1)
    gn, fn = np.linalg.norm(g), np.linalg.norm(f)
    return r * (g @ f) + (2 / 3) * r ** 1.5 * mu * (gn * fn + fn ** 2)


@pytest.fixture
def fresh(pendulum):
    model, _ = pendulum
    return trg.initialize(X0, model, nu=1000)


def test_initialize(pendulum, fresh):
    model, _ = pendulum
    assert fresh.i_ref == 0 and fresh.m_bar == 0
    assert fresh.V_ref == pytest.approx(1.278 * 0.43 ** 2, rel=1e-14)
    np.testing.assert_array_equal(fresh.u_star, model.feedback(X0))
    zero = trg.initialize(np.zeros(2), model, nu=5)
    assert zero.V_ref == 0.0 and np.all(zero.u_star == 0.0)
    with pytest.raises(ConfigError):
        trg.initialize(X0, model, nu=0)
    with pytest.raises(DomainError):
        trg.initialize(np.array([2.0, 0.0]), model, nu=5)


def test_sigma_z_at_origin_is_zero(pendulum, reference_constants):
    model, _ = pendulum
    state = trg.initialize(np.zeros(2), model, nu=10)
    assert trg.sigma_z(model, reference_constants, np.zeros(2), state) == 0.0


def test_sigma_z_matches_independent_evaluation(pendulum, reference_constants, fresh):
    model, _ = pendulum
    c = reference_constants
    expected = sigma_z_by_hand(X0, fresh.u_star[0], c.h, c.m, 0, c.mu_c)
    got = trg.sigma_z(model, c, X0, fresh)
    assert got == pytest.approx(expected, rel=1e-12)
    # negative decrease term dominates at the certified h
    assert got < 0


def test_sigma_z_positive_term_shrinks_with_losses(pendulum, reference_constants, fresh):
    model, _ = pendulum
    x = np.array([0.3, -0.2])
    lossy = replace(fresh, m_bar=1)
    pos = lambda s: sigma_z_by_hand(x, s.u_star[0], reference_constants.h, 1, s.m_bar,  # noqa: E731
                                    reference_constants.mu_c) - sigma_z_by_hand(
        x, s.u_star[0], reference_constants.h, 1, s.m_bar, 0.0)
    assert 0 < pos(lossy) < pos(fresh)
    assert trg.sigma_z(model, reference_constants, x, lossy) == pytest.approx(
        sigma_z_by_hand(x, fresh.u_star[0], reference_constants.h, 1, 1, reference_constants.mu_c), rel=1e-12)


def test_forced_send_after_nu(pendulum, reference_constants, fresh):
    model, _ = pendulum
    d = trg.evaluate(fresh.nu + 1, np.zeros(2), model, reference_constants, fresh)
    assert d.send and d.reason == trg.Reason.FORCED_BY_NU
    d = trg.evaluate(fresh.nu, np.zeros(2), model, reference_constants, fresh)
    assert not d.send and d.reason == trg.Reason.NO_SEND


def test_no_send_at_origin_within_nu(pendulum, reference_constants, fresh):
    model, _ = pendulum
    c = reference_constants
    for z in (1, fresh.nu // 2, fresh.nu):
        d = trg.evaluate(z, np.zeros(2), model, c, fresh)
        assert not d.send
        assert d.threshold > 0


def test_rule_violation_sends(pendulum, reference_constants, fresh):
    model, _ = pendulum
    d = trg.evaluate(1, X0 * 1.05, model, reference_constants, fresh)
    assert d.send and d.reason == trg.Reason.RULE_VIOLATED
    with pytest.raises(ConfigError):
        trg.evaluate(0, X0, model, reference_constants, fresh)


def test_tie_triggers(pendulum, reference_constants):
    # at the origin with V_ref = 0 both sides are exactly 0, and >= sends
    model, _ = pendulum
    state = trg.initialize(np.zeros(2), model, nu=100)
    d = trg.evaluate(3, np.zeros(2), model, reference_constants, state)
    assert d.sigma_z == 0.0 and d.threshold == 0.0
    assert d.send and d.reason == trg.Reason.RULE_VIOLATED


def test_exponential_threshold(pendulum, reference_constants, fresh):
    model, _ = pendulum
    c = reference_constants
    K = model.decay_rate
    state = replace(fresh, rule=trg.TriggerRule.exponential(K))
    d = trg.evaluate(7, X0, model, c, state)
    steps = 7 + c.m + 1
    assert d.threshold == pytest.approx(math.exp(-K * c.sigma * steps * c.h) * fresh.V_ref, rel=1e-14)


def test_linear_threshold(pendulum, reference_constants, fresh):
    model, _ = pendulum
    c = reference_constants
    lossy = replace(fresh, m_bar=1)
    d = trg.evaluate(7, X0, model, c, lossy)
    steps = 7 + c.m - 1 + 1
    assert d.threshold == pytest.approx(fresh.V_ref - steps * c.h * c.sigma * model.gamma(fresh.V_ref),
                                        rel=1e-14)


states = st.tuples(st.floats(-0.45, 0.45), st.floats(-0.6, 0.6))


@settings(max_examples=200, deadline=None)
@given(states, states, st.integers(1, 5000), st.integers(0, 1), st.floats(0.0, 50.0))
def test_adaptive_superset_of_linear(pendulum, reference_constants, xs, xr, dz, m_bar, cn):
    model, ls = pendulum
    x, x_ref = np.array(xs), np.array(xr)
    if not (ls.contains(x) and ls.contains(x_ref)):
        return
    base = replace(trg.initialize(x_ref, model, nu=4000), m_bar=m_bar)
    lin = trg.evaluate(dz, x, model, reference_constants, base)
    zero = trg.evaluate(dz, x, model, reference_constants,
                        replace(base, rule=trg.TriggerRule.adaptive([(0, 0.0)])))
    ada = trg.evaluate(dz, x, model, reference_constants,
                       replace(base, rule=trg.TriggerRule.adaptive([(0, cn)])))
    assert zero == lin                      # c_n = 0 reduces to the linear rule
    assert ada.threshold <= lin.threshold
    if lin.send:
        assert ada.send


def test_evaluate_is_pure(pendulum, reference_constants, fresh):
    model, _ = pendulum
    x = np.array([0.1, 0.2])
    assert trg.evaluate(9, x, model, reference_constants, fresh) == \
        trg.evaluate(9, x, model, reference_constants, fresh)


def test_transmission_results(pendulum, fresh):
    model, _ = pendulum
    x = np.array([0.1, -0.1])
    ok = trg.on_transmission_result(fresh, 5, x, model, True, m=1)
    assert (ok.i_ref, ok.m_bar) == (5, 0)
    assert ok.V_ref == model.lyapunov(x)
    np.testing.assert_array_equal(ok.u_star, model.feedback(x))
    lost = trg.on_transmission_result(fresh, 5, x, model, False, m=1)
    assert lost.m_bar == 1 and lost.i_ref == 0 and lost.V_ref == fresh.V_ref
    with pytest.raises(ProtocolViolation):
        trg.on_transmission_result(lost, 6, x, model, False, m=1)


def test_cn_schedule():
    s = trg.CnSchedule([(10, 0.5), (0, 0.1), (20, 0.0)])
    assert [s(z) for z in (0, 9, 10, 19, 20, 10 ** 7)] == [0.1, 0.1, 0.5, 0.5, 0.0, 0.0]
    assert trg.CnSchedule([(5, 1.0)])(4) == 0.0
    with pytest.raises(ConfigError):
        trg.CnSchedule([(0, -0.1)])
    with pytest.raises(ConfigError):
        trg.CnSchedule([(0, 0.1), (0, 0.2)])


def test_rule_validation():
    with pytest.raises(ConfigError):
        trg.TriggerRule("quadratic")
    with pytest.raises(ConfigError):
        trg.TriggerRule.exponential(0.0)
    assert trg.TriggerRule("adaptive").cn(3) == 0.0


def test_default_nu():
    assert trg.default_nu(0.5, 2.0, 0.1) == 10
    assert trg.default_nu(0.35, 1.27, 1.385e-5) == math.ceil(1 / (0.35 * 1.27 * 1.385e-5))
    assert trg.default_nu(0.5, 1.0, 1e-12) == trg.NU_CAP
