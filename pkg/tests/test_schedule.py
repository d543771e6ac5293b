import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udavi.numerics import make_rng
from udavi.schedule import ScheduleTable, linear_schedule


def test_single_step():
    s = linear_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bars, [0.9], rtol=0, atol=1e-15)


def test_two_steps():
    s = ScheduleTable(np.array([0.1, 0.2]))
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=0, atol=1e-15)


def test_t1000_alpha_bar_matches_independent_product():
    s = linear_schedule(1000, 1e-4, 0.02)
    # independent oracle: log-sum in pure python
    logab = sum(math.log1p(-(1e-4 + (0.02 - 1e-4) * i / 999)) for i in range(1000))
    assert s.alpha_bars[-1] == pytest.approx(math.exp(logab), rel=1e-10)
    assert s.alpha_bars[-1] == pytest.approx(4.035e-5, rel=1e-3)


def test_invalid_range():
    for args in [(10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0), (0, 0.1, 0.2)]:
        with pytest.raises(ValueError):
            linear_schedule(*args)


def test_alpha_bars_decreasing(sched400):
    assert np.all(np.diff(sched400.alpha_bars) < 0)
    assert np.all((sched400.alpha_bars > 0) & (sched400.alpha_bars < 1))
    assert np.all(np.diff(sched400.betas) >= 0)


def test_diffuse_near_identity_at_t1():
    s = linear_schedule(100, 1e-8, 1e-2)
    x0 = make_rng(0).uniform(-1, 1, (4, 4, 1))
    z = make_rng(1).standard_normal((4, 4, 1))
    out = s.diffuse(x0, 1, z)
    assert np.linalg.norm(out - x0) <= math.sqrt(1e-8) * np.linalg.norm(z) + 1e-12


def test_diffuse_zero_input(sched400):
    z = make_rng(1).standard_normal((3, 3, 1))
    out = sched400.diffuse(np.zeros_like(z), 37, z)
    assert np.array_equal(out, np.sqrt(1 - sched400.alpha_bar(37)) * z)


def test_diffuse_variance_monte_carlo(sched400):
    t = 150
    z = make_rng(2).standard_normal((10_000, 4))
    out = sched400.diffuse(np.zeros_like(z), t, z)
    target = 1 - sched400.alpha_bar(t)
    assert abs(out.var(axis=0).mean() / target - 1) < 0.02


def test_t_range_errors(sched400):
    with pytest.raises(ValueError):
        sched400.diffuse(np.zeros(3), 0, np.zeros(3))
    with pytest.raises(ValueError):
        sched400.ikl_weight(401)


def test_ikl_weight_half():
    s = ScheduleTable(np.array([0.5]))
    assert s.ikl_weight(1) == 1.0


def test_ikl_weight_099():
    s = ScheduleTable(np.array([0.01]))
    assert s.ikl_weight(1) == pytest.approx(math.sqrt(99), rel=1e-12)
    assert s.ikl_weight(1) == pytest.approx(9.9499, abs=1e-4)


def test_ikl_weight_decreasing(sched400):
    w = sched400.ikl_weight(np.arange(1, 401))
    assert np.all(np.diff(w) < 0)


def test_bridge_endpoints_exact(sched400):
    assert sched400.bridge_coeffs(0.0) == (1.0, 0.0)
    s1, sb1 = sched400.bridge_coeffs(1.0)
    assert s1 == 0.0
    assert sb1 == math.sqrt(-math.expm1(-sched400.beta_total))


def test_bridge_constant_beta():
    c_over_T = 0.003
    s = ScheduleTable(np.full(50, c_over_T))
    c = 50 * c_over_T  # continuous rate T * beta
    sa, sb = s.bridge_coeffs(0.5)
    assert sa == pytest.approx(0.5, abs=1e-15)
    assert sb == pytest.approx(math.sqrt(1 - math.exp(-c / 2)), abs=1e-15)


def test_beta_total_tracks_alpha_bar(sched400):
    # trapezoid of T*beta against -sum log(1-beta); agree to O(beta^2)
    assert sched400.beta_total == pytest.approx(-np.log(sched400.alpha_bars[-1]), rel=0.02)


def test_bridge_rejects_out_of_range(sched400):
    for a in (-0.1, 1.01, float("nan")):
        with pytest.raises(ValueError):
            sched400.bridge_coeffs(a)


def test_bridge_monotone_and_continuous(sched400):
    a = np.linspace(0, 1, 4001)
    sa, sb = sched400.bridge_coeffs(a)
    assert np.all(np.diff(sa) < 0)
    assert np.all(np.diff(sb) > 0)
    assert np.max(np.abs(np.diff(sa))) < 1e-3
    assert np.max(np.abs(np.diff(sb))) < 2e-2


def test_integral_against_quadrature(sched400):
    from scipy.integrate import quad

    for a in (0.0013, 0.31, 0.5, 0.999):
        ref, _ = quad(sched400.rate, 0, a, points=np.arange(1, 400) / 400, limit=1000)
        assert float(sched400.integral(a)) == pytest.approx(ref, rel=1e-9)


@given(st.integers(1, 400), st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**31))
def test_diffuse_affine_in_x0(t, alpha, beta, seed):
    s = linear_schedule(400, 1e-4, 0.02)
    rng = make_rng(seed)
    x1, x2, z = rng.standard_normal((3, 5))
    lhs = s.diffuse(alpha * x1 + beta * x2, t, z)
    rhs = alpha * s.diffuse(x1, t, z) + beta * s.diffuse(x2, t, z) + (1 - alpha - beta) * s.diffuse(np.zeros(5), t, z)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(st.lists(st.floats(1e-5, 0.5), min_size=2, max_size=30))
def test_weight_decreasing_any_schedule(betas):
    s = ScheduleTable(np.array(betas))
    w = s.ikl_weight(np.arange(1, s.T + 1))
    assert np.all(np.diff(w) < 0)
