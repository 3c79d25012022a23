import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from subdiff.analysis import (
    DIVERGES, LOG_CASE, AnalysisError, fit_eig0ub, functionals_from_psi, gradient_quadrature, limit_constant,
    log_mean, mode_variance_target, rate_class, smoothed_constant, smoothed_constant_derivative,
    w2_lower_both, w2_lower_functional, w2_upper_bound,
)
from subdiff.bernstein import make_bernstein
from subdiff.domain import make_domain
from subdiff.pathsim import accumulate, simulate_paths

PI = math.pi
D1 = make_domain("interval", [PI])
D2 = make_domain("box", [PI, 2.0])
D4 = make_domain("box", [PI] * 4)
DRIFT = make_bernstein("drift", a=1.0)
ST05 = make_bernstein("stable", alpha=0.5)
ST075 = make_bernstein("stable", alpha=0.75)
# 10^6-term direct summation of 2 / (m (m + 2))^2 (scripts/freeze_oracles.py)
LIMIT_SUM_1E6 = 0.2699340668482263


def test_log_mean_examples():
    assert log_mean(2, 1) == pytest.approx(1 / math.log(2), abs=1e-6)
    assert log_mean(3.7, 3.7) == 3.7
    assert log_mean(0, 3) == 0.0
    with pytest.raises(AnalysisError):
        log_mean(-1, 2)


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_log_mean_between_geometric_and_arithmetic(a, b):
    m = log_mean(a, b)
    assert math.sqrt(a * b) * (1 - 1e-9) <= m <= 0.5 * (a + b) * (1 + 1e-9)
    assert m == pytest.approx(log_mean(b, a), rel=1e-12)


def test_log_mean_continuity():
    a = 1.7
    assert log_mean(a, a * (1 + 1e-7)) == pytest.approx(a, rel=1e-6)


def test_limit_constant_drift_interval():
    lc = limit_constant(D1, DRIFT)
    assert lc.value == pytest.approx(PI**2 / 6 - 11 / 8, rel=1e-6)
    assert lc.value == pytest.approx(LIMIT_SUM_1E6, rel=1e-6)
    assert lc.tail_bound < 1e-6 * lc.value


def test_limit_constant_stable_interval():
    lc = limit_constant(D1, ST075)
    k = np.arange(2, 10**6 + 2, dtype=float)
    direct = np.sum(2.0 / ((k**2 - 1) * (k**1.5 - 1)))
    assert 0 < lc.value < math.inf
    assert lc.value == pytest.approx(direct, rel=1e-6)


def test_limit_constant_divergence():
    assert limit_constant(D4, DRIFT).value == DIVERGES
    assert limit_constant(make_domain("box", [PI] * 3), ST05).value == DIVERGES
    assert limit_constant(make_domain("box", [PI] * 3), DRIFT).value != DIVERGES
    with pytest.raises(AnalysisError):
        limit_constant(D2, make_bernstein("gamma"))
    with pytest.raises(AnalysisError):
        limit_constant(D1, DRIFT, tol=0)


def test_limit_constant_box_tail_certified():
    a = limit_constant(D2, DRIFT, tol=1e-6)
    b = limit_constant(D2, DRIFT, tol=1e-8)
    assert b.m_used > a.m_used
    assert abs(a.value - b.value) < 1e-6 * b.value


def test_smoothed_constant_increases_to_limit():
    vals = [smoothed_constant(D1, DRIFT, r) for r in (1e-1, 1e-2, 1e-3, 1e-5)]
    assert np.all(np.diff(vals) > 0)
    lim = limit_constant(D1, DRIFT).value
    assert vals[-1] < lim and vals[-1] == pytest.approx(lim, rel=1e-3)
    assert smoothed_constant(D1, DRIFT, 0.0) == pytest.approx(lim)


def test_smoothed_constant_single_mode_regime():
    r = 0.5  # m = 2 term is (9/64) e^{-10 r} < 1% of the first
    g = 3.0
    first = 2 * math.exp(-2 * g * r) / (g * g)
    assert smoothed_constant(D1, DRIFT, r) == pytest.approx(first, rel=0.01)


def test_smoothed_constant_log_growth_d4():
    rs = [0.08, 0.04, 0.02, 0.01]
    vals = np.array([smoothed_constant(D4, DRIFT, r) for r in rs])
    inc = np.diff(vals)
    # Weyl: growth coefficient 4 c_1 log(1/r), c_1 = vol omega_4 / (2 pi)^4 = pi^2 / 32
    slope = 4 * PI**2 / 32 * math.log(2)
    assert np.all(inc > 0.3) and np.all(inc < 1.05 * slope)
    # power growth would multiply the increments; logarithmic growth keeps them level
    assert np.all(inc[1:] / inc[:-1] < 1.2)
    with pytest.raises(AnalysisError):
        smoothed_constant(D4, DRIFT, 0.0)


@pytest.mark.parametrize("domain,B,r", [(D1, DRIFT, 0.05), (D1, ST05, 0.3), (D2, DRIFT, 0.02)])
def test_smoothed_derivative_fd(domain, B, r):
    h = 1e-4 * r
    fd = (smoothed_constant(domain, B, r + h) - smoothed_constant(domain, B, r - h)) / (2 * h)
    assert smoothed_constant_derivative(domain, B, r) == pytest.approx(fd, rel=1e-4)


def test_functionals_zero_and_unit():
    F = functionals_from_psi(D1, DRIFT, np.zeros(6), r=0.1)
    assert F.gradient_seminorm == F.inverse_norm == F.sup_norm == 0.0
    assert w2_upper_bound(F) == 0.0 and w2_lower_functional(F) == 0.0
    e1 = functionals_from_psi(D1, DRIFT, [1.0, 0.0, 0.0], r=0.0)
    assert e1.gradient_seminorm == pytest.approx(1 / 3)
    assert e1.inverse_norm == pytest.approx(1 / 9)
    inf = functionals_from_psi(D1, DRIFT, [1.0, 2.0], r=math.inf)
    assert inf.gradient_seminorm == inf.inverse_norm == inf.sup_norm == 0.0


def test_functionals_errors():
    with pytest.raises(AnalysisError):
        functionals_from_psi(D1, DRIFT, np.ones(D1.m_trunc + 1))
    with pytest.raises(AnalysisError):
        functionals_from_psi(D1, DRIFT, [0.1], r=-1.0)


@pytest.mark.parametrize("domain", [D1, D2], ids=["interval", "box"])
def test_parseval(domain):
    rng = np.random.default_rng(3)
    F = functionals_from_psi(domain, DRIFT, rng.normal(size=8) * 0.2, r=0.05)
    quad, _ = gradient_quadrature(F)
    assert quad == pytest.approx(F.gradient_seminorm, rel=1e-6)


def test_upper_bound_guard():
    F = functionals_from_psi(D1, DRIFT, [3.0], r=0.0)
    with pytest.raises(AnalysisError):
        w2_upper_bound(F)
    assert w2_upper_bound(F, mixture=0.9) > 0


def _w2sq_density(F, n=4000):
    """W_2^2(rho mu_0, mu_0) on [0, pi]: Newton inversion of the perturbed CDF, Gauss in x."""
    gaps = D1.eigenvalues[1 : F.psi.size + 1] - D1.eigenvalues[0]
    c = F.psi * np.exp(-gaps * F.r)
    k = np.arange(1, c.size + 1)

    def cdf(y):  # int_0^y phi_k phi_0 dmu, mu = dx / pi
        y = y[:, None]
        base = (y[:, 0] - np.sin(2 * y[:, 0]) / 2) / PI
        return base + ((np.sin(k * y) / k - np.sin((k + 2) * y) / (k + 2)) / PI) @ c

    def dens(y):
        return 2 / PI * np.sin(y) * (np.sin(y) + np.sin(np.outer(y, k + 1)) @ c)

    g, w = special.roots_legendre(n)
    x, w = PI / 2 * (g + 1), PI / 2 * w
    target = (x - np.sin(2 * x) / 2) / PI
    y = x.copy()
    for _ in range(50):
        y = np.clip(y - (cdf(y) - target) / dens(y), 1e-12, PI - 1e-12)
    return float(np.sum(w * 2 / PI * np.sin(x) ** 2 * (y - x) ** 2))


def _summary_functionals(r):
    batch = next(simulate_paths(D1, DRIFT, "qsd", 40.0, 0.1, 1, "doob_is", seed=11))
    s = accumulate(next(iter(batch)), 40.0, 40, D1)
    return functionals_from_psi(D1, DRIFT, s.psi, r=r)


@pytest.mark.parametrize("r", [0.05, 0.2, 1.0])
def test_upper_bounds_dominate_transport(r):
    F = _summary_functionals(r)
    assert F.sup_norm < 0.5
    w2 = _w2sq_density(F)
    quad, _ = gradient_quadrature(F)
    assert w2 <= w2_upper_bound(F) <= 4 * quad
    # the log-mean bound is nearly sharp for small perturbations
    assert w2_upper_bound(F) <= 1.02 * w2


def test_lower_functional_below_transport():
    F = _summary_functionals(3.5)
    w2 = _w2sq_density(F)
    lower = w2_lower_both(F)
    # the correction is small here, so both readings are non-trivial
    assert lower["inverse"] > 0 and lower["gradient"] > 0
    assert lower["inverse"] <= w2 and lower["gradient"] <= w2


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-0.3, 0.3), min_size=1, max_size=6), st.floats(0.01, 2.0))
def test_functionals_nonnegative_and_bound_order(psi, r):
    F = functionals_from_psi(D1, DRIFT, psi, r=r)
    assert F.gradient_seminorm >= 0 and F.inverse_norm >= 0 and F.sup_norm >= 0
    # (-L_0)^{-1} gains one factor of the gap >= 3 over the seminorm
    assert F.inverse_norm <= F.gradient_seminorm / 3 + 1e-15
    if F.sup_norm < 1:
        assert w2_upper_bound(F) <= 4 * F.gradient_seminorm * (1 + 1e-9)


def test_rate_class_examples():
    rc = rate_class(1, 1.0, True)
    assert rc.exponent == -1.0 and rc.constant_available
    assert rate_class(3, 0.4).exponent == pytest.approx(-2 / 2.2)
    assert rate_class(4, 1.0).exponent == LOG_CASE
    assert not rate_class(1, 1.0, boundary_convex=False).constant_available
    assert not rate_class(2, 0.5).constant_available
    with pytest.raises(AnalysisError):
        rate_class(2, 1.5)


def test_mode_variance_target():
    assert mode_variance_target(D1, DRIFT, 1) == pytest.approx(2 / 3, rel=1e-9)
    assert mode_variance_target(D1, ST05, 1) == pytest.approx(2.0, rel=1e-9)
    v = [mode_variance_target(D1, ST05, m) for m in range(1, 20)]
    assert np.all(np.diff(v) < 0)
    with pytest.raises(AnalysisError):
        mode_variance_target(D1, DRIFT, 0)


def test_eig0ub_growth():
    # sup |sin((m+1)x) / sin x| = m + 1 on the interval
    np.testing.assert_allclose(D1.ratio_sup(np.arange(1, 6)), np.arange(2, 7), rtol=1e-3)
    for dom in (D1, D2):
        a50, a100 = fit_eig0ub(dom, 50), fit_eig0ub(dom, 100)
        assert a100 <= 1.1 * a50
