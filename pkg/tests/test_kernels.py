import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from subdiff.bernstein import make_bernstein
from subdiff.domain import DomainError, make_domain
from subdiff.kernels import (
    InitialSpec, TruncationError, default_delta, doob_step_sample, kernel, kernel_value, step_sample,
    survival_asymptote, survival_mass, survival_prob,
)

PI = math.pi
D1 = make_domain("interval", [PI])
DRIFT = make_bernstein("drift", a=1.0)
ST05 = make_bernstein("stable", alpha=0.5)
# quadrature value of mu(phi_0) mu_0(phi_0) on [0, pi] (scripts/freeze_oracles.py)
ASYMPTOTE_QSD = 1.0807592921849365


def gauss(L, n):
    g, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * L * (g + 1), 0.5 * w  # weights of the uniform probability mu


def test_dirichlet_ground_mode_domination():
    K = kernel(D1, None, "dirichlet")
    x, y = 1.0, 2.0
    assert K.value(10.0, x, y) == pytest.approx(math.exp(-10) * 2 * math.sin(x) * math.sin(y), rel=1e-6)


def test_drift_subordination_is_identity():
    Kd, Ks = kernel(D1, None, "dirichlet"), kernel(D1, DRIFT)
    x = np.linspace(0.1, 3.0, 9)[:, None]
    np.testing.assert_allclose(Ks.value(0.3, x, x), Kd.value(0.3, x, x), atol=1e-12)


@pytest.mark.parametrize("B", [DRIFT, ST05], ids=["drift", "stable"])
def test_doob_conservative(B):
    K = kernel(D1, B, "doob")
    y, w = gauss(PI, 600)
    w0 = w * 2 * np.sin(y) ** 2
    x = np.random.default_rng(1).uniform(0.01, PI - 0.01, size=(16, 1))
    np.testing.assert_allclose(K.value(0.5, x, y[:, None]) @ w0, 1.0, atol=1e-8)


def test_doob_stationarity():
    K = kernel(D1, DRIFT, "doob")
    x, w = gauss(PI, 600)
    w0 = w * 2 * np.sin(x) ** 2
    y = np.linspace(0.05, 3.1, 11)[:, None]
    np.testing.assert_allclose(w0 @ K.value(0.4, x[:, None], y), 1.0, atol=1e-6)


def test_doob_eigen_identity():
    K = kernel(D1, ST05, "doob")
    y, w = gauss(PI, 600)
    w0 = w * 2 * np.sin(y) ** 2
    x = np.array([[0.4], [1.7]])
    dt = 0.6
    for m in range(1, 5):
        lhs = K.value(dt, x, y[:, None]) @ (w0 * D1.ratio(y[:, None], [m])[:, 0])
        rhs = math.exp(-(K.rates[m] - K.rates[0]) * dt) * D1.ratio(x, [m])[:, 0]
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_doob_identity_relation():
    Kd, K0 = kernel(D1, ST05), kernel(D1, ST05, "doob")
    x = np.linspace(0.2, 2.9, 6)[:, None]
    t = 0.5
    lhs = K0.value(t, x, x) * np.outer(D1.phi0(x), D1.phi0(x)) * math.exp(-K0.rate0 * t)
    np.testing.assert_allclose(lhs, Kd.value(t, x, x), atol=1e-10)


@pytest.mark.parametrize("family,B", [("dirichlet", None), ("subordinated", ST05), ("doob", ST05)])
def test_chapman_kolmogorov(family, B):
    K = kernel(D1, B, family)
    z, w = gauss(PI, 1500)
    if family == "doob":
        w = w * 2 * np.sin(z) ** 2
    rng = np.random.default_rng(4)
    x, y = rng.uniform(0.1, 3.0, size=(4, 1)), rng.uniform(0.1, 3.0, size=(4, 1))
    s, t = rng.uniform(0.3, 1.0, 2)
    lhs = (K.value(s, x, z[:, None]) * w) @ K.value(t, z[:, None], y)
    np.testing.assert_allclose(lhs, K.value(s + t, x, y), rtol=1e-7, atol=1e-12)


def test_chapman_kolmogorov_box():
    D = make_domain("box", [PI, 2.0])
    K = kernel(D, ST05)
    n = 120
    a, wa = gauss(PI, n)
    b, wb = gauss(2.0, n)
    Z = np.stack(np.meshgrid(a, b, indexing="ij"), -1).reshape(-1, 2)
    W = np.outer(wa, wb).ravel()
    x, y = np.array([[1.0, 0.6]]), np.array([[2.0, 1.5]])
    lhs = float(((K.value(0.8, x, Z) * W) @ K.value(0.9, Z, y))[0, 0])
    assert lhs == pytest.approx(float(K.value(1.7, x, y)[0, 0]), rel=1e-7)


def test_subordination_consistency():
    """p^{D,B}_t(x, y) = E p^D_{S_t}(x, y) with S_t drawn from the stable sampler."""
    Kd, Kb = kernel(D1, None, "dirichlet"), kernel(D1, ST05)
    t, x, y = 1.0, 1.0, 2.0
    S = ST05.sample(t, np.random.default_rng(9), 10_000)
    S = S[S > 1e-3]  # the short-time series needs many modes; mass below is negligible here
    n = 10_000
    k = np.arange(1, 400)
    vals = np.exp(-np.outer(S, k**2)) @ (2 * np.sin(k * x) * np.sin(k * y))
    vals = np.concatenate([vals, np.zeros(n - S.size)])
    z = (vals.mean() - Kb.value(t, x, y)) / (vals.std() / math.sqrt(n))
    assert abs(z) < 3


def test_truncation_error():
    K = kernel(D1, ST05, m_trunc=16)
    with pytest.raises(TruncationError):
        K.value(0.01, 1.0, 1.0)


def test_survival_mass_limits():
    K = kernel(D1, DRIFT)
    assert survival_mass(K, 0.02, PI / 2) == pytest.approx(1.0, abs=1e-6)
    x = 1.1
    approx = math.exp(-5.0) * (2 * math.sqrt(2) / PI) * math.sqrt(2) * math.sin(x)
    assert survival_mass(K, 5.0, x) == pytest.approx(approx, rel=0.01)
    ts = np.linspace(0.05, 6, 40)
    s = np.array([survival_mass(K, t, x) for t in ts])
    assert np.all(np.diff(s) <= 1e-15)


def test_survival_prob_asymptote():
    for B in (DRIFT, ST05):
        K = kernel(D1, B)
        assert survival_asymptote(K, "qsd") == pytest.approx(ASYMPTOTE_QSD, rel=1e-9)
        t = 6.0 / K.rate0
        assert math.exp(K.rate0 * t) * survival_prob(K, "qsd", t) == pytest.approx(ASYMPTOTE_QSD, rel=0.01)


def test_survival_prob_lower_bound():
    K = kernel(D1, ST05)
    nu = InitialSpec.coerce({"kind": "point", "point": [0.4]})
    lower = nu.phi_moments(D1)[0] / math.sqrt(2)
    for t in np.linspace(0.3, 8, 12):
        assert survival_prob(K, nu, t) >= lower * math.exp(-K.rate0 * t)


def test_initial_specs():
    with pytest.raises(DomainError):
        InitialSpec.coerce({"kind": "point", "point": [0.0]}).validate(D1)
    p = InitialSpec.coerce({"kind": "point", "point": [1.0]})
    np.testing.assert_allclose(p.phi_moments(D1)[:3], D1.phi(np.array([[1.0]]))[0, :3])
    # nu_0 (normalized phi_0 density) against plain quadrature
    m = InitialSpec.coerce("nu0").phi_moments(D1)[:4]
    ref = [integrate.quad(lambda x, k=k: math.sin(x) / 2 * math.sqrt(2) * math.sin((k + 1) * x), 0, PI)[0]
           for k in range(4)]
    np.testing.assert_allclose(m, ref, atol=1e-10)


def _bin_masses(K, t, x0, edges):
    k = np.arange(1, K.rates.size + 1)
    J = lambda y: math.sqrt(2) * (1 - np.cos(k * y)) / (k * PI)
    coef = np.exp(-K.rates * t) * math.sqrt(2) * np.sin(k * x0)
    return np.array([coef @ (J(b) - J(a)) for a, b in zip(edges[:-1], edges[1:])])


@pytest.mark.slow
def test_step_sample_chi2_and_kill_rate():
    K = kernel(D1, DRIFT)
    dt, x0, n = 0.1, 1.0, 10**6
    y, alive = step_sample(K, np.full(n, x0), dt, np.random.default_rng(2))
    edges = np.linspace(0, PI, 65)
    p = _bin_masses(K, dt, x0, edges)
    cnt = np.histogram(y[alive, 0], edges)[0]
    assert stats.chisquare(cnt, p / p.sum() * cnt.sum()).pvalue > 1e-3
    s = survival_mass(K, dt, x0)
    assert abs(alive.mean() - s) < 3 * math.sqrt(s * (1 - s) / n)


def test_step_large_delta_ground_profile():
    K = kernel(D1, DRIFT)
    y, alive = step_sample(K, np.full(200_000, 0.3), 8.0, np.random.default_rng(3))
    # the survivors follow phi_0 d mu normalized: density sin(y) / 2
    cdf = lambda u: (1 - np.cos(u)) / 2
    assert stats.kstest(y[alive, 0], cdf).pvalue > 1e-3


def test_doob_step_chi2():
    K = kernel(D1, ST05)
    K0 = kernel(D1, ST05, "doob")
    dt, x0, n = 0.5, 2.5, 400_000
    y = doob_step_sample(K, np.full(n, x0), dt, np.random.default_rng(8))
    edges = np.linspace(0, PI, 65)
    f = lambda u: K0.value(dt, x0, u) * 2 / PI * math.sin(u) ** 2
    p = np.array([integrate.quad(f, a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
    cnt = np.histogram(y[:, 0], edges)[0]
    assert stats.chisquare(cnt, p / p.sum() * cnt.sum()).pvalue > 1e-3


def test_box_doob_step_ratio_identity():
    D = make_domain("box", [PI, 2.0])
    K = kernel(D, ST05, m_trunc=4096)
    x0 = np.array([1.0, 0.7])
    n = 100_000
    y = doob_step_sample(K, np.tile(x0, (n, 1)), 2.0, np.random.default_rng(6))
    R = D.ratio(y, [1, 2, 3])
    ex = np.exp(-(K.rates[[1, 2, 3]] - K.rates[0]) * 2.0) * D.ratio(x0, [1, 2, 3])[0]
    z = (R.mean(0) - ex) / (R.std(0) / math.sqrt(n))
    assert np.all(np.abs(z) < 3.5)


def test_default_delta_rule():
    K = kernel(D1, DRIFT)
    dt = default_delta(K)
    assert float(DRIFT(K.domain.eigenvalues[-1])) * dt >= 30 - 1e-9


def test_kernel_value_wrapper():
    K = kernel(D1, DRIFT)
    assert kernel_value(K, 1.0, 0.5, 0.7) == K.value(1.0, 0.5, 0.7)


def test_dump_slice(tmp_path):
    K = kernel(D1, DRIFT)
    K.dump_slice(1.0, [0.5], np.array([[0.1], [0.2]]), tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "x,y,value" and len(rows) == 3


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 3.09), st.floats(0.05, 3.09), st.floats(0.2, 3.0))
def test_symmetry_and_positivity(x, y, t):
    K = kernel(D1, ST05)
    assert K.value(t, x, y) == pytest.approx(K.value(t, y, x), rel=1e-12, abs=1e-300)
    assert K.value(t, x, y) >= 0
    assert 0 <= survival_mass(K, t, x) <= 1
