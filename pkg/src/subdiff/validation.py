"""Named checks for the acceptance criteria and oracle identities.

Each check returns a :class:`Check`; the ``fast`` suite holds the deterministic
identities, ``full`` adds the Monte-Carlo experiments.
"""
from __future__ import annotations

import functools
import inspect
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, stats

from .analysis import (
    LOG_CASE, functionals_from_psi, gradient_quadrature, limit_constant, mode_variance_target,
    series_diverges,
)
from .bernstein import make_bernstein
from .domain import gauss_legendre, make_domain, qsd_sample
from .harness import ExperimentConfig, rate_fit, run_experiment
from .kernels import _axis_mu_phi, kernel
from .pathsim import MODES, composition_simulate, simulate_paths, survival_estimate
from .transport import ot_discrete_exact, ot_entropic, qsd_quantile_grid, w_exact_1d

PI = math.pi


@dataclass
class Check:
    name: str
    criterion: int
    passed: bool
    measured: object
    tolerance: str
    runtime: float = 0.0
    details: dict = field(default_factory=dict)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] criterion {self.criterion} {self.name}: measured={_short(self.measured)} tol={self.tolerance}"

    def to_dict(self):
        return asdict(self)


def _short(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_short(x) for x in v) + "]"
    return str(v)


def _timed(fn):
    @functools.wraps(fn)
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        chk = fn(*a, **kw)
        chk.runtime = time.perf_counter() - t0
        return chk
    return wrapper


# -- fast oracle identities --------------------------------------------------------------

@_timed
def check_ot_quantile(seed=0):
    """Monotone coupling against the exact LP on unequal-size clouds."""
    rng = np.random.default_rng(seed)
    errs = []
    for n, m in [(37, 53), (120, 80), (200, 200)]:
        x, y = rng.normal(size=n), rng.random(m) * 3
        a, b = w_exact_1d(x, y, 2.0).cost, ot_discrete_exact(x, y, 2.0).cost
        errs.append(abs(a - b) / b)
    err = max(errs)
    return Check("ot_exact_vs_quantile", 7, err <= 1e-9, err, "rel <= 1e-9")


@_timed
def check_sinkhorn(seed=0, n=128):
    """Debiased entropic cost against the exact assignment cost, 2-d clouds."""
    rng = np.random.default_rng(seed)
    a, b = rng.random((n, 2)), rng.random((n, 2)) * 1.2
    exact = ot_discrete_exact(a, b, 2.0).cost
    res = ot_entropic(a, b, 2.0, max_iter=20000, tol=1e-6)
    err = abs(res.cost - exact) / exact
    return Check("sinkhorn_vs_exact", 7, err < 0.01, err, "rel < 1%",
                 details={"exact": exact, "sinkhorn": res.cost, **res.diagnostics})


def _bin_probs_1d(K, t, x0, edges, doob=False):
    """Exact per-bin kernel masses on an interval from the closed-form antiderivatives."""
    L = K.domain.lengths[0]
    k = K.domain.mode_indices[:, 0] + 1.0
    if doob:
        Kd = kernel(K.domain, K.B, family="doob", m_trunc=K.m_trunc)
        f = lambda yy: Kd.value(t, x0, yy) * 2.0 / L * math.sin(PI * yy / L) ** 2
        return np.array([integrate.quad(f, a, b, limit=200)[0] for a, b in zip(edges[:-1], edges[1:])])
    J = lambda y: math.sqrt(2.0) * L * (1.0 - np.cos(k * PI * y / L)) / (k * PI)
    coef = np.exp(-K.rates * t) * K.domain.phi(np.array([[x0]]))[0] / L
    return np.array([coef @ (J(b) - J(a)) for a, b in zip(edges[:-1], edges[1:])])


@_timed
def check_sampler_chi2(seed=0, n=200_000):
    """Tabulated skeleton step against exact bin masses (killed and Doob), plus a box step."""
    D = make_domain("interval", [PI])
    K = kernel(D, make_bernstein("stable", alpha=0.5), m_trunc=4096)
    dt, x0 = 2.0, 1.0
    rng = np.random.default_rng(seed)
    S = K.sampler(dt)
    edges = np.linspace(0, PI, 41)
    pvals = {}
    y, alive = S.step(np.full(n, x0), rng)
    p = _bin_probs_1d(K, dt, x0, edges)
    cnt = np.histogram(y[alive, 0], edges)[0]
    pvals["interval_killed"] = float(stats.chisquare(cnt, p / p.sum() * cnt.sum()).pvalue)
    yd = S.doob_step(np.full(n, x0), rng)
    p = _bin_probs_1d(K, dt, x0, edges, doob=True)
    cnt = np.histogram(yd[:, 0], edges)[0]
    pvals["interval_doob"] = float(stats.chisquare(cnt, p / p.sum() * cnt.sum()).pvalue)
    # box: first-axis marginal of the killed step
    Db = make_domain("box", [PI, 2.0])
    Kb = kernel(Db, make_bernstein("drift", a=1.0))
    xb = np.array([1.0, 0.7])
    yb, ab = Kb.sampler(0.3).step(np.tile(xb, (n // 2, 1)), rng)
    idx = Kb.domain.mode_indices
    kk = idx[:, 0] + 1.0
    J = lambda b: math.sqrt(2.0) * (1 - np.cos(kk * b)) / (kk * PI)
    coef = np.exp(-Kb.rates * 0.3) * Db.phi(xb)[0] * _axis_mu_phi(idx[:, 1], 2.0)
    p = np.array([coef @ (J(b) - J(a)) for a, b in zip(edges[:-1], edges[1:])])
    cnt = np.histogram(yb[ab, 0], edges)[0]
    pvals["box_killed"] = float(stats.chisquare(cnt, p / p.sum() * cnt.sum()).pvalue)
    worst = min(pvals.values())
    return Check("sampler_vs_kernel_chi2", 7, worst > 1e-3, worst, "p > 1e-3", details=pvals)


@_timed
def check_composition_ks(seed=0, n=20_000):
    """Spectral skeleton and the subordinator-composition simulator agree in law."""
    D = make_domain("interval", [PI])
    B = make_bernstein("stable", alpha=0.5)
    T, dt, x0 = 4.0, 1.0, 1.0
    comp = composition_simulate(D, B, [x0], T, dt, seed, n_paths=n)
    spec = next(simulate_paths(D, B, {"kind": "point", "point": [x0]}, T, dt, n, "rejection",
                               seed + 1, batch_size=n, K=kernel(D, B, m_trunc=4096)))
    a = comp.positions[comp.survived, -1, 0]
    b = spec.positions[spec.survived, -1, 0]
    ks = float(stats.ks_2samp(a, b).pvalue)
    # survival frequencies as a two-proportion z-test
    pa, pb = a.size / n, b.size / n
    pool = (a.size + b.size) / (2 * n)
    z = (pa - pb) / math.sqrt(2 * pool * (1 - pool) / n)
    pz = float(2 * stats.norm.sf(abs(z)))
    worst = min(ks, pz)
    return Check("composition_vs_spectral_ks", 7, worst > 1e-3, worst, "p > 1e-3",
                 details={"ks_p": ks, "survival_p": pz, "survived": [pa, pb]})


@_timed
def check_chapman_kolmogorov():
    D = make_domain("interval", [PI])
    K = kernel(D, make_bernstein("stable", alpha=0.5))
    g, w = gauss_legendre(1500)
    z, wz = 0.5 * PI * (g + 1), 0.5 * PI * w / PI
    xs = np.array([0.3, 1.0, 2.5])
    s, t = 0.4, 0.7
    lhs = (K.value(s, xs[:, None], z[:, None]) * wz) @ K.value(t, z[:, None], xs[:, None])
    rhs = K.value(s + t, xs[:, None], xs[:, None])
    err = float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
    return Check("chapman_kolmogorov", 7, err <= 1e-7, err, "rel <= 1e-7")


@_timed
def check_doob_conservative():
    errs = []
    for dom, B in [(make_domain("interval", [PI]), make_bernstein("stable", alpha=0.5)),
                   (make_domain("box", [PI, 2.0]), make_bernstein("drift", a=1.0))]:
        K = kernel(dom, B, family="doob")
        per = 400 if dom.d == 1 else 80
        pts, w = _mu0_gauss(dom, per)
        for x in ([0.2] * dom.d, [1.5] * dom.d):
            errs.append(abs(float(K.value(0.5, np.atleast_2d(x), pts)[0] @ w) - 1.0))
    err = max(errs)
    return Check("doob_conservativity", 7, err <= 1e-6, err, "abs <= 1e-6")


def _mu0_gauss(dom, per):
    g, w = gauss_legendre(per)
    axes, ws = [], []
    for L in dom.lengths:
        y = 0.5 * L * (g + 1)
        axes.append(y)
        ws.append(0.5 * L * w * 2.0 / L * np.sin(PI * y / L) ** 2)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, dom.d)
    wm = ws[0]
    for v in ws[1:]:
        wm = np.multiply.outer(wm, v)
    return mesh, wm.ravel()


@_timed
def check_parseval(seed=0):
    """Spectral gradient seminorm against direct quadrature of the gradient field."""
    rng = np.random.default_rng(seed)
    errs = []
    B = make_bernstein("drift", a=1.0)
    for dom in (make_domain("interval", [PI]), make_domain("box", [PI, 2.0])):
        psi = rng.normal(size=8) * 0.1
        F = functionals_from_psi(dom, B, psi, 0.05)
        q, _ = gradient_quadrature(F)
        errs.append(abs(q - F.gradient_seminorm) / F.gradient_seminorm)
    err = max(errs)
    return Check("parseval_functional", 7, err <= 1e-6, err, "rel <= 1e-6")


@_timed
def check_limit_closed_form():
    D = make_domain("interval", [PI])
    lc = limit_constant(D, make_bernstein("drift", a=1.0))
    exact = PI**2 / 6 - 11 / 8
    err = abs(lc.value - exact) / exact
    return Check("limit_constant_closed_form", 1, err <= 1e-6, lc.value, f"|rel err| <= 1e-6 vs {exact:.10f}",
                 details={"rel_err": err, "m_used": lc.m_used})


MATCHING_N = (512, 1024, 2048, 4096, 8192)


@_timed
def check_matching_exponent(seed=0, reps=8, Ns=MATCHING_N, p=0.5):
    """Slope of log E W_p^p(mu_N, mu_0) against log N on an interval (mu_0 via its quantile grid)."""
    D = make_domain("interval", [PI])
    means = []
    for N in Ns:
        grid = qsd_quantile_grid(D, N)[:, None]
        vals = [ot_discrete_exact(qsd_sample(D, N, np.random.default_rng([seed, N, r])), grid, p).cost
                for r in range(reps)]
        means.append(float(np.mean(vals)))
    slope = float(np.polyfit(np.log(Ns), np.log(means), 1)[0])
    target = -p / D.d
    return Check("matching_exponent", 7, abs(slope - target) <= 0.1, slope, f"|slope - ({target})| <= 0.1",
                 details={"N": list(Ns), "mean_cost": means})


@_timed
def check_divergence_grid():
    wrong = []
    grid = {}
    for d in range(1, 5):
        dom = make_domain("interval" if d == 1 else "box", [PI] * d)
        for a in (0.25, 0.5, 0.75, 1.0):
            B = make_bernstein("drift", a=1.0) if a == 1.0 else make_bernstein("stable", alpha=a)
            lc = limit_constant(dom, B, tol=1e-4)
            expect = d >= 2 * (1 + a)
            grid[f"d={d},alpha={a}"] = lc.value
            if lc.diverges != expect or series_diverges(d, a) != expect:
                wrong.append((d, a))
    return Check("divergence_detection", 8, not wrong, wrong or "all 16 cells agree", "exact", details=grid)


FAST = (
    check_ot_quantile, check_sinkhorn, check_sampler_chi2, check_composition_ks,
    check_chapman_kolmogorov, check_doob_conservative, check_parseval, check_limit_closed_form,
    check_matching_exponent, check_divergence_grid,
)


# -- Monte-Carlo criteria ------------------------------------------------------------------

def limit_config(bernstein, out_dir, n_paths=20_000, seed=0, ot_method="quantile", threads=1):
    return ExperimentConfig(
        experiment_id=f"limit_{bernstein['kind']}", domain={"kind": "interval", "lengths": [10 * PI]},
        bernstein=bernstein, nu={"kind": "qsd"}, t_grid=[100.0, 200.0, 400.0, 800.0], delta=0.25,
        n_paths=n_paths, mode="doob_is", ot_method=ot_method, m_psi=5, seed=seed, out_dir=out_dir,
        batch_size=1000,
    )


RATE_GRID = [51.2, 81.2, 128.6, 203.8, 323.0, 512.0]


def rate_config(alpha, out_dir, n_paths=300, seed=0, t_grid=None):
    return ExperimentConfig(
        experiment_id=f"rate_d3_stable{alpha}", domain={"kind": "box", "lengths": [PI] * 3},
        bernstein={"kind": "stable", "alpha": alpha}, nu={"kind": "qsd"}, t_grid=t_grid or RATE_GRID,
        delta=0.2, n_paths=n_paths, mode="doob_is", ot_method="assignment",
        ot_params={"q": 2.0, "n_bias_pairs": 8}, m_psi=3, seed=seed, out_dir=out_dir, batch_size=25,
    )


def _limit_run(out_dir, threads, n_paths):
    cfg = limit_config({"kind": "drift", "a": 1.0}, out_dir, n_paths)
    rows, aux = run_experiment(cfg, threads)
    target = limit_constant(cfg.make_domain(), cfg.make_bernstein()).value
    return cfg, rows, aux, target


@_timed
def check_exact_limit(out_dir="results/validate", threads=1, n_paths=20_000):
    cfg, rows, aux, target = _limit_run(out_dir, threads, n_paths)
    last = rows[-1]
    rel = (last["t_times_value"] - target) / target
    return Check("exact_limit", 1, abs(rel) <= 0.15, last["t_times_value"], f"within 15% of {target:.4f}",
                 details={"rel_err": rel, "t_times_value": [r["t_times_value"] for r in rows],
                          "stderr": [r["stderr"] * r["t"] for r in rows]})


@_timed
def check_lower_bound(out_dir="results/validate", threads=1, n_paths=20_000):
    cfg, rows, aux, target = _limit_run(out_dir, threads, n_paths)
    v = rows[-1]["t_times_value"]
    return Check("lower_bound_sanity", 6, v >= 0.7 * target, v / target, ">= 0.7 x limit constant")


@_timed
def check_mode_variance(out_dir="results/validate", threads=1, n_paths=20_000):
    details, worst = {}, 0.0
    for spec in ({"kind": "drift", "a": 1.0}, {"kind": "stable", "alpha": 0.75}):
        cfg = limit_config(spec, out_dir, n_paths, ot_method="quantile" if spec["kind"] == "drift" else "none")
        rows, aux = run_experiment(cfg, threads)
        dom, B = cfg.make_domain(), cfg.make_bernstein()
        for p in aux["rows"][-1]["psi2"]:
            target = mode_variance_target(dom, B, p["m"])
            rel = (p["t_times_value"] - target) / target
            details[f"{spec['kind']}_m{p['m']}"] = {"measured": p["t_times_value"], "target": target, "rel": rel}
            worst = max(worst, abs(rel))
    return Check("mode_variance_limit", 2, worst <= 0.10, worst, "max |rel| <= 10%", details=details)


@_timed
def check_survival(n_paths=40_000, seed=3):
    D = make_domain("interval", [PI])
    B = make_bernstein("drift", a=1.0)
    K = kernel(D, B)
    details, worst = {}, 0.0
    for T in (2.0, 4.0):  # B(lambda_0) = 1
        exact = K.survival_prob("qsd", T) * math.exp(K.rate0 * T)
        for mode in MODES:
            e = survival_estimate(D, B, "qsd", T, 0.05, n_paths, mode, seed=seed)
            z = (e.value - exact) / e.stderr
            details[f"T={T},{mode}"] = {"estimate": e.value, "stderr": e.stderr, "quadrature": exact, "z": z}
            worst = max(worst, abs(z))
    return Check("survival_asymptotics", 3, worst <= 3.0, worst, "max |z| <= 3", details=details)


@_timed
def check_rate_high_dim(out_dir="results/validate", threads=1, n_paths=300):
    cfg = rate_config(0.4, out_dir, n_paths)
    rows, aux = run_experiment(cfg, threads)
    pred = -2.0 / (3 - 2 * 0.4)
    fit = rate_fit(rows, predicted=pred)
    return Check("rate_exponent_d3", 4, fit.verdict == "consistent", fit.slope,
                 f"|slope - ({pred:.4f})| <= max(2se={2 * fit.slope_stderr:.3f}, 0.15)",
                 details={"fit": asdict(fit), "values": [r["value"] for r in rows],
                          "stderr": [r["stderr"] for r in rows], "t": cfg.t_grid})


@_timed
def check_critical_envelope(out_dir="results/validate", threads=1, n_paths=300):
    cfg = rate_config(0.5, out_dir, n_paths)
    rows, aux = run_experiment(cfg, threads)
    fit = rate_fit(rows, predicted=LOG_CASE)
    return Check("critical_envelope_d3", 5, fit.verdict == "consistent", fit.slope,
                 f"slope of log(t v / log t) <= 0.1 + 2se = {0.1 + 2 * fit.slope_stderr:.3f}",
                 details={"fit": asdict(fit), "t_v_over_log_t": [r["t_times_value"] / math.log(r["t"]) for r in rows]})


FULL = FAST + (check_exact_limit, check_mode_variance, check_survival, check_lower_bound,
               check_rate_high_dim, check_critical_envelope)
SUITES = {"fast": FAST, "full": FULL}


def run_check(fn, out_dir="results/validate", threads=1):
    """Call a check, passing the experiment options it accepts."""
    params = inspect.signature(fn).parameters
    kw = {k: v for k, v in (("out_dir", out_dir), ("threads", threads)) if k in params}
    return fn(**kw)
