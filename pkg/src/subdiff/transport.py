"""Wasserstein distances between discrete measures and the quasi-stationary law.

Convention: ``W_q = (inf_pi int rho^q dpi)^(1 / max(q, 1))``; for ``q < 1`` no root
is taken.  Solvers:

* ``quantile``: monotone coupling in one dimension (``q >= 1``), exact against the
  closed-form CDF of mu_0;
* ``exact_lp``: transportation LP (HiGHS) or assignment for equal uniform sizes;
  one-dimensional concave costs with unit masses use an exact level-set dynamic
  program (optimal concave matchings on the line are non-crossing);
* ``sinkhorn``: debiased log-domain entropic OT with epsilon annealing.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import optimize, special
from scipy.spatial import cKDTree

from .domain import Domain, qsd_axis_cdf, qsd_axis_first_moment, qsd_axis_quantile, qsd_sample

LP_MAX_ATOMS = 512
DP_MAX_ATOMS = 200_000
METHODS = ("quantile", "exact_lp", "sinkhorn", "assignment")


class TransportError(ValueError):
    pass


@dataclass
class DiscreteMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if a.shape[0] != w.size:
            raise TransportError("atoms and weights differ in length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12 * max(1, w.size):
            raise TransportError("weights must be nonnegative and sum to 1")
        self.atoms, self.weights = a, w

    @classmethod
    def uniform(cls, atoms):
        a = np.asarray(atoms, dtype=float)
        n = a.shape[0]
        return cls(a, np.full(n, 1.0 / n))

    @property
    def n(self):
        return self.atoms.shape[0]

    @property
    def d(self):
        return self.atoms.shape[1]

    def pruned(self):
        keep = self.weights > 0
        w = self.weights[keep]
        return DiscreteMeasure(self.atoms[keep], w / w.sum())

    def is_uniform(self):
        return bool(np.all(self.weights == self.weights[0]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.d)] + ["weight"])
            for x, p in zip(self.atoms, self.weights):
                w.writerow([repr(float(v)) for v in x] + [repr(float(p))])

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(data[:, :-1], data[:, -1])


@dataclass
class TransportResult:
    value: float
    q: float
    method: str
    cost: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def _outer(cost, q):
    return max(cost, 0.0) ** (1.0 / max(q, 1.0))


def cost_matrix(x, y, q):
    d2 = np.maximum(
        np.sum(x**2, 1)[:, None] + np.sum(y**2, 1)[None, :] - 2.0 * x @ y.T, 0.0
    )
    return d2 if q == 2 else d2 ** (q / 2.0)


def _as_measure(m):
    if isinstance(m, DiscreteMeasure):
        return m
    return DiscreteMeasure.uniform(np.asarray(m, dtype=float))


# -- one dimension, convex costs -----------------------------------------------

def _qsd_second_partial(y, L):
    """``int_0^y u^2 (2/L) sin^2(pi u / L) du``."""
    k = 2.0 * np.pi / L
    s, c = np.sin(k * y), np.cos(k * y)
    return (y**3 / 3.0 - (y**2 * s / k + 2.0 * y * c / k**2 - 2.0 * s / k**3)) / L


def w_exact_1d(mu_a, mu_b, q=2.0):
    """Monotone-coupling W_q on the line; ``mu_b`` may be a :class:`Domain` (meaning mu_0)."""
    if q < 1:
        raise TransportError("q < 1: the monotone coupling is not optimal; use ot_discrete_exact")
    a = _as_measure(mu_a)
    if a.d != 1:
        raise TransportError("w_exact_1d needs one-dimensional atoms")
    order = np.argsort(a.atoms[:, 0], kind="stable")
    xa, wa = a.atoms[order, 0], a.weights[order]
    if isinstance(mu_b, Domain):
        if mu_b.d != 1:
            raise TransportError("mu_0 target must live on an interval")
        cost = _w_to_qsd_1d(xa, wa, mu_b.lengths[0], q)
        return TransportResult(_outer(cost, q), q, "quantile", cost)
    b = _as_measure(mu_b)
    ob = np.argsort(b.atoms[:, 0], kind="stable")
    xb, wb = b.atoms[ob, 0], b.weights[ob]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    u = np.unique(np.concatenate([[0.0], ca, cb]))
    du = np.diff(u)
    mid = 0.5 * (u[1:] + u[:-1])
    ia = np.minimum(np.searchsorted(ca, mid), xa.size - 1)
    ib = np.minimum(np.searchsorted(cb, mid), xb.size - 1)
    cost = float(np.sum(du * np.abs(xa[ia] - xb[ib]) ** q))
    return TransportResult(_outer(cost, q), q, "quantile", cost)


@functools.lru_cache(maxsize=64)
def _uniform_pieces(n, L):
    """Quantile breakpoints and partial moments of mu_0 for n equal pieces."""
    c = np.arange(n + 1) / n
    y = qsd_axis_quantile(c, L)
    return c, y, np.diff(qsd_axis_first_moment(y, L)), np.diff(_qsd_second_partial(y, L))


def _w_to_qsd_1d(x, w, L, q):
    if np.all(w == w[0]):
        c, y, m1, m2 = _uniform_pieces(w.size, L)
    else:
        c = np.concatenate([[0.0], np.cumsum(w)])
        c[-1] = 1.0
        y = qsd_axis_quantile(c, L)
        m1 = np.diff(qsd_axis_first_moment(y, L))
        m2 = np.diff(_qsd_second_partial(y, L))
    if q == 2:
        return float(np.sum(np.maximum(w * x**2 - 2.0 * x * m1 + m2, 0.0)))
    # General q >= 1: Gauss-Legendre in u per piece, split where Q(u) crosses the atom.
    g, gw = np.polynomial.legendre.leggauss(24)
    total = 0.0
    for i in range(x.size):
        lo, hi = c[i], c[i + 1]
        cut = float(np.clip(qsd_axis_cdf(x[i], L), lo, hi))
        for a_, b_ in ((lo, cut), (cut, hi)):
            if b_ > a_:
                u = 0.5 * (b_ - a_) * (g + 1.0) + a_
                total += 0.5 * (b_ - a_) * float(np.sum(gw * np.abs(x[i] - qsd_axis_quantile(u, L)) ** q))
    return total


# -- exact discrete solvers ------------------------------------------------------

@numba.njit(cache=True)
def _match_level(x, p):
    """Optimal non-crossing matching of alternating-colour points x (sorted), cost |.|^p."""
    n = x.size
    f = np.zeros((n + 1, n + 1))
    # f[i, j]: optimal cost for points i..j-1 (j - i even).
    for length in range(2, n + 1, 2):
        for i in range(0, n - length + 1):
            j = i + length
            best = np.inf
            for k in range(i + 1, j, 2):
                c = abs(x[k] - x[i]) ** p + f[i + 1, k] + f[k + 1, j]
                if c < best:
                    best = c
            f[i, j] = best
    return f[0, n]


def _concave_matching_1d(red, blue, p):
    """Exact min sum |r - b|^p over perfect matchings of equal-size point sets, 0 < p <= 1."""
    pts = np.concatenate([red, blue])
    col = np.concatenate([np.ones(red.size, dtype=np.int64), -np.ones(blue.size, dtype=np.int64)])
    order = np.lexsort((-col, pts))
    pts, col = pts[order], col[order]
    h = np.concatenate([[0], np.cumsum(col)])
    level = np.minimum(h[:-1], h[1:])
    total = 0.0
    lv_order = np.argsort(level, kind="stable")
    lv_sorted = level[lv_order]
    bounds = np.flatnonzero(np.diff(lv_sorted)) + 1
    for grp in np.split(lv_order, bounds):
        if grp.size % 2:
            raise TransportError("unbalanced level set")
        total += _match_level(pts[grp], float(p))
    return total


def ot_discrete_exact(mu_a, mu_b, q=2.0):
    a, b = _as_measure(mu_a).pruned(), _as_measure(mu_b).pruned()
    if a.d != b.d:
        raise TransportError("dimension mismatch")
    n, m = a.n, b.n
    if a.d == 1 and q < 1 and a.is_uniform() and b.is_uniform():
        ka, kb = m // math.gcd(n, m), n // math.gcd(n, m)
        if ka * n <= DP_MAX_ATOMS:
            red = np.repeat(a.atoms[:, 0], ka)
            blue = np.repeat(b.atoms[:, 0], kb)
            units = red.size
            cost = _concave_matching_1d(red, blue, q) / units
            return TransportResult(_outer(cost, q), q, "exact_lp", cost, {"solver": "level_dp", "units": units})
    if n > LP_MAX_ATOMS or m > LP_MAX_ATOMS:
        raise TransportError(f"exact LP limited to {LP_MAX_ATOMS} atoms per measure (got {n}, {m})")
    C = cost_matrix(a.atoms, b.atoms, q)
    if n == m and a.is_uniform() and b.is_uniform():
        r, c = optimize.linear_sum_assignment(C)
        cost = float(C[r, c].sum() / n)
        return TransportResult(_outer(cost, q), q, "exact_lp", cost, {"solver": "assignment"})
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = optimize.linprog(
        C.ravel(), A_eq=A_eq[:-1], b_eq=np.concatenate([a.weights, b.weights])[:-1],
        bounds=(0, None), method="highs",
    )
    if res.status != 0:
        raise TransportError(f"LP failed: {res.message}")
    dual = float(res.eqlin.marginals @ np.concatenate([a.weights, b.weights])[:-1])
    diag = {"solver": "highs", "duality_gap": abs(float(res.fun) - dual)}
    return TransportResult(_outer(res.fun, q), q, "exact_lp", float(res.fun), diag)


# -- entropic -------------------------------------------------------------------

def _lse(M, axis):
    return special.logsumexp(M, axis=axis)


def _sinkhorn(la, lb, C, eps_list, max_iter, tol, f=None, g=None, symmetric=False):
    """Log-domain Sinkhorn; returns potentials, dual value, iterations and marginal error."""
    f = np.zeros(C.shape[0]) if f is None else f
    g = np.zeros(C.shape[1]) if g is None else g
    it, err = 0, np.inf
    for stage, eps in enumerate(eps_list):
        last = stage == len(eps_list) - 1
        budget = max_iter if last else max(1, max_iter // (4 * len(eps_list)))
        for _ in range(budget):
            it += 1
            if symmetric:
                f = 0.5 * (f - eps * _lse(lb[None, :] + (f[None, :] - C) / eps, axis=1))
                g = f
            else:
                f = -eps * _lse(lb[None, :] + (g[None, :] - C) / eps, axis=1)
                g = -eps * _lse(la[:, None] + (f[:, None] - C) / eps, axis=0)
            if last or it % 10 == 0:
                P = np.exp(la[:, None] + lb[None, :] + (f[:, None] + g[None, :] - C) / eps)
                err = float(np.abs(P.sum(1) - np.exp(la)).sum() + np.abs(P.sum(0) - np.exp(lb)).sum())
                if err < tol:
                    break
    value = float(np.exp(la) @ f + np.exp(lb) @ g)
    return f, g, value, it, err


def mean_nn_cost(x, y, q):
    """Mean over atoms of x of the cost to the nearest atom of y."""
    dist, _ = cKDTree(y).query(x, k=1)
    return float(np.mean(dist**q))


def ot_entropic(mu_a, mu_b, q=2.0, eps=None, max_iter=2000, tol=1e-8, eps_start=0.1):
    """Debiased entropic cost ``S_eps = OT(a,b) - OT(a,a)/2 - OT(b,b)/2``."""
    a, b = _as_measure(mu_a).pruned(), _as_measure(mu_b).pruned()
    if eps is None:
        eps = 0.01 * max(mean_nn_cost(a.atoms, b.atoms, q), 1e-12)
    if not eps > 0:
        raise TransportError("eps must be positive")
    sched = [eps]
    if eps_start > eps:
        n_stage = int(math.ceil(math.log(eps_start / eps) / math.log(4.0)))
        sched = list(np.geomspace(eps_start, eps, n_stage + 1))
    la, lb = np.log(a.weights), np.log(b.weights)
    Cab = cost_matrix(a.atoms, b.atoms, q)
    _, _, oab, it_ab, err_ab = _sinkhorn(la, lb, Cab, sched, max_iter, tol)
    _, _, oaa, it_aa, err_aa = _sinkhorn(la, la, cost_matrix(a.atoms, a.atoms, q), sched, max_iter, tol, symmetric=True)
    _, _, obb, it_bb, err_bb = _sinkhorn(lb, lb, cost_matrix(b.atoms, b.atoms, q), sched, max_iter, tol, symmetric=True)
    cost = oab - 0.5 * oaa - 0.5 * obb
    diag = {
        "eps": eps, "iterations": it_ab + it_aa + it_bb,
        "marginal_error": max(err_ab, err_aa, err_bb),
        "converged": max(err_ab, err_aa, err_bb) < tol,
    }
    return TransportResult(_outer(cost, q), q, "sinkhorn", float(cost), diag)


# -- distance to mu_0 -------------------------------------------------------------

def qsd_quantile_grid(domain, n):
    if domain.d != 1:
        raise TransportError("quantile grids are one-dimensional")
    u = (np.arange(n) + 0.5) / n
    return qsd_axis_quantile(u, domain.lengths[0])


@dataclass
class ReferenceClouds:
    """Two independent mu_0 clouds and the debiased cost between them."""

    c1: np.ndarray
    c2: np.ndarray
    bias: float

    @classmethod
    def build(cls, domain, n_ref, seed, q=2.0, **kw):
        ss = np.random.SeedSequence([seed, 0x5EF])
        r1, r2 = (np.random.default_rng(s) for s in ss.spawn(2))
        c1, c2 = qsd_sample(domain, n_ref, r1), qsd_sample(domain, n_ref, r2)
        bias = 0.5 * ot_entropic(c1, c2, q, **kw).cost
        return cls(c1, c2, bias)


def w_to_qsd(summary, domain, q=2.0, method="quantile", n_ref=4096, seed=0, clouds=None, bias=None, **kw):
    """``W_q(mu_t, mu_0)`` for an empirical summary (or an atom array).

    Sample-based methods in d >= 2 subtract a reference-cloud bias estimated from
    independent mu_0 clouds (``sinkhorn``: half the debiased cost between two
    clouds of size n_ref; ``assignment``: half the exact cost between clouds of
    the summary's size, unless ``bias`` is supplied)."""
    atoms = getattr(summary, "atoms", summary)
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    mu = DiscreteMeasure.uniform(atoms)
    if method == "quantile":
        if domain.d != 1 or q < 1:
            raise TransportError("quantile method needs d = 1 and q >= 1")
        return w_exact_1d(mu, domain, q)
    if method == "exact_lp":
        if domain.d == 1:
            ref = qsd_quantile_grid(domain, n_ref)[:, None]
        else:
            ref = qsd_sample(domain, n_ref, seed)
        res = ot_discrete_exact(mu, DiscreteMeasure.uniform(ref), q)
        res.diagnostics["n_ref"] = n_ref
        return res
    if method == "sinkhorn":
        if domain.d < 2:
            raise TransportError("sinkhorn is reserved for d >= 2; use quantile")
        clouds = clouds or ReferenceClouds.build(domain, n_ref, seed, q)
        res = ot_entropic(mu, clouds.c1, q, **kw)
        raw = res.cost
        cost = raw - clouds.bias
        res.diagnostics.update({"raw_cost": raw, "cloud_bias": clouds.bias, "n_ref": clouds.c1.shape[0]})
        return TransportResult(_outer(cost, q), q, "sinkhorn", cost, res.diagnostics)
    if method == "assignment":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA55]))
        n = atoms.shape[0]
        raw = assignment_cost(atoms, qsd_sample(domain, n, rng), q)
        if bias is None:
            bias = cloud_bias(domain, n, seed, n_pairs=2, q=q)[0] if domain.d >= 2 else 0.0
        cost = raw - bias
        diag = {"n_ref": n, "raw_cost": raw, "cloud_bias": bias}
        return TransportResult(_outer(cost, q), q, "assignment", cost, diag)
    raise TransportError(f"unknown method {method!r}")


def assignment_cost(x, y, q=2.0):
    """Exact optimal cost between two equal-size uniform clouds (Hungarian algorithm)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.shape != y.shape:
        raise TransportError("assignment needs equal-size clouds")
    C = cost_matrix(x, y, q)
    r, c = optimize.linear_sum_assignment(C)
    return float(C[r, c].mean())


def cloud_bias(domain, n, seed, n_pairs=8, q=2.0):
    """Half the mean exact cost between independent mu_0 clouds of size n, with stderr."""
    vals = []
    for k in range(n_pairs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1A5, n, k]))
        vals.append(0.5 * assignment_cost(qsd_sample(domain, n, rng), qsd_sample(domain, n, rng), q))
    vals = np.asarray(vals)
    se = float(vals.std(ddof=1) / math.sqrt(n_pairs)) if n_pairs > 1 else 0.0
    return float(vals.mean()), se
