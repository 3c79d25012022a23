"""Spectral quantities: limit constants, smoothed functionals of psi, W2 bound functionals,
the logarithmic mean, and predicted convergence rates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .domain import Domain, chebyshev_ratio, gauss_legendre

DIVERGES = "DIVERGES"
LOG_CASE = "LOG_CASE"
GRID_POINTS = 2048


class AnalysisError(ValueError):
    pass


def log_mean(a, b):
    """``(a - b) / (log a - log b)``; continuous value ``a`` at ``a == b``; 0 if a or b is 0."""
    a, b = float(a), float(b)
    if a < 0 or b < 0:
        raise AnalysisError("log_mean needs nonnegative arguments")
    if a == b:
        return a
    if a == 0 or b == 0:
        return 0.0
    return (a - b) / (math.log(a) - math.log(b))


def _log_mean_array(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = np.zeros(a.shape)
    pos = (a > 0) & (b > 0)
    # (a - b) / log(a / b) = b * (x - 1) / log x with x = a / b; series near x = 1.
    x = np.where(pos, a / np.where(pos, b, 1.0), 1.0)
    lx = np.log(x)
    near = np.abs(lx) < 1e-6
    val = np.where(near, 1.0 + lx / 2.0 + lx**2 / 6.0, (x - 1.0) / np.where(near, 1.0, lx))
    out[pos] = (b * val)[pos]
    return out


# -- lattice sums over Dirichlet eigenvalues ----------------------------------------

def _lattice_sum(lengths, lam_cut, g, lam_floor=None):
    """Sum of ``g(lam)`` over all box eigenvalues ``lam_floor < lam <= lam_cut`` (lam_0 excluded)."""
    lengths = np.asarray(lengths, dtype=float)
    base = (np.pi / lengths) ** 2
    lam0 = base.sum()
    lo = lam0 if lam_floor is None else lam_floor
    total, count = 0.0, 0
    if lengths.size == 1:
        k = np.arange(1, int(math.sqrt(lam_cut / base[0])) + 1, dtype=float)
        lam = base[0] * k**2
        sel = (lam > lo * (1 + 1e-14)) & (lam <= lam_cut)
        return float(np.sum(g(lam[sel]))), int(sel.sum())
    # Loop over the first axis, vectorize the rest.
    rest = lengths[1:]
    rest_lam = _axis_grid(rest, lam_cut - base[0])
    k1 = 1
    while base[0] * k1**2 + rest_lam.min(initial=np.inf) <= lam_cut:
        lam = base[0] * k1**2 + rest_lam
        sel = (lam > lo * (1 + 1e-14)) & (lam <= lam_cut)
        if sel.any():
            total += float(np.sum(g(lam[sel])))
            count += int(sel.sum())
        k1 += 1
    return total, count


def _axis_grid(lengths, cut):
    """All eigenvalue sums of the given axes not exceeding ``cut``."""
    out = np.zeros(1)
    for L in lengths:
        b = (np.pi / L) ** 2
        k = np.arange(1, int(math.sqrt(max(cut, 0) / b)) + 1, dtype=float)
        out = (out[:, None] + b * k[None, :] ** 2).ravel()
        out = out[out <= cut]
    return out


def _weyl_density(lengths, lam):
    """Two-term Weyl density dN/dlam for the Dirichlet box."""
    lengths = np.asarray(lengths, dtype=float)
    d = lengths.size
    vol = float(np.prod(lengths))
    area = float(sum(2.0 * np.prod(np.delete(lengths, i)) for i in range(d)))
    omega = lambda k: math.pi ** (k / 2.0) / special.gamma(k / 2.0 + 1.0)
    c1 = vol * omega(d) / (2.0 * math.pi) ** d
    c2 = area * omega(d - 1) / (4.0 * (2.0 * math.pi) ** (d - 1))
    return c1 * (d / 2.0) * lam ** (d / 2.0 - 1.0) - c2 * ((d - 1) / 2.0) * lam ** ((d - 3) / 2.0)


def _weyl_tail(lengths, lam_cut, g):
    f = lambda u: g(math.exp(u)) * _weyl_density(lengths, math.exp(u)) * math.exp(u)
    val, _ = integrate.quad(f, math.log(lam_cut), math.log(lam_cut) + 60.0, limit=400)
    return val


@dataclass
class LimitConstant:
    value: float | str
    tail_bound: float
    m_used: int

    @property
    def diverges(self):
        return self.value == DIVERGES

    def to_dict(self):
        return {"value": self.value, "tail_bound": self.tail_bound, "m_used": self.m_used}


def _declared_alpha(B, alpha):
    if alpha is not None:
        return float(alpha)
    hint = getattr(B, "alpha_hint", None)
    if hint is None:
        raise AnalysisError(f"{B.kind} carries no alpha; pass alpha for the divergence test")
    return float(hint)


def series_diverges(d, alpha):
    return d >= 2.0 * (1.0 + alpha) - 1e-12


def limit_constant(domain: Domain, B, tol=1e-6, alpha=None, lam_max=None):
    """``sum_{m>=1} 2 / ((lam_m - lam_0) (B(lam_m) - B(lam_0)))`` or ``DIVERGES``.

    Partial sums over all modes below a cut plus a two-term Weyl integral for the
    tail; the cut is doubled until the value moves by less than ``tol`` (relative).
    """
    if not tol > 0:
        raise AnalysisError("tol must be positive")
    d = domain.d
    if d >= 2:
        a = _declared_alpha(B, alpha)
        if series_diverges(d, a):
            return LimitConstant(DIVERGES, math.inf, 0)
    lam0 = domain.lambda0
    b0 = float(B(lam0))
    g = lambda lam: 2.0 / ((lam - lam0) * (np.asarray(B(lam)) - b0))
    lam_max = lam_max or {1: 1e14, 2: 1e7, 3: 4e4, 4: 4e3}[d] * lam0
    cut = 64.0 * lam0
    prev, partial, count, lo = None, 0.0, 0, None
    while True:
        s, c = _lattice_sum(domain.lengths, cut, g, lam_floor=lo)
        partial, count, lo = partial + s, count + c, cut
        value = partial + _weyl_tail(domain.lengths, cut, g)
        if prev is not None:
            change = abs(value - prev)
            if change < tol * abs(value) or 2.0 * cut > lam_max:
                return LimitConstant(float(value), float(change), int(count))
        prev = value
        cut *= 2.0 if d > 1 else 4.0


def smoothed_constant(domain: Domain, B, r, alpha=None):
    """``2 sum_{m>=1} exp(-2 (lam_m - lam_0) r) / ((lam_m - lam_0) (B(lam_m) - B(lam_0)))``."""
    if r <= 0:
        if domain.d >= 2 and series_diverges(domain.d, _declared_alpha(B, alpha)):
            raise AnalysisError("r must be positive when the base series diverges")
        lc = limit_constant(domain, B, alpha=alpha)
        return float(lc.value)
    return float(_smoothed_sum(domain, B, r, power=0))


def smoothed_constant_derivative(domain, B, r):
    """``d/dr`` of :func:`smoothed_constant`, termwise."""
    return float(-2.0 * _smoothed_sum(domain, B, r, power=1))


def _smoothed_sum(domain, B, r, power):
    lam0 = domain.lambda0
    b0 = float(B(lam0))
    g = lambda lam: (lam - lam0) ** power * 2.0 * np.exp(-2.0 * (lam - lam0) * r) / (
        (lam - lam0) * (np.asarray(B(lam)) - b0)
    )
    cut = lam0 + 25.0 / r
    s, _ = _lattice_sum(domain.lengths, cut, g)
    return s + _weyl_tail(domain.lengths, cut, g)


def mode_variance_target(domain: Domain, B, m):
    """Limit of ``t E[psi_m(t)^2 | t < sigma]``: ``2 / (B(lam_m) - B(lam_0))``."""
    if m < 1:
        raise AnalysisError("m must be >= 1")
    lam = domain.eigenvalues
    return 2.0 / float(B(lam[m]) - B(lam[0]))


# -- functionals of psi ----------------------------------------------------------------

def _interior_grid(domain, n_total=GRID_POINTS):
    per = max(2, int(math.ceil(n_total ** (1.0 / domain.d))))
    axes = [(np.arange(per) + 0.5) / per * L for L in domain.lengths]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.d)


def _gauss_grid(domain, per_axis):
    g, w = gauss_legendre(per_axis)
    axes = [0.5 * L * (g + 1.0) for L in domain.lengths]
    ws = [0.5 * w for _ in domain.lengths]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.d)
    wt = np.prod(np.stack(np.meshgrid(*ws, indexing="ij"), axis=-1).reshape(-1, domain.d), axis=1)
    # mu_0 weights: phi_0^2 times uniform mu.
    return pts, wt * domain.phi0(pts) ** 2


def ratio_gradient(domain, x, modes):
    """Gradient of ``phi_m / phi_0`` at points ``x``; shape ``(n, n_modes, d)``."""
    x = domain._as_points(x)
    idx = domain.mode_indices[np.asarray(modes)]
    vals, ders = [], []
    for ax, L in enumerate(domain.lengths):
        th = np.pi * x[:, ax] / L
        kmax = int(idx[:, ax].max())
        U = chebyshev_ratio(th, kmax)
        k1 = np.arange(1, kmax + 2)
        s, c = np.sin(th)[:, None], np.cos(th)[:, None]
        dU = (k1 * np.cos(np.outer(th, k1)) * s - np.sin(np.outer(th, k1)) * c) / s**2
        vals.append(U[:, idx[:, ax]])
        ders.append(dU[:, idx[:, ax]] * np.pi / L)
    out = np.empty((x.shape[0], idx.shape[0], domain.d))
    for ax in range(domain.d):
        prod = ders[ax].copy()
        for other in range(domain.d):
            if other != ax:
                prod *= vals[other]
        out[:, :, ax] = prod
    return out


@dataclass
class SpectralFunctionals:
    psi: np.ndarray
    r: float
    gradient_seminorm: float
    inverse_norm: float
    sup_norm: float
    grid: np.ndarray = field(repr=False, default=None)
    rho_grid: np.ndarray = field(repr=False, default=None)
    domain: Domain | None = field(repr=False, default=None)


def functionals_from_psi(domain: Domain, B, psi, r=0.0):
    """Spectral functionals of ``rho_{t,r} = 1 + sum_m psi_m exp(-(lam_m - lam_0) r) phi_m/phi_0``."""
    psi = np.asarray(psi, dtype=float).reshape(-1)
    M = psi.size
    if M > domain.m_trunc:
        raise AnalysisError("psi longer than the domain truncation")
    if r < 0:
        raise AnalysisError("r must be nonnegative")
    gaps = domain.eigenvalues[1 : M + 1] - domain.eigenvalues[0]
    damp = np.exp(-gaps * r) if math.isfinite(r) else np.zeros(M)
    c = psi * damp
    grad = float(np.sum(c**2 / gaps))
    inv = float(np.sum(c**2 / gaps**2))
    grid = _interior_grid(domain)
    rho = 1.0 + (domain.ratio(grid, np.arange(1, M + 1)) @ c if M else 0.0)
    sup = float(np.max(np.abs(rho - 1.0))) if M else 0.0
    return SpectralFunctionals(psi, float(r), grad, inv, sup, grid, rho, domain)


def gradient_quadrature(F: SpectralFunctionals, per_axis=None):
    """``int |grad (-L_0)^{-1}(rho - 1)|^2 dmu_0`` by Gauss quadrature on the box."""
    dom = F.domain
    M = F.psi.size
    if M == 0:
        return 0.0, None
    per_axis = per_axis or {1: 2048, 2: 160, 3: 48, 4: 20}[dom.d]
    pts, w = _gauss_grid(dom, per_axis)
    gaps = dom.eigenvalues[1 : M + 1] - dom.eigenvalues[0]
    coef = F.psi * np.exp(-gaps * F.r) / gaps
    G = np.einsum("nmd,m->nd", ratio_gradient(dom, pts, np.arange(1, M + 1)), coef)
    return float(np.sum(w * np.sum(G**2, axis=1))), (pts, w, G)


def w2_upper_bound(F: SpectralFunctionals, mixture=None):
    """``min(int |grad u|^2 / M(rho, 1) dmu_0, 4 int |grad u|^2 dmu_0)`` with
    ``u = (-L_0)^{-1}(rho - 1)``; ``mixture=s`` uses ``(1 - s) rho + s``."""
    if F.psi.size == 0 or not np.any(F.psi):
        return 0.0
    quad, (pts, w, G) = gradient_quadrature(F)
    gaps = F.domain.eigenvalues[1 : F.psi.size + 1] - F.domain.eigenvalues[0]
    rho = 1.0 + F.domain.ratio(pts, np.arange(1, F.psi.size + 1)) @ (F.psi * np.exp(-gaps * F.r))
    if mixture is not None:
        rho = (1.0 - mixture) * rho + mixture
        G = (1.0 - mixture) * G
        quad = float(np.sum(w * np.sum(G**2, axis=1)))
    if np.any(rho <= 0):
        raise AnalysisError("nonpositive density in the logarithmic-mean weight; use mixture")
    weighted = float(np.sum(w * np.sum(G**2, axis=1) / _log_mean_array(rho, 1.0)))
    return min(weighted, 4.0 * quad)


def w2_lower_functional(F: SpectralFunctionals, c=1.0, reading="inverse"):
    """``main - c S^{7/3} (1 + S^{1/3})`` floored at 0, with ``S = ||rho - 1||_inf``.

    ``reading='inverse'`` uses ``mu_0(|(-L_0)^{-1}(rho-1)|^2)``; ``'gradient'`` the
    Dirichlet-form version."""
    main = {"inverse": F.inverse_norm, "gradient": F.gradient_seminorm}[reading]
    S = F.sup_norm
    return max(main - c * S ** (7.0 / 3.0) * (1.0 + S ** (1.0 / 3.0)), 0.0)


def w2_lower_both(F, c=1.0):
    return {k: w2_lower_functional(F, c, k) for k in ("inverse", "gradient")}


# -- rates ------------------------------------------------------------------------------

@dataclass(frozen=True)
class RateClass:
    exponent: float | str
    constant_available: bool


def rate_class(d, alpha, boundary_convex=True):
    if not 0 < alpha <= 1 or d < 1:
        raise AnalysisError("need alpha in (0, 1] and d >= 1")
    crit = 2.0 * (1.0 + alpha)
    if abs(d - crit) < 1e-12:
        return RateClass(LOG_CASE, False)
    if d < crit:
        avail = bool(boundary_convex and d < 6.0 * alpha - 2.0 and alpha > 0.5)
        return RateClass(-1.0, avail)
    return RateClass(-2.0 / (d - 2.0 * alpha), False)


def fit_eig0ub(domain, m_max=100):
    """Fitted ``alpha_4`` in ``||phi_m / phi_0||_inf <= alpha_4 m^((d+2)/(2d))``, m = 1..m_max."""
    m = np.arange(1, m_max + 1)
    sup = domain.ratio_sup(m)
    return float(np.max(sup / m ** ((domain.d + 2.0) / (2.0 * domain.d))))
