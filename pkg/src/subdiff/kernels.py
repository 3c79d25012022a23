"""Spectral kernels of the killed, Doob-transformed and subordinated semigroups.

All kernels are densities with respect to the uniform probability ``mu``:

    dirichlet     p_t^D(x, y)     = sum_m exp(-lam_m t) phi_m(x) phi_m(y)
    subordinated  p_t^{D,B}(x, y) = sum_m exp(-B(lam_m) t) phi_m(x) phi_m(y)
    doob          p_t^0(x, y)     = exp(E(lam_0) t) p_t(x, y) / (phi_0(x) phi_0(y))

with ``E = B`` when a Bernstein function is attached and ``E = id`` otherwise.

Skeleton-chain samplers: on an interval the one-step laws are inverted from
tabulated spectral CDFs; on boxes the step is realized exactly by subordination
(draw the subordinator increment, then run Brownian motion per axis with an
image-series bridge test for the killing).
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .bernstein import BernsteinFn, UnsupportedSampler, make_bernstein
from .domain import Domain, DomainError, chebyshev_ratio, gauss_legendre, qsd_axis_quantile

FAMILIES = ("dirichlet", "doob", "subordinated")
TAIL_REL = 1e-12
TABLE_CELLS = 4096
DELTA_RULE = 30.0


class TruncationError(ValueError):
    """The retained modes do not control the eigen-sum tail."""


def _axis_mu_phi(ks, L):
    """``mu(phi_k)`` per axis: sqrt(2)(1 - cos((k+1) pi)) / ((k+1) pi)."""
    n = np.asarray(ks) + 1.0
    return math.sqrt(2.0) * (1.0 - np.cos(n * np.pi)) / (n * np.pi)


@dataclass(frozen=True)
class KernelEval:
    domain: Domain
    B: BernsteinFn | None = None
    family: str = "subordinated"
    m_trunc: int | None = None
    clamps: Counter = field(default_factory=Counter, compare=False, hash=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == "subordinated" and self.B is None:
            raise ValueError("the subordinated family needs a Bernstein function")
        m = int(self.m_trunc or self.domain.m_trunc)
        object.__setattr__(self, "m_trunc", m)
        if m != self.domain.m_trunc:
            object.__setattr__(self, "domain", replace(self.domain, m_trunc=m))
        object.__setattr__(self, "_samplers", {})

    # -- spectral data ------------------------------------------------------
    def exponent(self, lam):
        if self.family == "dirichlet" or self.B is None:
            return np.asarray(lam, dtype=float)
        return self.B(lam)

    @property
    def rates(self):
        return self.exponent(self.domain.eigenvalues)

    @property
    def rate0(self):
        return float(self.exponent(self.domain.lambda0))

    def check_truncation(self, t):
        if not t > 0:
            raise ValueError("t must be positive")
        r = self.rates
        if math.exp(-(r[-1] - r[0]) * t) >= TAIL_REL:
            raise TruncationError(
                f"t={t} too small for m_trunc={self.m_trunc}: "
                f"tail/lead = {math.exp(-(r[-1] - r[0]) * t):.2e}"
            )

    def _interior(self, x):
        x = self.domain._as_points(x)
        if not np.all(self.domain.contains(x)):
            raise DomainError("kernel evaluation needs interior points")
        return x

    def _clamp(self, vals, key):
        neg = vals < 0
        if np.any(neg):
            self.clamps[key] += int(neg.sum())
            vals = np.where(neg, 0.0, vals)
        return vals

    # -- evaluation ---------------------------------------------------------
    def value(self, t, x, y):
        """Kernel matrix ``k(t, x_i, y_j)``; a float when both are single points."""
        self.check_truncation(t)
        xs, ys = self._interior(x), self._interior(y)
        r = self.rates
        if self.family == "doob":
            w = np.exp(-(r - r[0]) * t)
            fx, fy = self.domain.ratio(xs), self.domain.ratio(ys)
        else:
            w = np.exp(-r * t)
            fx, fy = self.domain.phi(xs), self.domain.phi(ys)
        out = self._clamp((fx * w) @ fy.T, "value")
        if out.size == 1 and np.ndim(x) <= 1 and np.ndim(y) <= 1:
            return float(out[0, 0])
        return out

    def survival_mass(self, t, x):
        """``s(t, x) = P^x(t < sigma)``, clamped to [0, 1]."""
        self.check_truncation(t)
        xs = self._interior(x)
        coef = np.exp(-self.rates * t) * self.mu_phi()
        s = self.domain.phi(xs) @ coef
        if np.any((s < 0) | (s > 1)):
            self.clamps["survival"] += int(np.sum((s < 0) | (s > 1)))
            s = np.clip(s, 0.0, 1.0)
        return float(s[0]) if np.ndim(x) <= 1 and s.size == 1 else s

    def mu_phi(self):
        """``mu(phi_m)`` for the retained modes."""
        idx = self.domain.mode_indices
        out = np.ones(idx.shape[0])
        for ax, L in enumerate(self.domain.lengths):
            out *= _axis_mu_phi(idx[:, ax], L)
        return out

    def nu_phi(self, nu):
        """``nu(phi_m)`` for the retained modes, by product quadrature."""
        return InitialSpec.coerce(nu).phi_moments(self.domain)

    def survival_prob(self, nu, t):
        self.check_truncation(t)
        return float(np.sum(np.exp(-self.rates * t) * self.mu_phi() * self.nu_phi(nu)))

    def survival_asymptote(self, nu):
        return float(self.mu_phi()[0] * self.nu_phi(nu)[0])

    # -- sampling -----------------------------------------------------------
    def sampler(self, delta):
        key = float(delta)
        if key not in self._samplers:
            if self.family != "subordinated":
                raise ValueError("samplers are defined for the subordinated family")
            if self.domain.d == 1:
                self._samplers[key] = TableSampler(self, key)
            else:
                self._samplers[key] = SubordinationSampler(self, key)
        return self._samplers[key]

    def dump_slice(self, t, x, ys, path):
        """Write ``value(t, x, y)`` for y in ``ys`` as CSV rows (x, y, value)."""
        vals = np.atleast_2d(self.value(t, x, ys))[0]
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        ys = self.domain._as_points(ys)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "value"])
            for yv, v in zip(ys, vals):
                w.writerow([" ".join(map(repr, xs)), " ".join(map(repr, yv)), repr(float(v))])


def kernel(domain, B=None, family="subordinated", m_trunc=None):
    if family == "subordinated" and B is None:
        B = make_bernstein("drift", a=1.0)
    return KernelEval(domain, B, family, m_trunc)


def kernel_value(K, t, x, y):
    return K.value(t, x, y)


def survival_mass(K, t, x):
    return K.survival_mass(t, x)


def survival_prob(K, nu, t):
    return K.survival_prob(nu, t)


def survival_asymptote(K, nu):
    return K.survival_asymptote(nu)


def step_sample(K, x, delta, rng):
    """One killed step from each row of ``x``; returns ``(y, alive)``."""
    return K.sampler(delta).step(x, rng)


def doob_step_sample(K, x, delta, rng):
    return K.sampler(delta).doob_step(x, rng)


def default_delta(K):
    """Smallest step with ``B(lam_M) delta >= 30``."""
    return DELTA_RULE / float(K.rates[-1])


# -- initial laws -------------------------------------------------------------

@dataclass(frozen=True)
class InitialSpec:
    """Initial law: ``point`` (interior x), ``qsd`` (mu_0), ``nu0`` (phi_0 mu / mu(phi_0))
    or ``density`` (callable h, density w.r.t. mu; per-axis list for product laws)."""

    kind: str
    point: tuple | None = None
    density: object = None

    @classmethod
    def coerce(cls, nu):
        if isinstance(nu, cls):
            return nu
        if isinstance(nu, str):
            return cls(nu)
        if isinstance(nu, dict):
            return cls(nu["kind"], tuple(nu["point"]) if "point" in nu else None)
        if callable(nu) or isinstance(nu, (list, tuple)) and nu and callable(nu[0]):
            return cls("density", density=nu)
        return cls("point", point=tuple(np.atleast_1d(np.asarray(nu, dtype=float))))

    def __post_init__(self):
        if self.kind not in ("point", "qsd", "nu0", "density"):
            raise ValueError(f"unknown initial law {self.kind!r}")
        if self.kind == "point" and self.point is None:
            raise ValueError("point law needs a location")

    def to_dict(self):
        out = {"kind": self.kind}
        if self.point is not None:
            out["point"] = list(self.point)
        return out

    def validate(self, domain):
        if self.kind == "point":
            x = domain._as_points(np.asarray(self.point))
            if not domain.contains(x)[0]:
                raise DomainError("initial law concentrated on the boundary (or outside)")
        if self.kind == "density":
            self._density_grid(domain)

    def _axis_densities(self, domain):
        if self.kind == "qsd":
            return [lambda u, L=L: 2.0 * np.sin(np.pi * u / L) ** 2 for L in domain.lengths]
        if self.kind == "nu0":
            # phi_0 / mu(phi_0) per axis: sin / (2/pi).
            return [lambda u, L=L: 0.5 * np.pi * np.sin(np.pi * u / L) for L in domain.lengths]
        if self.kind == "density" and isinstance(self.density, (list, tuple)):
            if len(self.density) != domain.d:
                raise DomainError("one axis density per dimension is required")
            return list(self.density)
        return None

    def _density_grid(self, domain, n=None):
        """Gauss nodes, weights and h-values for a non-product density (d <= 2)."""
        if domain.d > 2:
            raise DomainError("general densities are supported for d <= 2; pass per-axis factors")
        n = n or (4096 if domain.d == 1 else 512)
        g, w = gauss_legendre(n)
        axes = [0.5 * L * (g + 1.0) for L in domain.lengths]
        ws = [0.5 * w for _ in domain.lengths]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.d)
        wt = np.prod(np.stack(np.meshgrid(*ws, indexing="ij"), axis=-1).reshape(-1, domain.d), axis=1)
        h = np.asarray(self.density(grid), dtype=float).reshape(-1)
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise DomainError("density must be finite and nonnegative")
        ratio = h / domain.phi0(grid)
        if ratio.max() > 1e8:
            raise DomainError("density not dominated by phi_0 near the boundary")
        mass = float(np.sum(wt * h))
        if not mass > 0:
            raise DomainError("density has zero mass")
        return grid, wt, h / mass

    def phi_moments(self, domain):
        """``nu(phi_m)`` for all retained modes of ``domain``."""
        idx = domain.mode_indices
        if self.kind == "point":
            self.validate(domain)
            return domain.phi(np.asarray(self.point))[0]
        dens = self._axis_densities(domain)
        if dens is None:
            grid, wt, h = self._density_grid(domain)
            return (wt * h) @ domain.phi(grid)
        g, w = gauss_legendre(4096)
        out = np.ones(idx.shape[0])
        for ax, L in enumerate(domain.lengths):
            u = 0.5 * L * (g + 1.0)
            hw = 0.5 * w * np.asarray(dens[ax](u), dtype=float)
            hw = hw / hw.sum()
            ks = np.unique(idx[:, ax])
            vals = (math.sqrt(2.0) * np.sin(np.outer((ks + 1.0) * np.pi / L, u))) @ hw
            out *= vals[np.searchsorted(ks, idx[:, ax])]
        return out

    def sample(self, domain, n, rng):
        """Draw ``n`` initial states."""
        rng = np.random.default_rng(rng)
        self.validate(domain)
        if self.kind == "point":
            return np.tile(np.asarray(self.point, dtype=float), (n, 1))
        if self.kind == "qsd":
            return np.column_stack(
                [qsd_axis_quantile(rng.random(n), L) for L in domain.lengths]
            )
        if self.kind == "nu0":
            # Per-axis density (pi / 2L) sin(pi x / L): invert the cosine CDF.
            return np.column_stack(
                [L / np.pi * np.arccos(1.0 - 2.0 * rng.random(n)) for L in domain.lengths]
            )
        dens = self._axis_densities(domain)
        if dens is None:
            grid, wt, h = self._density_grid(domain)
            p = wt * h
            pick = rng.choice(p.size, size=n, p=p / p.sum())
            return grid[pick]
        cols = []
        for ax, L in enumerate(domain.lengths):
            u = np.linspace(0.0, L, TABLE_CELLS + 1)
            f = np.maximum(np.asarray(dens[ax](0.5 * (u[1:] + u[:-1])), dtype=float), 0.0)
            cdf = np.concatenate([[0.0], np.cumsum(f)])
            cols.append(np.interp(rng.random(n) * cdf[-1], cdf, u))
        return np.column_stack(cols)


# -- interval: tabulated spectral inverse CDFs ---------------------------------

class TableSampler:
    """Skeleton-chain step on ``[0, L]`` from tabulated row CDFs.

    Rows sit on ``TABLE_CELLS + 1`` equispaced x-nodes; a state between nodes
    uses the row of a neighbouring node chosen with linear mixture weights.
    Within a row the CDF is linear per cell.
    """

    def __init__(self, K: KernelEval, delta: float):
        if not delta > 0:
            raise ValueError("delta must be positive")
        # no back-reference to K: K caches its samplers, and a cycle would pin the tables
        self.delta = delta
        self.L = K.domain.lengths[0]
        rates = K.rates
        ok = np.nonzero(rates * delta >= DELTA_RULE)[0]
        if ok.size == 0:
            raise TruncationError(
                f"B(lam_M) delta = {rates[-1] * delta:.3g} < {DELTA_RULE}; "
                f"increase m_trunc or delta (>= {default_delta(K):.3g})"
            )
        self.n_modes = int(ok[0]) + 1
        if self.n_modes > TABLE_CELLS // 4:
            raise TruncationError("step too small for the tabulation resolution")
        self.rates = rates[: self.n_modes]
        self.nodes = np.linspace(0.0, self.L, TABLE_CELLS + 1)
        self._doob = None
        self._killed = None
        self.clamped = Counter()

    def _finish(self, cdf, key, normalize):
        inc = np.diff(cdf, axis=1)
        neg = inc < 0
        self.clamped[key] = int(neg.sum())
        inc[neg] = 0.0
        rows = np.concatenate([np.zeros((cdf.shape[0], 1)), np.cumsum(inc, axis=1)], axis=1)
        total = rows[:, -1].copy()
        if normalize:
            rows /= total[:, None]
        n = rows.shape[1]
        flat = (rows + 2.0 * np.arange(rows.shape[0])[:, None]).ravel()
        return flat, total, n

    def _build_doob(self):
        L, y = self.L, self.nodes
        m = np.arange(self.n_modes)
        c = np.exp(-(self.rates - self.rates[0]) * self.delta)
        theta = np.pi * self.nodes / L
        rx = chebyshev_ratio(theta, self.n_modes - 1) * c
        iy = np.empty((self.n_modes, y.size))
        iy[0] = y / L - np.sin(2 * np.pi * y / L) / (2 * np.pi)
        mm = m[1:, None]
        iy[1:] = (np.sin(mm * np.pi * y / L) / mm - np.sin((mm + 2) * np.pi * y / L) / (mm + 2)) / np.pi
        self._doob = self._finish(rx @ iy, "doob", normalize=True)

    def _build_killed(self):
        L, y = self.L, self.nodes
        n = np.arange(1, self.n_modes + 1)[:, None]
        c = np.exp(-self.rates * self.delta)
        px = math.sqrt(2.0) * np.sin(np.outer(self.nodes, n[:, 0]) * np.pi / L) * c
        jy = math.sqrt(2.0) * (1.0 - np.cos(n * np.pi * y / L)) / (n * np.pi)
        self._killed = self._finish(px @ jy, "killed", normalize=False)

    def _invert(self, table, x, rng, killed):
        flat, total, n = table
        x = np.asarray(x, dtype=float).reshape(-1)
        pos = np.clip(x / self.L * TABLE_CELLS, 0.0, TABLE_CELLS)
        i = np.minimum(np.floor(pos).astype(np.int64), TABLE_CELLS - 1)
        u = rng.random((x.size, 2))
        row = i + (u[:, 0] < pos - i)
        v = u[:, 1]
        alive = v < total[row] if killed else np.ones(x.size, dtype=bool)
        y = np.full(x.size, np.nan)
        r = row[alive]
        target = v[alive] + 2.0 * r
        g = np.searchsorted(flat, target, side="right") - 1
        g = np.minimum(g, (r + 1) * n - 2)
        lo, hi = flat[g], flat[g + 1]
        frac = np.where(hi > lo, (target - lo) / np.where(hi > lo, hi - lo, 1.0), 0.5)
        j = g - r * n
        y[alive] = (j + np.clip(frac, 0.0, 1.0)) * (self.L / TABLE_CELLS)
        # Keep draws strictly interior.
        eps = self.L * 1e-12
        y[alive] = np.clip(y[alive], eps, self.L - eps)
        return y, alive

    def step(self, x, rng):
        if self._killed is None:
            self._build_killed()
        y, alive = self._invert(self._killed, x, rng, killed=True)
        return y[:, None], alive

    def doob_step(self, x, rng):
        if self._doob is None:
            self._build_doob()
        y, _ = self._invert(self._doob, x, rng, killed=False)
        return y[:, None]


# -- boxes: exact subordination -------------------------------------------------

def _bridge_survival(x, y, s, L):
    """P(Brownian bridge x -> y over time s stays in (0, L)), generator Laplacian."""
    z = y - x
    if z.size == 0:
        return z
    K = 1 + int(math.ceil(math.sqrt(160.0 * float(np.max(s))) / (2.0 * L)))
    r = np.ones_like(z)
    four_s = 4.0 * s
    for k in range(-K, K + 1):
        shift = 2.0 * k * L
        if k:
            r += np.exp(-((z + shift) ** 2 - z**2) / four_s)
        r -= np.exp(-((y + x + shift) ** 2 - z**2) / four_s)
    return r


def killed_bm_axis(x, s, L, rng):
    """Killed Brownian motion on ``(0, L)`` run for times ``s`` (per entry).

    Returns ``(y, alive)``; killing is exact via the bridge crossing probability.
    """
    x = np.array(x, dtype=float)
    s = np.broadcast_to(np.asarray(s, dtype=float), x.shape).copy()
    alive = (x > 0) & (x < L)
    lam0 = (np.pi / L) ** 2
    alive &= lam0 * s <= 40.0
    chunk = L**2 / 4.0
    n_chunks = np.where(alive, np.ceil(s / chunk), 0).astype(np.int64)
    n_chunks = np.maximum(n_chunks, np.where(alive & (s > 0), 1, 0))
    sc = np.where(n_chunks > 0, s / np.maximum(n_chunks, 1), 0.0)
    for c in range(int(n_chunks.max(initial=0))):
        act = np.nonzero(alive & (n_chunks > c))[0]
        if act.size == 0:
            break
        xa, sa = x[act], sc[act]
        ya = xa + np.sqrt(2.0 * sa) * rng.standard_normal(act.size)
        inside = (ya > 0) & (ya < L)
        surv = np.zeros(act.size)
        surv[inside] = _bridge_survival(xa[inside], ya[inside], sa[inside], L)
        ok = inside & (rng.random(act.size) < surv)
        alive[act[~ok]] = False
        x[act[ok]] = ya[ok]
    x[~alive] = np.nan
    return x, alive


def doob_diffusion_axis(x, s, L, rng, max_batch=4096):
    """Ground-state transformed diffusion on ``(0, L)`` run for times ``s``.

    Each chunk proposes a killed-BM move and accepts it with probability
    ``sin(pi Y / L)``; the accepted law is proportional to p^D_s(x, y) phi_0(y).
    """
    x = np.array(x, dtype=float)
    s = np.broadcast_to(np.asarray(s, dtype=float), x.shape)
    lam0 = (np.pi / L) ** 2
    gap = 3.0 * lam0
    mixed = gap * s >= 28.0
    if np.any(mixed):
        x[mixed] = qsd_axis_quantile(rng.random(int(mixed.sum())), L)
    chunk = 0.5 * L**2 / np.pi**2
    todo = ~mixed & (s > 0)
    n_chunks = np.where(todo, np.ceil(s / chunk), 0).astype(np.int64)
    sc = np.where(todo, s / np.maximum(n_chunks, 1), 0.0)
    for c in range(int(n_chunks.max(initial=0))):
        pend = np.nonzero(n_chunks > c)[0]
        while pend.size:
            acc = np.exp(-lam0 * sc[pend]) * np.sin(np.pi * x[pend] / L)
            reps = np.clip(np.ceil(1.5 / np.maximum(acc, 1e-12)), 1, max_batch).astype(np.int64)
            src = np.repeat(pend, reps)
            y, alive = killed_bm_axis(x[src], sc[src], L, rng)
            ok = alive & (rng.random(src.size) < np.sin(np.pi * np.nan_to_num(y) / L))
            # First accepted proposal per pending entry.
            hit = np.zeros(pend.size, dtype=bool)
            first = np.full(pend.size, -1)
            starts = np.concatenate([[0], np.cumsum(reps)[:-1]])
            okpos = np.nonzero(ok)[0]
            owner = np.searchsorted(starts, okpos, side="right") - 1
            uniq, where = np.unique(owner, return_index=True)
            hit[uniq] = True
            first[uniq] = okpos[where]
            x[pend[hit]] = y[first[hit]]
            pend = pend[~hit]
    return x


class SubordinationSampler:
    """Exact skeleton steps on a box via the subordinator and product structure."""

    def __init__(self, K: KernelEval, delta: float):
        if not delta > 0:
            raise ValueError("delta must be positive")
        if K.B.sampler_kind != "exact":
            raise UnsupportedSampler(f"{K.B.kind} has no subordinator sampler on boxes")
        self.domain, self.B, self.delta = K.domain, K.B, delta
        self.lengths = K.domain.lengths
        self.lam0 = K.domain.lambda0

    def step(self, x, rng):
        x = np.array(self.domain._as_points(x), dtype=float)
        n = x.shape[0]
        s = np.asarray(self.B.sample(self.delta, rng, n), dtype=float)
        alive = self.lam0 * s <= 40.0
        y = x.copy()
        for ax, L in enumerate(self.lengths):
            idx = np.nonzero(alive)[0]
            ya, ok = killed_bm_axis(x[idx, ax], s[idx], L, rng)
            y[idx, ax] = ya
            alive[idx[~ok]] = False
        y[~alive] = np.nan
        return y, alive

    def doob_step(self, x, rng):
        x = np.array(self.domain._as_points(x), dtype=float)
        s = self.B.sample_tilted(self.delta, self.lam0, rng, x.shape[0])
        for ax, L in enumerate(self.lengths):
            x[:, ax] = doob_diffusion_axis(x[:, ax], s, L, rng)
        return x

