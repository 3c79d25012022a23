"""Model domains with closed-form Dirichlet spectra.

An interval ``[0, L]`` or a product box ``[0, L_1] x ... x [0, L_d]`` carries the
uniform probability measure ``mu`` and the operator ``-Laplacian`` with Dirichlet
boundary conditions.  Per axis the eigenpairs are

    lambda_k = ((k + 1) pi / L)^2,    phi_k(x) = sqrt(2) sin((k + 1) pi x / L),

normalized in ``L^2(mu)``.  Box eigenpairs are tensor products, ordered by
eigenvalue with ties broken lexicographically on the per-axis indices.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import special

MAX_DIMENSION = 4

# Default number of retained nonzero modes.
DEFAULT_M_TRUNC = {1: 256}
DEFAULT_M_TRUNC_BOX = 1024


class DomainError(ValueError):
    pass


@functools.lru_cache(maxsize=16)
def gauss_legendre(n):
    """Gauss-Legendre nodes and weights on [-1, 1], cached (large n is costly)."""
    g, w = special.roots_legendre(n)
    g.flags.writeable = False
    w.flags.writeable = False
    return g, w


def axis_eigenvalue(length, k):
    return ((np.asarray(k) + 1.0) * np.pi / length) ** 2


def _lattice(lengths, lam_cut):
    """All per-axis index tuples with eigenvalue <= lam_cut (unsorted)."""
    lengths = np.asarray(lengths, dtype=float)
    base = (np.pi / lengths) ** 2
    idx = np.zeros((1, 0), dtype=np.int64)
    partial = np.zeros(1)
    rest_min = np.concatenate([np.cumsum(base[::-1])[::-1][1:], [0.0]])
    for ax in range(len(lengths)):
        kmax = int(math.floor(math.sqrt(max(lam_cut - rest_min[ax], 0.0) / base[ax]))) - 1
        if kmax < 0:
            return np.zeros((0, len(lengths)), dtype=np.int64), np.zeros(0)
        ks = np.arange(kmax + 1)
        lam_k = base[ax] * (ks + 1.0) ** 2
        tot = partial[:, None] + lam_k[None, :]
        keep = tot + rest_min[ax] <= lam_cut * (1 + 1e-12)
        rows, cols = np.nonzero(keep)
        idx = np.concatenate([idx[rows], ks[cols][:, None]], axis=1)
        partial = tot[rows, cols]
    return idx, partial


def _sort_modes(idx, lam):
    # Rounded key so exact ties (equal side lengths) are not split by round-off.
    key = np.round(lam / lam.min(), 9) if lam.size else lam
    order = np.lexsort(tuple(idx[:, j] for j in range(idx.shape[1] - 1, -1, -1)) + (key,))
    idx, lam, key = idx[order], lam[order], key[order]
    if lam.size:
        # Tied modes share one value (their sums differ only in summation order).
        first = np.r_[True, key[1:] != key[:-1]]
        lam = lam[np.flatnonzero(first)[np.cumsum(first) - 1]]
    return idx, lam


def enumerate_modes(lengths, n_modes):
    """The ``n_modes`` smallest Dirichlet modes of the box, sorted.

    Returns ``(indices, eigenvalues)`` with ``indices`` of shape ``(n_modes, d)``.
    """
    lengths = np.asarray(lengths, dtype=float)
    d = len(lengths)
    lam0 = np.sum((np.pi / lengths) ** 2)
    if d == 1:
        ks = np.arange(n_modes)[:, None]
        return ks, axis_eigenvalue(lengths[0], ks[:, 0])
    # Grow the eigenvalue cut until it contains enough modes.
    cut = lam0 * 4.0
    while True:
        idx, lam = _lattice(lengths, cut)
        if lam.size >= n_modes:
            idx, lam = _sort_modes(idx, lam)
            # Every mode not enumerated has eigenvalue > cut >= lam[n_modes - 1].
            return idx[:n_modes], lam[:n_modes]
        cut *= 2.0


def eigenvalues_upto(lengths, lam_cut):
    """Sorted eigenvalues (with multiplicity) not exceeding ``lam_cut``."""
    _, lam = _lattice(lengths, lam_cut)
    return np.sort(lam)


def chebyshev_ratio(theta, kmax):
    """``sin((k+1) theta) / sin(theta)`` for k = 0..kmax, shape ``theta.shape + (kmax+1,)``.

    Second-kind Chebyshev recurrence in ``cos(theta)``; finite at theta = 0, pi.
    """
    c = np.cos(theta)
    out = np.empty(np.shape(theta) + (kmax + 1,))
    out[..., 0] = 1.0
    if kmax >= 1:
        out[..., 1] = 2.0 * c
    for k in range(2, kmax + 1):
        out[..., k] = 2.0 * c * out[..., k - 1] - out[..., k - 2]
    return out


@dataclass(frozen=True)
class EigenPair:
    """One Dirichlet eigenpair of the domain, evaluable at points of shape ``(n, d)``."""

    index: int
    lam: float
    multi_index: tuple
    lengths: tuple

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.ones(x.shape[0])
        for ax, (k, L) in enumerate(zip(self.multi_index, self.lengths)):
            out = out * math.sqrt(2.0) * np.sin((k + 1) * np.pi * x[:, ax] / L)
        return out

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = len(self.lengths)
        s = np.empty((x.shape[0], d))
        c = np.empty((x.shape[0], d))
        for ax, (k, L) in enumerate(zip(self.multi_index, self.lengths)):
            w = (k + 1) * np.pi / L
            s[:, ax] = math.sqrt(2.0) * np.sin(w * x[:, ax])
            c[:, ax] = math.sqrt(2.0) * w * np.cos(w * x[:, ax])
        g = np.empty_like(s)
        for ax in range(d):
            others = np.prod(np.delete(s, ax, axis=1), axis=1) if d > 1 else 1.0
            g[:, ax] = c[:, ax] * others
        return g

    @property
    def sup_norm(self):
        return 2.0 ** (len(self.lengths) / 2.0)


@dataclass(frozen=True)
class Domain:
    kind: str
    lengths: tuple
    m_trunc: int = field(default=0)

    def __post_init__(self):
        if self.kind not in ("interval", "box"):
            raise DomainError(f"unknown domain kind {self.kind!r}")
        lengths = tuple(float(v) for v in self.lengths)
        object.__setattr__(self, "lengths", lengths)
        if not lengths:
            raise DomainError("at least one side length is required")
        if any(not (v > 0) or not math.isfinite(v) for v in lengths):
            raise DomainError(f"nonpositive length in {lengths}")
        if self.kind == "interval" and len(lengths) != 1:
            raise DomainError("an interval has exactly one length")
        if len(lengths) > MAX_DIMENSION:
            raise DomainError(f"dimension {len(lengths)} > {MAX_DIMENSION} is not supported")
        m = int(self.m_trunc) if self.m_trunc else (
            DEFAULT_M_TRUNC.get(len(lengths), DEFAULT_M_TRUNC_BOX)
        )
        if m < 1:
            raise DomainError("m_trunc must be >= 1")
        object.__setattr__(self, "m_trunc", m)

    @property
    def d(self):
        return len(self.lengths)

    @property
    def volume(self):
        return float(np.prod(self.lengths))

    @property
    def diam(self):
        return float(np.sqrt(np.sum(np.square(self.lengths))))

    @cached_property
    def _modes(self):
        return enumerate_modes(self.lengths, self.m_trunc + 1)

    @property
    def mode_indices(self):
        """Per-axis indices of modes 0..m_trunc, shape ``(m_trunc + 1, d)``."""
        return self._modes[0]

    @property
    def eigenvalues(self):
        return self._modes[1]

    @property
    def lambda0(self):
        return float(np.sum((np.pi / np.asarray(self.lengths)) ** 2))

    @property
    def axis_lambda0(self):
        return (np.pi / np.asarray(self.lengths)) ** 2

    @property
    def gap(self):
        return float(self.eigenvalues[1] - self.eigenvalues[0]) if self.m_trunc >= 1 else np.inf

    # -- evaluation ---------------------------------------------------------
    def _as_points(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1, 1)
        elif x.ndim == 1:
            x = x.reshape(-1, 1) if self.d == 1 else x.reshape(1, -1)
        if x.shape[-1] != self.d:
            raise DomainError(f"points have dimension {x.shape[-1]}, domain has {self.d}")
        return x

    def _axis_table(self, x, fn, kmax):
        return [fn(x[:, ax], L, kmax[ax]) for ax, L in enumerate(self.lengths)]

    def phi(self, x, modes=None):
        """Eigenfunctions at points ``x``; returns ``(n, n_modes)``."""
        x = self._as_points(x)
        idx = self.mode_indices if modes is None else self.mode_indices[np.asarray(modes)]
        out = np.ones((x.shape[0], idx.shape[0]))
        for ax, L in enumerate(self.lengths):
            ks = idx[:, ax]
            out *= math.sqrt(2.0) * np.sin(np.outer(x[:, ax], (ks + 1.0) * np.pi / L))
        return out

    def phi0(self, x):
        x = self._as_points(x)
        out = np.ones(x.shape[0])
        for ax, L in enumerate(self.lengths):
            out *= math.sqrt(2.0) * np.sin(np.pi * x[:, ax] / L)
        return out

    def ratio(self, x, modes=None):
        """``phi_m / phi_0`` at points ``x``, finite up to the boundary; ``(n, n_modes)``."""
        x = self._as_points(x)
        idx = self.mode_indices if modes is None else self.mode_indices[np.asarray(modes)]
        out = np.ones((x.shape[0], idx.shape[0]))
        for ax, L in enumerate(self.lengths):
            ks = idx[:, ax]
            table = chebyshev_ratio(np.pi * x[:, ax] / L, int(ks.max()))
            out *= table[:, ks]
        return out

    def ratio_sup(self, modes=None):
        """``||phi_m / phi_0||_inf``; per axis the sup of ``U_k`` on [-1, 1] is k + 1."""
        idx = self.mode_indices if modes is None else self.mode_indices[np.asarray(modes)]
        return np.prod(idx + 1.0, axis=1)

    def contains(self, x, closed=False):
        x = self._as_points(x)
        L = np.asarray(self.lengths)
        if closed:
            return np.all((x >= 0) & (x <= L), axis=1)
        return np.all((x > 0) & (x < L), axis=1)

    # -- serialization ------------------------------------------------------
    def to_dict(self):
        return {"kind": self.kind, "lengths": list(self.lengths), "m_trunc": self.m_trunc}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, spec):
        return make_domain(spec["kind"], spec["lengths"], spec.get("m_trunc"))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def make_domain(kind, lengths, m_trunc=None):
    if np.isscalar(lengths):
        lengths = [lengths]
    return Domain(kind, tuple(lengths), int(m_trunc) if m_trunc else 0)


def eigenpair(domain, m):
    if not 0 <= m <= domain.m_trunc:
        raise DomainError(f"mode {m} outside 0..{domain.m_trunc}")
    return EigenPair(
        index=int(m),
        lam=float(domain.eigenvalues[m]),
        multi_index=tuple(int(k) for k in domain.mode_indices[m]),
        lengths=domain.lengths,
    )


def weyl_check(domain, m_max):
    """Smallest ``alpha0 >= 1`` with ``||phi_m||_inf <= alpha0 sqrt(m)`` and
    ``m^(2/d) / alpha0 <= lambda_m - lambda_0 <= alpha0 m^(2/d)`` for 1 <= m <= m_max.
    """
    if not 1 <= m_max <= domain.m_trunc:
        raise DomainError(f"m_max must lie in 1..{domain.m_trunc}")
    m = np.arange(1, m_max + 1, dtype=float)
    gaps = domain.eigenvalues[1 : m_max + 1] - domain.eigenvalues[0]
    scale = m ** (2.0 / domain.d)
    sup = 2.0 ** (domain.d / 2.0)
    ratios = np.maximum.reduce([gaps / scale, scale / gaps, sup / np.sqrt(m)])
    return float(max(1.0, ratios.max()))


# -- quasi-stationary distribution --------------------------------------------

def qsd_axis_pdf(x, L):
    """Per-axis density of mu_0 w.r.t. Lebesgue: (2/L) sin^2(pi x / L)."""
    return (2.0 / L) * np.sin(np.pi * np.asarray(x) / L) ** 2


def qsd_axis_cdf(x, L):
    x = np.asarray(x, dtype=float)
    return x / L - np.sin(2.0 * np.pi * x / L) / (2.0 * np.pi)


def qsd_axis_first_moment(y, L):
    """``int_0^y u pdf(u) du`` in closed form."""
    y = np.asarray(y, dtype=float)
    k = 2.0 * np.pi / L
    return (y**2 / 2.0 - (y * np.sin(k * y) / k + (np.cos(k * y) - 1.0) / k**2)) / L


def qsd_axis_second_moment(L):
    return L**2 / 3.0 - L**2 / (2.0 * np.pi**2)


def qsd_axis_quantile(u, L, tol=1e-14):
    """Inverse of :func:`qsd_axis_cdf` by safeguarded Newton iteration."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    lo = np.zeros_like(u)
    hi = np.full_like(u, L)
    # The cdf is close to the identity away from the ends; start there.
    x = u * L
    for _ in range(100):
        f = qsd_axis_cdf(x, L) - u
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        fp = qsd_axis_pdf(x, L)
        step = np.where(fp > 0, f / np.where(fp > 0, fp, 1.0), np.inf)
        x_new = x - step
        bad = ~((x_new > lo) & (x_new < hi))
        x_new = np.where(bad, 0.5 * (lo + hi), x_new)
        done = np.abs(x_new - x) <= tol * L
        x = x_new
        if np.all(done):
            break
    return x


@dataclass(frozen=True)
class QsdMeasure:
    domain: Domain

    def density(self, x):
        """Density of mu_0 = phi_0^2 mu with respect to Lebesgue measure."""
        x = self.domain._as_points(x)
        return self.domain.phi0(x) ** 2 / self.domain.volume

    def cdf(self, x, axis=0):
        return qsd_axis_cdf(x, self.domain.lengths[axis])

    def quantile(self, u, axis=0):
        return qsd_axis_quantile(u, self.domain.lengths[axis])

    def sample(self, n, rng):
        rng = np.random.default_rng(rng)
        u = rng.random((n, self.domain.d))
        return np.column_stack(
            [qsd_axis_quantile(u[:, ax], L) for ax, L in enumerate(self.domain.lengths)]
        )


def qsd(domain):
    return QsdMeasure(domain)


def qsd_sample(domain, n, rng_seed):
    if n < 1:
        raise DomainError("n must be >= 1")
    return qsd(domain).sample(n, rng_seed)
