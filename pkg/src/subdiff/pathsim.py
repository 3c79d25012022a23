"""Skeleton trajectories of the subordinated killed process and conditional estimates.

Two conditioning strategies for ``E^nu[F | T < sigma]``:

* ``rejection``: run the killed chain and keep survivors (unbiased, but the
  acceptance decays like ``exp(-B(lam_0) T)``);
* ``doob_is``: run the never-killed Doob chain ``q_delta`` and reweight with
  ``w = phi_0(X_0) / phi_0(X_T)``; then ``P^nu(T < sigma) = exp(-B(lam_0) T) E_Q[w]``
  and conditional expectations are self-normalized ratios.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .bernstein import BernsteinFn, UnsupportedSampler
from .domain import Domain, DomainError
from .kernels import InitialSpec, KernelEval, TruncationError, killed_bm_axis, kernel

MODES = ("rejection", "doob_is")
MIN_ACCEPTANCE = 1e-4
MIN_NEFF = 30
CACHE_VERSION = 1


class InfeasibleError(RuntimeError):
    pass


def n_steps(T, delta):
    k = T / delta
    n = int(round(k))
    if n < 1 or abs(k - n) > 1e-9 * max(1.0, k):
        raise ValueError(f"T={T} is not a positive multiple of delta={delta}")
    return n


@dataclass
class PathSkeleton:
    delta: float
    positions: np.ndarray  # (n_steps + 1, d); truncated at the kill step
    survived: bool
    is_weight: float | None = None
    law: str = "qsd"

    @property
    def horizon(self):
        return (self.positions.shape[0] - 1) * self.delta


@dataclass
class PathBatch:
    """A block of paths on a common grid; killed paths hold NaN after the kill."""

    delta: float
    positions: np.ndarray  # (n_paths, n_steps + 1, d)
    alive: np.ndarray  # (n_paths, n_steps + 1) bool
    weights: np.ndarray | None
    mode: str
    law: str = "qsd"
    seed: tuple = ()

    @property
    def n_paths(self):
        return self.positions.shape[0]

    @property
    def n_steps(self):
        return self.positions.shape[1] - 1

    @property
    def survived(self):
        return self.alive[:, -1]

    def survived_until(self, T):
        return self.alive[:, n_steps(T, self.delta)]

    def weight_at(self, T, domain):
        """``phi_0(X_0) / phi_0(X_T)`` (Doob mode)."""
        k = n_steps(T, self.delta)
        return domain.phi0(self.positions[:, 0]) / domain.phi0(self.positions[:, k])

    def __iter__(self) -> Iterator[PathSkeleton]:
        for i in range(self.n_paths):
            k = int(np.sum(self.alive[i]))
            yield PathSkeleton(
                self.delta,
                self.positions[i, :k],
                bool(self.alive[i, -1]),
                None if self.weights is None else float(self.weights[i]),
                self.law,
            )


def _batch_sizes(n_paths, batch_size):
    full, rest = divmod(n_paths, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


def simulate_paths(
    domain: Domain,
    B: BernsteinFn,
    nu,
    T: float,
    delta: float,
    n_paths: int,
    mode: str = "doob_is",
    seed: int = 0,
    batch_size: int = 2000,
    K: KernelEval | None = None,
    skip: int = 0,
    limit: int | None = None,
) -> Iterator[PathBatch]:
    """Stream of path batches; batch ``i`` draws from ``SeedSequence([seed, i])``.

    ``skip``/``limit`` select a slice of the batch sequence without simulating the rest,
    so separate workers can regenerate individual batches."""
    if mode not in MODES:
        raise ValueError(f"unknown conditioning mode {mode!r}")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    nu = InitialSpec.coerce(nu)
    nu.validate(domain)
    n = n_steps(T, delta)
    K = K or kernel(domain, B)
    sampler = K.sampler(delta)
    if mode == "rejection":
        acc = _prior_acceptance(K, nu, T)
        if acc is not None and acc < MIN_ACCEPTANCE:
            raise InfeasibleError(
                f"rejection acceptance ~{acc:.1e} < {MIN_ACCEPTANCE}: use doob_is or rescale "
                f"the domain (interval [0, L pi] has lambda_0 = 1/L^2)"
            )
    sizes = list(enumerate(_batch_sizes(n_paths, batch_size)))
    stop = None if limit is None else skip + limit
    for i, size in sizes[skip:stop]:
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        pos = np.empty((size, n + 1, domain.d))
        alive = np.ones((size, n + 1), dtype=bool)
        pos[:, 0] = nu.sample(domain, size, rng)
        if mode == "doob_is":
            for k in range(n):
                pos[:, k + 1] = sampler.doob_step(pos[:, k], rng)
            w = domain.phi0(pos[:, 0]) / domain.phi0(pos[:, n])
        else:
            live = np.arange(size)
            pos[:, 1:] = np.nan
            for k in range(n):
                y, ok = sampler.step(pos[live, k], rng)
                live = live[ok]
                pos[live, k + 1] = y[ok]
                alive[:, k + 1] = False
                alive[live, k + 1] = True
                if live.size == 0:
                    alive[:, k + 1 :] = False
                    break
            w = None
        yield PathBatch(delta, pos, alive, w, mode, nu.kind, (seed, i))


def _prior_acceptance(K, nu, T):
    try:
        return K.survival_prob(nu, T)
    except (TruncationError, DomainError):
        return None


# -- empirical summaries ---------------------------------------------------------

@dataclass
class EmpiricalSummary:
    t: float
    atoms: np.ndarray  # (n_t, d)
    psi: np.ndarray  # (M_psi,)

    @property
    def weights(self):
        return np.full(self.atoms.shape[0], 1.0 / self.atoms.shape[0])


def n_atoms(t, delta):
    return int(math.ceil(t / delta - 1e-9))


def accumulate(path: PathSkeleton, t: float, m_psi: int, domain: Domain) -> EmpiricalSummary:
    """Left-endpoint time averages over ``[0, t)``."""
    k = n_atoms(t, path.delta)
    if k < 1 or k > path.positions.shape[0]:
        raise ValueError(f"t={t} exceeds the path length")
    atoms = path.positions[:k]
    return EmpiricalSummary(t, atoms, psi_average(domain, atoms, m_psi))


def psi_average(domain, atoms, m_psi):
    """``psi_m = mean over atoms of (phi_m / phi_0)``, m = 1..m_psi."""
    if m_psi > domain.m_trunc:
        raise ValueError("m_psi exceeds the domain truncation")
    if m_psi == 0:
        return np.zeros(0)
    return domain.ratio(atoms, np.arange(1, m_psi + 1)).mean(axis=0)


def accumulate_batch(batch: PathBatch, t: float, m_psi: int, domain: Domain):
    """``psi`` for every path of a batch, shape ``(n_paths, m_psi)``; NaN if killed before t."""
    k = n_atoms(t, batch.delta)
    if k > batch.n_steps + 1:
        raise ValueError(f"t={t} exceeds the simulated horizon")
    atoms = batch.positions[:, :k]
    ok = batch.alive[:, k - 1]
    out = np.full((batch.n_paths, m_psi), np.nan)
    if m_psi and ok.any():
        flat = atoms[ok].reshape(-1, domain.d)
        vals = domain.ratio(flat, np.arange(1, m_psi + 1))
        out[ok] = vals.reshape(int(ok.sum()), k, m_psi).mean(axis=1)
    return out


# -- estimators ------------------------------------------------------------------

@dataclass
class Estimate:
    value: float
    stderr: float
    n_effective: float
    mode: str
    acceptance_rate: float | None = None
    n_paths: int = 0
    low_confidence: bool = False


def rejection_estimate(values, accepted, n_total=None):
    values = np.asarray(values, dtype=float)[np.asarray(accepted, dtype=bool)]
    n_total = n_total or np.size(accepted)
    if values.size == 0:
        raise InfeasibleError("no accepted paths")
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else math.inf
    return Estimate(
        float(values.mean()), se, float(values.size), "rejection",
        acceptance_rate=values.size / n_total, n_paths=int(n_total),
        low_confidence=values.size < MIN_NEFF,
    )


def ratio_estimate(values, weights):
    """Self-normalized importance estimate with delta-method standard error."""
    f = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    sw = w.sum()
    if not sw > 0:
        raise InfeasibleError("all importance weights vanish")
    r = float(np.sum(w * f) / sw)
    var = float(np.sum((w * (f - r)) ** 2)) / sw**2
    neff = float(sw**2 / np.sum(w**2))
    return Estimate(r, math.sqrt(var), neff, "doob_is", n_paths=int(f.size), low_confidence=neff < MIN_NEFF)


def conditional_estimate(
    summaries_fn: Callable[[EmpiricalSummary], float],
    domain: Domain,
    B: BernsteinFn,
    nu,
    t: float,
    T: float,
    delta: float,
    n_paths: int,
    mode: str = "doob_is",
    seed: int = 0,
    m_psi: int = 8,
    batch_size: int = 2000,
) -> Estimate:
    """``E^nu[F(mu_t) | T < sigma]`` with ``F = summaries_fn``."""
    if T < t:
        raise ValueError("T must be >= t")
    values, flags = [], []
    for batch in simulate_paths(domain, B, nu, T, delta, n_paths, mode, seed, batch_size):
        k = n_atoms(t, delta)
        ok = batch.survived_until(T)
        w = batch.weight_at(T, domain) if mode == "doob_is" else None
        psi = accumulate_batch(batch, t, m_psi, domain)
        for i in range(batch.n_paths):
            if mode == "rejection" and not ok[i]:
                values.append(np.nan)
                flags.append(False)
                continue
            s = EmpiricalSummary(t, batch.positions[i, :k], psi[i])
            values.append(float(summaries_fn(s)))
            flags.append(True if w is None else float(w[i]))
    if mode == "rejection":
        return rejection_estimate(np.nan_to_num(values), flags)
    return ratio_estimate(values, flags)


def survival_estimate(domain, B, nu, T, delta, n_paths, mode="doob_is", seed=0, batch_size=2000):
    """Monte-Carlo ``exp(B(lam_0) T) P^nu(T < sigma)`` as an :class:`Estimate`."""
    K = kernel(domain, B)
    growth = math.exp(K.rate0 * T)
    vals = []
    for batch in simulate_paths(domain, B, nu, T, delta, n_paths, mode, seed, batch_size, K=K):
        if mode == "doob_is":
            vals.append(batch.weights)
        else:
            vals.append(batch.survived.astype(float) * growth)
    v = np.concatenate(vals)
    return Estimate(
        float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)), float(v.size), mode,
        acceptance_rate=float(np.mean(v > 0)) if mode == "rejection" else None, n_paths=v.size,
    )


# -- independent composition sampler ----------------------------------------------

def composition_simulate(domain, B, x0, T, delta, seed, n_paths=1):
    """Killed paths on an interval from subordinator draws and exact killed-BM moves.

    Shares no code path with the tabulated spectral sampler; used to cross-check it.
    """
    if domain.d != 1:
        raise DomainError("composition_simulate supports intervals only")
    if B.kind not in ("drift", "stable", "drift_stable", "gamma"):
        raise UnsupportedSampler(f"unsupported subordinator {B.kind!r}")
    n = n_steps(T, delta)
    L = domain.lengths[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1 << 20]))
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not (0 < x0[0] < L):
        raise DomainError("x0 must be interior")
    pos = np.full((n_paths, n + 1, 1), np.nan)
    alive = np.zeros((n_paths, n + 1), dtype=bool)
    pos[:, 0, 0] = x0[0]
    alive[:, 0] = True
    live = np.arange(n_paths)
    for k in range(n):
        s = B.sample(delta, rng, live.size)
        y, ok = killed_bm_axis(pos[live, k, 0], s, L, rng)
        live = live[ok]
        pos[live, k + 1, 0] = y[ok]
        alive[live, k + 1] = True
    batch = PathBatch(delta, pos, alive, None, "rejection", "point", (seed,))
    return next(iter(batch)) if n_paths == 1 else batch


# -- path cache --------------------------------------------------------------------

_HEADER = struct.Struct("<IqdIIdB")


def write_path_cache(fh, path: PathSkeleton, seed: int):
    """Binary record: version, seed, delta, n_positions, d, weight, survived, positions."""
    pos = np.ascontiguousarray(path.positions, dtype="<f8")
    w = math.nan if path.is_weight is None else path.is_weight
    fh.write(_HEADER.pack(CACHE_VERSION, seed, path.delta, pos.shape[0], pos.shape[1], w, path.survived))
    fh.write(pos.tobytes())


def read_path_cache(fh):
    out = []
    while True:
        head = fh.read(_HEADER.size)
        if not head:
            return out
        ver, seed, delta, n, d, w, surv = _HEADER.unpack(head)
        if ver != CACHE_VERSION:
            raise ValueError(f"unsupported cache version {ver}")
        pos = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        out.append(PathSkeleton(delta, pos, bool(surv), None if math.isnan(w) else w))
