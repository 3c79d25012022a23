"""Bernstein functions (Laplace exponents of subordinators) and their samplers."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

KINDS = ("drift", "stable", "drift_stable", "gamma", "remark_example")


class BernsteinError(ValueError):
    pass


class UnsupportedSampler(BernsteinError):
    pass


def _falling(beta, n):
    """beta (beta - 1) ... (beta - n + 1)."""
    out = 1.0
    for j in range(n):
        out *= beta - j
    return out


@dataclass(frozen=True)
class BernsteinFn:
    kind: str
    a: float = 0.0
    b: float = 0.0
    alpha: float | None = None

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=float)
        if self.kind == "drift":
            return self.a * lam
        if self.kind == "stable":
            return lam**self.alpha
        if self.kind == "drift_stable":
            return self.a * lam + self.b * lam**self.alpha
        if self.kind == "gamma":
            return np.log1p(lam)
        return 1.0 - (1.0 + lam) ** (self.alpha - 1.0)

    def derivative(self, lam, n=1):
        """Closed-form n-th derivative on (0, inf)."""
        lam = np.asarray(lam, dtype=float)
        if n == 0:
            return self(lam)
        if self.kind == "drift":
            return np.full_like(lam, self.a if n == 1 else 0.0)
        if self.kind == "stable":
            return _falling(self.alpha, n) * lam ** (self.alpha - n)
        if self.kind == "drift_stable":
            lin = self.a if n == 1 else 0.0
            return lin + self.b * _falling(self.alpha, n) * lam ** (self.alpha - n)
        if self.kind == "gamma":
            return (-1.0) ** (n - 1) * math.factorial(n - 1) / (1.0 + lam) ** n
        beta = self.alpha - 1.0
        return -_falling(beta, n) * (1.0 + lam) ** (beta - n)

    @property
    def alpha_hint(self):
        if self.kind == "drift":
            return 1.0
        if self.kind == "drift_stable":
            return 1.0
        if self.kind == "stable":
            return self.alpha
        return None

    @property
    def sampler_kind(self):
        return "none" if self.kind == "remark_example" else "exact"

    @property
    def is_deterministic(self):
        return self.kind == "drift"

    # -- subordinator increments -------------------------------------------
    def sample(self, t, rng, size=None):
        """Increments S_t of the subordinator, E exp(-lam S_t) = exp(-t B(lam))."""
        if self.sampler_kind != "exact":
            raise UnsupportedSampler(
                f"no exact subordinator sampler for {self.kind!r}; use spectral kernels"
            )
        rng = np.random.default_rng(rng)
        t = np.asarray(t, dtype=float)
        t = np.broadcast_to(t, t.shape if size is None else size)
        if self.kind == "drift":
            return self.a * t
        if self.kind == "gamma":
            return rng.gamma(t)
        scale = t if self.kind == "stable" else self.b * t
        jump = scale ** (1.0 / self.alpha) * positive_stable(self.alpha, rng, t.shape)
        if self.kind == "drift_stable":
            return self.a * t + jump
        return jump

    def sample_tilted(self, t, theta, rng, size):
        """Increments drawn from exp(-theta s) P(S_t in ds), renormalized.

        Gamma tilts in closed form; stable parts by rejection (acceptance
        exp(-t B(theta)) up to the drift factor).
        """
        rng = np.random.default_rng(rng)
        if self.kind == "drift":
            return np.full(size, self.a * t)
        if self.kind == "gamma":
            return rng.gamma(t, 1.0 / (1.0 + theta), size=size)
        if self.sampler_kind != "exact":
            raise UnsupportedSampler(f"no exact subordinator sampler for {self.kind!r}")
        offset = self.a * t if self.kind == "drift_stable" else 0.0
        scale = (t if self.kind == "stable" else self.b * t) ** (1.0 / self.alpha)
        out = np.empty(size)
        todo = np.arange(size)
        while todo.size:
            s = scale * positive_stable(self.alpha, rng, todo.size)
            ok = rng.random(todo.size) < np.exp(-theta * s)
            out[todo[ok]] = s[ok]
            todo = todo[~ok]
        return offset + out

    def to_dict(self):
        out = {"kind": self.kind}
        if self.kind in ("drift", "drift_stable"):
            out["a"] = self.a
        if self.kind == "drift_stable":
            out["b"] = self.b
        if self.alpha is not None:
            out["alpha"] = self.alpha
        return out

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, spec):
        spec = dict(spec)
        return make_bernstein(spec.pop("kind"), **spec)


def positive_stable(alpha, rng, size):
    """Kanter's representation of the one-sided stable law with
    ``E exp(-lam S) = exp(-lam^alpha)``."""
    u = rng.random(size) * np.pi
    e = rng.exponential(size=size)
    a = np.sin(alpha * u) / np.sin(u) ** (1.0 / alpha)
    b = (np.sin((1.0 - alpha) * u) / e) ** ((1.0 - alpha) / alpha)
    return a * b


def make_bernstein(kind, **params):
    if kind not in KINDS:
        raise BernsteinError(f"unknown Bernstein kind {kind!r}")
    alpha = params.get("alpha")
    if kind in ("stable", "drift_stable", "remark_example"):
        if alpha is None or not 0.0 < alpha < 1.0:
            raise BernsteinError(f"alpha must lie in (0, 1) for {kind}, got {alpha}")
    a = float(params.get("a", 1.0 if kind in ("drift", "drift_stable") else 0.0))
    b = float(params.get("b", 1.0 if kind == "drift_stable" else 0.0))
    if kind in ("drift", "drift_stable") and not a > 0:
        raise BernsteinError("drift coefficient must be positive")
    if kind == "drift_stable" and not b > 0:
        raise BernsteinError("stable coefficient must be positive")
    return BernsteinFn(kind, a=a, b=b, alpha=None if alpha is None else float(alpha))


def check_bernstein(B, lam_min=1e-3, lam_max=1e6, n_probe=200, n_derivs=6):
    """Numerical sanity checks of the Bernstein-function defining properties.

    Returns a dict of booleans; all must hold for a valid catalog member.
    """
    lam = np.geomspace(lam_min, lam_max, n_probe)
    vals = B(lam)
    h = 1e-7
    out = {
        "zero_at_zero": abs(float(B(0.0))) == 0.0,
        "positive_slope_at_zero": float(B(h) - B(0.0)) / h > 0,
        "nondecreasing": bool(np.all(np.diff(vals) >= -1e-12 * np.abs(vals[1:]))),
    }
    # Concavity through second differences on the nonuniform grid.
    slopes = np.diff(vals) / np.diff(lam)
    out["concave"] = bool(np.all(np.diff(slopes) <= 1e-9 * np.abs(slopes[1:]) + 1e-300))
    signs = True
    for n in range(1, n_derivs + 1):
        dn = B.derivative(lam, n)
        signs &= bool(np.all((-1.0) ** n * dn <= 1e-6 * np.abs(vals)))
    out["alternating_derivatives"] = signs
    return out


def _tail_exponent(B, lam_probe_max):
    """Local log-log slope of B over the last two decades of the probe grid."""
    lam = np.geomspace(lam_probe_max / 100.0, lam_probe_max, 41)
    return float(np.polyfit(np.log(lam), np.log(B(lam)), 1)[0])


def classify(B, alpha, lam_probe_max=1e8, d=2, r_values=(0.1, 1.0, 10.0)):
    """Class membership of B along a geometric probe grid.

    ``in_B_upper_alpha``: liminf lam^-alpha B(lam) > 0.
    ``in_B_lower_alpha``: limsup lam^-alpha B(lam) < inf.
    ``in_blackboard_B``: int_1^inf s^(d/2-1) exp(-r B(s)) ds < inf for every probed r.
    """
    if lam_probe_max < 1e6:
        raise BernsteinError("lam_probe_max must be >= 1e6")
    slope = _tail_exponent(B, lam_probe_max) - alpha
    uncertain = 0.02 <= abs(slope) < 0.1
    grows, decays = slope > 0.0, slope < 0.0
    flat = abs(slope) < 0.02
    in_upper = bool(flat or grows)
    in_lower = bool(flat or decays)

    # Integrability: s * integrand = exp((d/2) log s - r B(s)); compare the
    # log-derivative d/2 - r s B'(s) at the far end of the probe grid.
    bb = True
    integrals = {}
    for r in r_values:
        s_far = lam_probe_max
        kappa = d / 2.0 - r * s_far * float(B.derivative(s_far))
        growth = r * float(B(s_far)) - (d / 2.0) * math.log(s_far)
        converges = kappa < -0.05 or growth > 50.0
        if abs(kappa) < 0.05 and growth <= 50.0:
            uncertain = True
        bb &= converges
        val, _ = integrate.quad(
            lambda s: s ** (d / 2.0 - 1.0) * math.exp(-r * float(B(s))),
            1.0, lam_probe_max, limit=400,
        )
        integrals[r] = val
    return {
        "in_B_upper_alpha": in_upper,
        "in_B_lower_alpha": in_lower,
        "in_blackboard_B": bool(bb),
        "d_for_blackboard": int(d),
        "uncertain": bool(uncertain),
        "tail_slope": slope + alpha,
        "partial_integrals": integrals,
    }


def fit_lower_constant(B, alpha, lam_max=1e6, n_probe=400):
    """Largest kappa with B(t) >= kappa min(t^alpha, t) on a probe grid."""
    t = np.geomspace(1e-6, lam_max, n_probe)
    return float(np.min(B(t) / np.minimum(t**alpha, t)))


def sample_increment(B, t, rng, size=None):
    """Subordinator increment over duration ``t`` (see :meth:`BernsteinFn.sample`)."""
    return B.sample(t, rng, size)
