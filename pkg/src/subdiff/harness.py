"""Experiment orchestration: configs, sweeps over t, rate regression, persistence."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import LOG_CASE, rate_class
from .bernstein import BernsteinFn
from .domain import Domain
from .kernels import InitialSpec, kernel
from .pathsim import (
    MODES, InfeasibleError, _prior_acceptance, accumulate_batch, n_atoms, n_steps,
    ratio_estimate, rejection_estimate, simulate_paths,
)
from .domain import qsd_sample
from .transport import ReferenceClouds, assignment_cost, cloud_bias, ot_entropic, w_exact_1d

CSV_COLUMNS = [
    "experiment_id", "t", "T", "estimator_mode", "n_paths", "n_effective",
    "value", "stderr", "t_times_value", "ot_method", "seed",
]
OT_METHODS = ("quantile", "assignment", "sinkhorn", "none")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment_id: str
    domain: dict
    bernstein: dict
    t_grid: list
    delta: float
    n_paths: int
    nu: dict = field(default_factory=lambda: {"kind": "qsd"})
    T_multipliers: list = field(default_factory=lambda: [1.0])
    mode: str = "doob_is"
    ot_method: str = "quantile"
    ot_params: dict = field(default_factory=dict)
    m_psi: int = 5
    seed: int = 0
    out_dir: str = "results"
    batch_size: int = 1000

    def __post_init__(self):
        self.t_grid = [float(t) for t in self.t_grid]
        self.T_multipliers = [float(m) for m in self.T_multipliers]
        self.delta = float(self.delta)

    def validate(self):
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")
        if not self.t_grid or any(b <= a for a, b in zip(self.t_grid, self.t_grid[1:])):
            raise ConfigError("t_grid must be nonempty and strictly increasing")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.ot_method not in OT_METHODS:
            raise ConfigError(f"ot_method must be one of {OT_METHODS}")
        if any(m < 1 for m in self.T_multipliers):
            raise ConfigError("T multipliers must be >= 1")
        try:
            for t in self.t_grid:
                n_steps(t, self.delta)
                for m in self.T_multipliers:
                    n_steps(t * m, self.delta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        dom = self.make_domain()
        if self.ot_method == "quantile" and dom.d != 1:
            raise ConfigError("quantile OT needs an interval")
        if self.ot_method in ("assignment", "sinkhorn") and dom.d < 2:
            raise ConfigError(f"{self.ot_method} OT is meant for boxes; use quantile")
        InitialSpec.coerce(self.nu).validate(dom)
        self.make_bernstein()
        return self

    def make_domain(self):
        return Domain.from_dict(self.domain)

    def make_bernstein(self):
        return BernsteinFn.from_dict(self.bernstein)

    def rows(self):
        """(t, T) pairs in output order."""
        return [(t, round(t * m / self.delta) * self.delta) for t in self.t_grid for m in self.T_multipliers]

    @property
    def horizon(self):
        return max(T for _, T in self.rows())

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def config_hash(self):
        """Hash of everything that determines the numbers (not the output location)."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("experiment_id")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


# -- per-batch work ----------------------------------------------------------------------

def _path_cost(dom, atoms, cfg, seed_key, ctx):
    method = cfg.ot_method
    q = float(cfg.ot_params.get("q", 2.0))
    if method == "quantile":
        return w_exact_1d(atoms, dom, q).cost
    if method == "assignment":
        rng = np.random.default_rng(np.random.SeedSequence(seed_key))
        return assignment_cost(atoms, qsd_sample(dom, atoms.shape[0], rng), q)
    if method == "sinkhorn":
        kw = {k: cfg.ot_params[k] for k in ("eps", "max_iter", "tol") if k in cfg.ot_params}
        return ot_entropic(atoms, ctx["clouds"].c1, q, **kw).cost - ctx["clouds"].bias
    return math.nan


def _batch_records(cfg: ExperimentConfig, batch_index: int, batch):
    """Per-path raw values for every (t, T) row of one batch."""
    dom = cfg.make_domain()
    ctx = {}
    if cfg.ot_method == "sinkhorn":
        ctx["clouds"] = ReferenceClouds.build(
            dom, int(cfg.ot_params.get("n_ref", 512)), cfg.seed, float(cfg.ot_params.get("q", 2.0))
        )
    rows = cfg.rows()
    n = batch.n_paths
    cost = np.full((len(cfg.t_grid), n), np.nan)
    psi2 = np.full((len(cfg.t_grid), n, cfg.m_psi), np.nan)
    for it, t in enumerate(cfg.t_grid):
        k = n_atoms(t, cfg.delta)
        psi = accumulate_batch(batch, t, cfg.m_psi, dom)
        psi2[it] = psi**2
        ok = batch.alive[:, k - 1]
        if cfg.ot_method == "none":
            continue
        for i in np.nonzero(ok)[0]:
            key = [cfg.seed, batch_index, int(i), it, 0xC10D]
            cost[it, i] = _path_cost(dom, batch.positions[i, :k], cfg, key, ctx)
    survived = np.stack([batch.survived_until(T) for _, T in rows])
    if cfg.mode == "doob_is":
        weights = np.stack([batch.weight_at(T, dom) for _, T in rows])
    else:
        weights = survived.astype(float)
    return {"cost": cost, "psi2": psi2, "survived": survived, "weights": weights}


def _run_batch(args):
    cfg_json, index, size = args
    cfg = ExperimentConfig.from_json(cfg_json)
    dom, B = cfg.make_domain(), cfg.make_bernstein()
    # One batch of the global stream: reproduce its seed and size exactly.
    stream = simulate_paths(dom, B, cfg.nu, cfg.horizon, cfg.delta, cfg.n_paths, cfg.mode,
                            cfg.seed, cfg.batch_size, skip=index, limit=1)
    batch = next(stream)
    assert batch.n_paths == size
    return _batch_records(cfg, index, batch)


def _batch_plan(cfg):
    full, rest = divmod(cfg.n_paths, cfg.batch_size)
    return [cfg.batch_size] * full + ([rest] if rest else [])


def _cache_dir(cfg):
    return os.path.join(cfg.out_dir, "cache", cfg.config_hash())


def _load_or_run(cfg, threads=1):
    cdir = _cache_dir(cfg)
    os.makedirs(cdir, exist_ok=True)
    plan = _batch_plan(cfg)
    paths = [os.path.join(cdir, f"batch_{i:05d}.npz") for i in range(len(plan))]
    todo = [i for i, p in enumerate(paths) if not os.path.exists(p)]
    cfg_json = cfg.to_json()
    jobs = [(cfg_json, i, plan[i]) for i in todo]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(threads) as pool:
            results = pool.map(_run_batch, jobs)
            for i, rec in zip(todo, results):
                _save(paths[i], rec)
    else:
        for job, i in zip(jobs, todo):
            _save(paths[i], _run_batch(job))
    recs = [dict(np.load(p)) for p in paths]
    return {k: np.concatenate([r[k] for r in recs], axis=-2 if k == "psi2" else -1) for k in recs[0]}


def _save(path, rec):
    tmp = path + ".tmp.npz"
    np.savez(tmp, **rec)
    os.replace(tmp, path)


def _estimate(values, weights, survived, mode):
    if mode == "rejection":
        return rejection_estimate(np.nan_to_num(values), survived)
    return ratio_estimate(values, weights)


def run_experiment(cfg: ExperimentConfig, threads=1, write=True):
    """Run (or resume) the sweep; returns ``(rows, aux)`` and writes CSV + JSON."""
    cfg.validate()
    dom, B = cfg.make_domain(), cfg.make_bernstein()
    if cfg.mode == "rejection":
        acc = _prior_acceptance(kernel(dom, B), InitialSpec.coerce(cfg.nu), cfg.horizon)
        if acc is not None and acc < 1e-4:
            raise InfeasibleError(f"rejection acceptance ~{acc:.1e} < 1e-4; use doob_is")
    rec = _load_or_run(cfg, threads)
    rows, aux = [], {"config_hash": cfg.config_hash(), "threads": threads, "rows": []}
    biases = {}
    for r, (t, T) in enumerate(cfg.rows()):
        it = cfg.t_grid.index(t)
        w, surv = rec["weights"][r], rec["survived"][r]
        extra = {"t": t, "T": T}
        if cfg.ot_method != "none":
            vals = rec["cost"][it]
            est = _estimate(vals, w, surv, cfg.mode)
            value, se = est.value, est.stderr
            if cfg.ot_method == "assignment":
                n = n_atoms(t, cfg.delta)
                if n not in biases:
                    biases[n] = cloud_bias(dom, n, cfg.seed, int(cfg.ot_params.get("n_bias_pairs", 8)))
                b, bse = biases[n]
                extra.update(raw_value=value, cloud_bias=b, cloud_bias_se=bse)
                value, se = value - b, math.hypot(se, bse)
        else:
            est = _estimate(np.ones_like(w), w, surv, cfg.mode)
            value, se = math.nan, math.nan
        psi = []
        for m in range(cfg.m_psi):
            e = _estimate(rec["psi2"][it][:, m], w, surv, cfg.mode)
            psi.append({"m": m + 1, "t_times_value": t * e.value, "stderr": t * e.stderr})
        extra.update(psi2=psi, n_effective=est.n_effective, low_confidence=est.low_confidence)
        aux["rows"].append(extra)
        rows.append({
            "experiment_id": cfg.experiment_id, "t": t, "T": T, "estimator_mode": cfg.mode,
            "n_paths": cfg.n_paths, "n_effective": est.n_effective, "value": value,
            "stderr": se, "t_times_value": t * value, "ot_method": cfg.ot_method, "seed": cfg.seed,
        })
    if write:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_table(rows, os.path.join(cfg.out_dir, f"{cfg.experiment_id}.csv"))
        with open(os.path.join(cfg.out_dir, f"{cfg.experiment_id}.aux.json"), "w") as fh:
            json.dump(aux, fh, indent=2, sort_keys=True)
        with open(os.path.join(cfg.out_dir, f"{cfg.experiment_id}.config.json"), "w") as fh:
            fh.write(cfg.to_json())
    return rows, aux


def write_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_table(path):
    with open(path) as fh:
        out = []
        for row in csv.DictReader(fh):
            for k in ("t", "T", "n_effective", "value", "stderr", "t_times_value"):
                row[k] = float(row[k])
            out.append(row)
        return out


# -- rate regression ------------------------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    intercept: float
    slope_stderr: float
    r2: float
    points_used: int
    predicted: float | str | None
    verdict: str


def _wls(x, y, w):
    W = w.sum()
    xb, yb = (w * x).sum() / W, (w * y).sum() / W
    sxx = (w * (x - xb) ** 2).sum()
    slope = (w * (x - xb) * (y - yb)).sum() / sxx
    icpt = yb - slope * xb
    res = y - icpt - slope * x
    dof = max(x.size - 2, 1)
    s2 = (w * res**2).sum() / dof
    se = math.sqrt(s2 / sxx)
    ss_tot = (w * (y - yb) ** 2).sum()
    r2 = 1.0 - (w * res**2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), float(se), float(r2)


def rate_fit(table, column="value", t_min=0.0, predicted=None, tol=0.15):
    """Weighted log-log fit of ``column`` against t (weights from relative stderr).

    ``predicted`` is an exponent, ``LOG_CASE`` (then the fit is of log(t v / log t),
    consistent iff its slope <= 0.1 + 2 se), or None (verdict 'inconclusive')."""
    pts = [r for r in table if r["t"] >= t_min and r.get("T", r["t"]) == r["t"]]
    if len(pts) < 4:
        raise ValueError(f"need >= 4 points with t >= {t_min}, got {len(pts)}")
    t = np.array([r["t"] for r in pts])
    v = np.array([r[column] for r in pts])
    se = np.array([r["stderr"] for r in pts])
    if column == "t_times_value":
        se = se * t
    if np.any(v <= 0):
        raise ValueError("log-log fit needs positive values")
    w = 1.0 / np.maximum(se / v, 1e-12) ** 2
    x = np.log(t)
    if predicted == LOG_CASE:
        y = np.log(t * v / np.log(t)) if column == "value" else np.log(v / np.log(t))
        slope, icpt, sse, r2 = _wls(x, y, w)
        verdict = "consistent" if slope <= 0.1 + 2.0 * sse else "inconsistent"
        return RateFit(slope, icpt, sse, r2, len(pts), LOG_CASE, verdict)
    slope, icpt, sse, r2 = _wls(x, np.log(v), w)
    if predicted is None:
        verdict = "inconclusive"
    else:
        verdict = "consistent" if abs(slope - predicted) <= max(2.0 * sse, tol) else "inconsistent"
    return RateFit(slope, icpt, sse, r2, len(pts), predicted, verdict)


def predicted_exponent(d, alpha, boundary_convex=True):
    return rate_class(d, alpha, boundary_convex).exponent


# -- validation suites ----------------------------------------------------------------------

def validate(suite="fast", out_dir="results/validate", threads=1, report_path=None, echo=None):
    """Run a named check suite; returns the JSON-ready report (failures are entries, not errors)."""
    from . import validation

    if suite not in validation.SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {sorted(validation.SUITES)}")
    checks = []
    for fn in validation.SUITES[suite]:
        chk = validation.run_check(fn, out_dir, threads)
        if echo:
            echo(chk.line())
        checks.append(chk.to_dict())
    report = {"suite": suite, "passed": all(c["passed"] for c in checks), "checks": checks}
    if report_path:
        with open(report_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True, default=str)
    return report
