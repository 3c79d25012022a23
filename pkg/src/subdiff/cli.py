"""Command-line entry point: ``subdiff <command> --config file.json``."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

from .analysis import AnalysisError, LOG_CASE, limit_constant, rate_class
from .bernstein import BernsteinError, BernsteinFn, classify
from .domain import Domain, DomainError, eigenpair
from .harness import ConfigError, ExperimentConfig, rate_fit, read_table, run_experiment, validate
from .kernels import TruncationError
from .pathsim import InfeasibleError, simulate_paths, write_path_cache

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_CHECK = 0, 1, 2, 3


def _load(path):
    if not path:
        raise ConfigError("--config is required")
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _seed(args, cfg_seed=0):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SUBDIFF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SUBDIFF_SEED must be an integer, got {env!r}") from None
    return cfg_seed


def _experiment(args):
    raw = _load(args.config)
    cfg = ExperimentConfig.from_dict(raw)
    cfg.seed = _seed(args, cfg.seed)
    if args.out:
        cfg.out_dir = args.out
    return cfg.validate()


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if hasattr(x, "tolist"):
        return x.tolist()
    return str(x)


def cmd_spectrum(args):
    raw = _load(args.config)
    dom = Domain.from_dict(raw.get("domain", raw))
    n = min(args.modes, dom.m_trunc + 1)
    out = []
    for m in range(n):
        ep = eigenpair(dom, m)
        out.append({"m": m, "lambda": ep.lam, "multi_index": list(ep.multi_index)})
    _emit({"domain": dom.to_dict(), "modes": out})


def cmd_classify(args):
    raw = _load(args.config)
    B = BernsteinFn.from_dict(raw.get("bernstein", raw))
    alpha = args.alpha if args.alpha is not None else B.alpha_hint
    if alpha is None:
        raise ConfigError(f"{B.kind} has no natural alpha; pass --alpha")
    _emit({"bernstein": B.to_dict(), "alpha": alpha, **classify(B, alpha, d=args.dim)})


def cmd_constant(args):
    raw = _load(args.config)
    dom = Domain.from_dict(raw["domain"])
    B = BernsteinFn.from_dict(raw["bernstein"])
    lc = limit_constant(dom, B, tol=args.tol, alpha=args.alpha)
    _emit(lc.to_dict())


def cmd_simulate(args):
    cfg = _experiment(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"{cfg.experiment_id}.paths.bin")
    n = 0
    with open(path, "wb") as fh:
        for batch in simulate_paths(cfg.make_domain(), cfg.make_bernstein(), cfg.nu, cfg.horizon,
                                    cfg.delta, cfg.n_paths, cfg.mode, cfg.seed, cfg.batch_size):
            for sk in batch:
                write_path_cache(fh, sk, cfg.seed)
                n += 1
    _emit({"paths": n, "file": path})


def cmd_estimate(args):
    cfg = _experiment(args)
    rows, _ = run_experiment(cfg, threads=args.threads)
    _emit({"table": os.path.join(cfg.out_dir, f"{cfg.experiment_id}.csv"), "rows": rows})


def cmd_ratefit(args):
    table = read_table(args.table)
    if args.predicted == "log":
        pred = LOG_CASE
    elif args.predicted is not None:
        pred = float(args.predicted)
    elif args.dim is not None and args.alpha is not None:
        pred = rate_class(args.dim, args.alpha).exponent
    else:
        pred = None
    try:
        fit = rate_fit(table, args.column, args.t_min, pred)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _emit(fit.__dict__)


def cmd_validate(args):
    out = args.out or "results/validate"
    os.makedirs(out, exist_ok=True)
    report = validate(args.suite, out_dir=out, threads=args.threads,
                      report_path=os.path.join(out, f"report_{args.suite}.json"),
                      echo=lambda s: print(s, file=sys.stderr, flush=True))
    _emit({"suite": report["suite"], "passed": report["passed"],
           "checks": {c["name"]: c["passed"] for c in report["checks"]}})
    return EXIT_OK if report["passed"] else EXIT_CHECK


def build_parser():
    p = argparse.ArgumentParser(prog="subdiff", description="Empirical-measure experiments for subordinated killed diffusions.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed and SUBDIFF_SEED")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("spectrum", parents=[common], help="leading Dirichlet eigenvalues")
    s.add_argument("--modes", type=int, default=10)
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("classify", parents=[common], help="class membership of a Bernstein function")
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--dim", type=int, default=2)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("constant", parents=[common], help="limit constant of t E[W_2^2]")
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--tol", type=float, default=1e-6)
    s.set_defaults(func=cmd_constant)

    s = sub.add_parser("simulate", parents=[common], help="write skeleton paths to a binary cache")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", parents=[common], help="run an experiment sweep and write its CSV")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("ratefit", parents=[common], help="log-log rate fit of a result table")
    s.add_argument("--table", required=True)
    s.add_argument("--column", default="value")
    s.add_argument("--t-min", type=float, default=0.0)
    s.add_argument("--predicted", default=None, help="exponent, or 'log' for the critical case")
    s.add_argument("--dim", type=int, default=None)
    s.add_argument("--alpha", type=float, default=None)
    s.set_defaults(func=cmd_ratefit)

    s = sub.add_parser("validate", parents=[common], help="run the fast or full check suite")
    s.add_argument("--suite", choices=("fast", "full"), default="fast")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, DomainError, BernsteinError, AnalysisError, TruncationError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
