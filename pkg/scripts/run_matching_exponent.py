"""Empirical matching exponent: E W_p(mu_N, mu_0) for i.i.d. mu_0 samples on [0, pi], p = 0.5.

p = d/2 here, so the local slope carries a log correction: about -1/2 + 1/log N.
Run: python3 scripts/run_matching_exponent.py --reps 8
"""
import argparse

import numpy as np

from subdiff.validation import MATCHING_N, check_matching_exponent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sizes", type=int, nargs="+", default=list(MATCHING_N))
    args = ap.parse_args()
    chk = check_matching_exponent(seed=args.seed, reps=args.reps, Ns=tuple(args.sizes))
    print(chk.line())
    for k, v in chk.details.items():
        print(f"  {k}: {np.round(v, 5) if isinstance(v, (list, tuple)) else v}")


if __name__ == "__main__":
    main()
