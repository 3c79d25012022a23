"""exp(B(lam_0) T) P(T < sigma) on [0, pi] by rejection and by Doob weights, against quadrature.

Run: python3 scripts/run_survival.py --paths 40000
"""
import argparse
import json

from subdiff.validation import check_survival


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=40_000)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    chk = check_survival(n_paths=args.paths, seed=args.seed)
    print(chk.line())
    print(json.dumps(chk.details, indent=2))


if __name__ == "__main__":
    main()
