"""Run the fast or full check suite and write a JSON report.

Run: python3 scripts/run_validation.py --suite fast --out results/validate
"""
import argparse
import os
import sys

from subdiff.harness import validate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--suite", choices=("fast", "full"), default="fast")
    ap.add_argument("--out", default="results/validate")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    report = validate(args.suite, args.out, args.threads,
                      report_path=os.path.join(args.out, f"report_{args.suite}.json"), echo=print)
    sys.exit(0 if report["passed"] else 3)


if __name__ == "__main__":
    main()
