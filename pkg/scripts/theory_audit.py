"""Audit the generalization bounds on random discrete scenarios and summarize slack.

    python scripts/theory_audit.py --scenarios 500 --out results/theory-report.json
"""

import argparse
from collections import defaultdict

import numpy as np

from netcause.theory import audit, write_theory_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/theory-report.json")
    args = ap.parse_args()
    reports = audit(args.scenarios, args.seed)
    by_name = defaultdict(list)
    for r in reports:
        by_name[r.name].append(r)
    print(f"{'inequality':<10} {'checks':>6} {'fails':>6} {'min slack':>12} {'median ratio':>13}")
    for name, rs in sorted(by_name.items()):
        slack = np.array([r.slack for r in rs])
        ratio = np.array([r.lhs / r.rhs for r in rs if r.rhs > 0])
        print(f"{name:<10} {len(rs):>6} {sum(not r.passed for r in rs):>6} "
              f"{slack.min():>12.3e} {np.median(ratio) if ratio.size else float('nan'):>13.3f}")
    print("report:", write_theory_report(reports, args.out))


if __name__ == "__main__":
    main()
