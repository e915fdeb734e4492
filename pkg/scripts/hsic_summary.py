"""Dependence between covariates and treatment pairs before and after balancing.

Reads fig_hsic.csv from a finished grid and prints the median HSIC at each
stage relative to the raw covariates.

    python scripts/hsic_summary.py results/grid
"""

import argparse
import csv
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("results")
    ap.add_argument("--variant", default="both")
    args = ap.parse_args()
    with open(Path(args.results) / "fig_hsic.csv", newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if r["variant"] == args.variant]
    for k in sorted({r["k"] for r in rows}, key=float):
        med = {r["stage"]: float(r["median"]) for r in rows if r["k"] == k}
        raw = med.get("raw")
        parts = [f"raw {raw:.3e}"] + [f"{s} {med[s] / raw:.1%} of raw"
                                      for s in ("reweighted", "reweighted+repre") if s in med]
        print(f"k={k}: " + ", ".join(parts))


if __name__ == "__main__":
    main()
