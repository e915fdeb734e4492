"""Run an experiment grid from an INI file and print the effect tables.

    python scripts/run_grid.py scripts/configs/smoke.ini
    python scripts/run_grid.py scripts/configs/grid.ini --jobs 4
"""

import argparse
import logging
import time
import warnings
from dataclasses import replace

from netcause.harness import EVAL_SPLITS, ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--jobs", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.from_ini(args.config)
    if args.jobs:
        cfg = replace(cfg, jobs=args.jobs)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    start = time.time()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        table = run_experiment(cfg)
    print(f"finished in {time.time() - start:.0f}s, {len(table.missing)} missing cells")
    for effect in ("main", "spillover", "total"):
        print(f"\nPEHE ({effect}), mean +- sd over seeds")
        print("k     split   " + "".join(f"{v:>18}" for v in cfg.variants))
        for k in cfg.ks:
            for split in EVAL_SPLITS:
                cells = []
                for v in cfg.variants:
                    try:
                        cells.append(f"{table.pehe(k, split, effect, v):8.3f} +- "
                                     f"{table.pehe(k, split, effect, v, 'sd'):5.3f}")
                    except KeyError:
                        cells.append("missing")
                print(f"{k:<5g} {split:<7} " + "".join(f"{c:>18}" for c in cells))
    print("\nselected lambda:", {f"{v}@k={k:g}": lam for (k, v), lam in
                                 sorted(table.selected_lambda.items())})
    print(f"tables in {cfg.output_dir}")


if __name__ == "__main__":
    main()
