#!/usr/bin/env python3
"""Run the three pipelines on one config and tabulate MSE and relative error.

Usage::

    python scripts/compare_methods.py configs/toroid_sequential.cfg --out runs/compare

Only ``[method] name`` changes between runs; everything else comes from
the config.  Writes ``comparison.csv``.
"""

import argparse
import csv
from pathlib import Path

from jointrecon.cli import run_experiment
from jointrecon.config import load_config

METHODS = ("sequential", "iterative", "simultaneous")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()

    out = Path(args.out)
    rows = []
    for name in args.methods:
        cfg = load_config(args.config, {"method.name": repr(name)})
        _, s, _ = run_experiment(cfg, out / name)
        rows.append([name, repr(s.initial_mse), repr(s.mse), repr(s.relative_error)])
        print(f"{name:>12}: initial_mse={s.initial_mse:.4g} final_mse={s.mse:.4g} "
              f"relative_error={s.relative_error:.4g}")
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "initial_mse", "final_mse", "final_relative_error"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
