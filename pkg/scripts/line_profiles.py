#!/usr/bin/env python3
"""Extract central line profiles from the volumes of a finished run.

Usage::

    python scripts/line_profiles.py runs/toroid_sequential --axis x

Writes ``profiles_<axis>.csv`` with one column per volume found in the
run directory (truth, estimate, f1, f2, warped, f).
"""

import argparse
import csv
from pathlib import Path

from jointrecon.io import load_volume
from jointrecon.metrics import line_profile

NAMES = ("fixed_truth", "estimate", "f1", "f2", "warped", "f")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir")
    ap.add_argument("--axis", choices=("x", "y", "z"), default="x")
    ap.add_argument("--at", type=int, nargs=2, help="the other two voxel indices (default: centre)")
    args = ap.parse_args()

    run = Path(args.run_dir)
    vols = {n: load_volume(run / n) for n in NAMES if (run / f"{n}.meta").exists()}
    if not vols:
        raise SystemExit(f"no volumes in {run}")
    dims = next(iter(vols.values())).dims
    others = [d for a, d in zip("xyz", dims) if a != args.axis]
    at = tuple(args.at) if args.at else tuple(d // 2 for d in others)
    profiles = {n: line_profile(v, args.axis, at) for n, v in vols.items()}
    path = run / f"profiles_{args.axis}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + list(profiles))
        for i in range(len(next(iter(profiles.values())))):
            w.writerow([i] + [repr(float(p[i])) for p in profiles.values()])
    print(path)


if __name__ == "__main__":
    main()
