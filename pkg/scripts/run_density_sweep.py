#!/usr/bin/env python3
"""Density sweep (30..60 agents): overall RMSE per algorithm, summary CSV.

Equivalent to `cooploc fig3`, kept as a script for notebook-free experiment
runs with a bit of console feedback.
"""

import argparse
import time

from cooploc import harness
from cooploc.simulator import load_scenario


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="scenarios/default.cfg")
    parser.add_argument("--out", default="density_sweep.csv")
    parser.add_argument("--algs", default="ekf-stdf,spawn,spa-ekf,ekf-only")
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()

    cfg = load_scenario(args.config)
    algorithms = tuple(a.strip() for a in args.algs.split(","))
    start = time.time()
    points, meta = harness.fig3_protocol(cfg, algorithms, workers=args.workers)
    harness.write_summary_csv(points, args.out)
    print(f"wrote {args.out} in {time.time() - start:.0f}s")
    for p in points:
        print(f"  agents={p.group_key:3s} {p.alg:10s} rmse={p.rmse:8.2f} m  (n={p.n})")


if __name__ == "__main__":
    main()
