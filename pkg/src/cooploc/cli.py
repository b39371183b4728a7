"""Command-line driver.

Subcommands:
  simulate --config <file> --alg <label> --out <csv>   per-slot records
  fig2     --config <file> --out <csv>                 outage-study summary
  fig3     --config <file> --out <csv>                 density-sweep summary
  bench    --config <file>                             complexity microbench
  validate [--cases N]                                 closed-form vs oracle

Exit codes: 0 success, 1 configuration error, 2 validation-suite failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .simulator import ScenarioConfig, load_scenario


def _load_cfg(path: str) -> ScenarioConfig:
    try:
        return load_scenario(path)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        raise SystemExit(1)


def _parse_algorithms(raw: str) -> tuple[str, ...]:
    algs = tuple(a.strip() for a in raw.split(",") if a.strip())
    for alg in algs:
        if alg not in harness.ALGORITHMS:
            print(
                f"config error: unknown algorithm {alg!r}; choose from {harness.ALGORITHMS}",
                file=sys.stderr,
            )
            raise SystemExit(1)
    return algs


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args.config)
    rows, meta = harness.run_scenario(cfg, _parse_algorithms(args.alg), workers=args.workers)
    harness.write_records_csv(rows, args.out)
    print(json.dumps({"rows": len(rows), **{k: v for k, v in meta.items() if k != "trace_digests"}}))
    return 0


def cmd_fig2(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args.config)
    rows, summary, meta = harness.fig2_protocol(
        cfg, _parse_algorithms(args.algs), workers=args.workers
    )
    harness.write_summary_csv(summary, args.out)
    if args.records_out:
        harness.write_records_csv(rows, args.records_out)
    print(json.dumps({"rows": len(rows), "mask_schedule": meta["mask_schedule"]}))
    return 0


def cmd_fig3(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args.config)
    points, meta = harness.fig3_protocol(
        cfg, _parse_algorithms(args.algs), workers=args.workers
    )
    harness.write_summary_csv(points, args.out)
    print(json.dumps({"points": len(points), "agent_counts": meta["agent_counts"]}))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args.config)
    rows = harness.bench_complexity(cfg, n_rel=args.n_rel)
    if args.out:
        harness.write_bench_csv(rows, args.out)
    for r in rows:
        print(
            f"{r.alg:12s} n_rel={r.n_rel} ops/slot={r.ops_per_slot} "
            f"analytic={r.analytic_ops} wall={r.wall_ms_per_slot:.3f} ms"
        )
    ref = {r.alg: r.wall_ms_per_slot for r in rows}
    if "ekf-stdf" in ref and "spawn" in ref and ref["ekf-stdf"] > 0:
        print(f"wall-time ratio (spawn / ekf-stdf): {ref['spawn'] / ref['ekf-stdf']:.1f}x")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    results, ok = harness.validate_messages(cases=args.cases, seed=args.seed)
    print(harness.validation_report(results, ok))
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cooploc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario and write per-slot records")
    p.add_argument("--config", required=True)
    p.add_argument("--alg", required=True, help="algorithm label (comma-separated for several)")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fig2", help="single-agent outage study")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="summary CSV (grouped by neighbor count)")
    p.add_argument("--records-out", default=None, help="optional per-slot records CSV")
    p.add_argument("--algs", default=",".join(harness.ALGORITHMS))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_fig2)

    p = sub.add_parser("fig3", help="density sweep over agent counts")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="summary CSV (grouped by agent count)")
    p.add_argument("--algs", default=",".join(harness.ALGORITHMS))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_fig3)

    p = sub.add_parser("bench", help="single-agent complexity microbenchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--n-rel", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="closed-form vs quadrature validation suite")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=2024)
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
