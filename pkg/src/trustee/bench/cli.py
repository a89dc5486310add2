"""``bench fna|latency`` command line."""

from __future__ import annotations

import argparse
import sys

from .workload import MODES, UsageError, WorkloadConfig, emit_csv, run_fetch_add, run_latency


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="fetch-and-add and latency benchmarks")
    p.add_argument("experiment", choices=["fna", "latency"])
    p.add_argument("--mode", choices=MODES, default="trust")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--dist", choices=["uniform", "zipf"], default="uniform")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--ops", type=int, default=100_000, help="operations per thread")
    p.add_argument("--trustees", default="shared", help="shared or dedicated:N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fibers", type=int, default=16, help="fibers per thread in trust mode")
    p.add_argument("--inflight", type=int, default=64, help="in-flight cap per thread in async mode")
    p.add_argument("--load", type=float, default=10_000.0, help="offered load in ops/s (latency only)")
    p.add_argument("--csv", metavar="PATH")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = WorkloadConfig(
            threads=args.threads,
            objects=args.objects,
            distribution=args.dist,
            alpha=args.alpha,
            ops_per_thread=args.ops,
            mode=args.mode,
            trustees=args.trustees,
            seed=args.seed,
            fibers_per_thread=args.fibers,
            inflight_cap=args.inflight,
        )
        if args.experiment == "fna":
            stats = run_fetch_add(cfg)
        else:
            stats = run_latency(cfg, args.load)
    except UsageError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    if stats.empty:
        print(f"{args.experiment} mode={cfg.mode}: no operations issued")
    else:
        line = f"{args.experiment} mode={cfg.mode} threads={cfg.threads} objects={cfg.objects} dist={cfg.distribution}"
        line += f" throughput={stats.throughput:,.0f} ops/s"
        if args.experiment == "latency":
            line += f" mean={stats.mean_latency * 1e6:.1f}us p999={stats.p999_latency * 1e6:.1f}us"
            line += " saturated" if stats.saturated else ""
        line += f" sum={'ok' if stats.sum_ok else 'MISMATCH'}"
        print(line)
    if args.csv:
        emit_csv(stats, args.csv)
    return 0 if stats.sum_ok else 1


if __name__ == "__main__":
    sys.exit(main())
