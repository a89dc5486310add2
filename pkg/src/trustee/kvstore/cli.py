"""``kv serve`` and ``kv bench`` command line."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import signal
import sys

from .client import ClientConfig, load_client
from .server import KVServer, ServerConfig


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kv", description="sharded key-value server and load client")
    sub = p.add_subparsers(dest="cmd", required=True)
    s = sub.add_parser("serve", help="run a server until interrupted")
    s.add_argument("--addr", type=_addr, default=("127.0.0.1", 7070))
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--trustees", type=int, default=1)
    s.add_argument("--shards", type=int, default=None)
    s.add_argument("--mode", choices=["trust", "locks"], default="trust")
    b = sub.add_parser("bench", help="drive a running server")
    b.add_argument("--addr", type=_addr, default=("127.0.0.1", 7070))
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--pipeline", type=int, default=32)
    b.add_argument("--keys", type=int, default=1000)
    b.add_argument("--dist", choices=["uniform", "zipf"], default="uniform")
    b.add_argument("--alpha", type=float, default=1.0)
    b.add_argument("--writes", type=float, default=0.05, help="fraction of PUTs")
    b.add_argument("--seconds", type=float, default=5.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--verify", action="store_true")
    b.add_argument("--no-prefill", action="store_true")
    b.add_argument("--csv", metavar="PATH")
    return p


def _stop_on_term(server: KVServer) -> None:
    def handler(signum, frame):
        server.stopping = True

    signal.signal(signal.SIGTERM, handler)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.cmd == "serve":
        host, port = args.addr
        cfg = ServerConfig(
            host=host, port=port, workers=args.workers, trustees=args.trustees, shards=args.shards, mode=args.mode
        )
        srv = KVServer(cfg)
        h, p = srv.start()
        _stop_on_term(srv)
        print(f"kv {cfg.mode} server listening on {h}:{p}", flush=True)
        try:
            srv.serve_forever()
        except KeyboardInterrupt:
            srv.stop()
        return 0
    host, port = args.addr
    cfg = ClientConfig(
        host=host,
        port=port,
        threads=args.threads,
        pipeline=args.pipeline,
        keys=args.keys,
        distribution=args.dist,
        alpha=args.alpha,
        write_ratio=args.writes,
        seconds=args.seconds,
        verify=args.verify,
        prefill=not args.no_prefill,
        seed=args.seed,
    )
    stats = load_client(cfg)
    print(
        f"kv bench threads={cfg.threads} pipeline={cfg.pipeline} keys={cfg.keys} dist={cfg.distribution}"
        f" throughput={stats.throughput:,.0f} ops/s mean={stats.mean_latency * 1e6:.0f}us"
        f" p999={stats.p999_latency * 1e6:.0f}us ops={stats.total_ops}"
        + (f" verified={'ok' if not stats.violations else 'VIOLATIONS'}" if stats.verified else "")
    )
    for e in stats.errors[:10]:
        print(f"error: {e}", file=sys.stderr)
    if args.csv:
        row = dataclasses.asdict(cfg)
        row.update(
            throughput=stats.throughput,
            mean_latency=stats.mean_latency,
            p999_latency=stats.p999_latency,
            total_ops=stats.total_ops,
            violations=len(stats.violations),
            bijection_ok=stats.bijection_ok,
        )
        fresh = not os.path.exists(args.csv) or os.path.getsize(args.csv) == 0
        with open(args.csv, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(row))
            if fresh:
                w.writeheader()
            w.writerow(row)
    return 0 if stats.ok else 1


if __name__ == "__main__":
    sys.exit(main())
