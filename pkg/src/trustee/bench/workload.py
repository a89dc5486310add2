"""Fetch-and-add throughput and latency-versus-load experiments.

A run increments counters chosen from a set of ``objects`` by each of
``threads`` threads. The object sequence of every thread depends only on
the seed, so all modes do identical work and differ only in how the
counters are synchronized:

``trust``  fibers issuing blocking ``apply`` (16 per thread by default)
``async``  one fiber per thread issuing ``apply_then`` with a bounded
           number of requests in flight (64 by default)
``mutex``, ``spin``, ``mcs``  one lock per counter
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..fibers import yield_now
from ..runtime import Runtime, RuntimeConfig
from ..trust import Ref, spawn
from .locks import LOCKS, cpu_relax
from .zipf import object_sequence

MODES = ("trust", "async", "mutex", "spin", "mcs")
TRUST_MODES = ("trust", "async")
WARMUP_FRACTION = 0.05


class UsageError(ValueError):
    """Inconsistent workload configuration."""


@dataclass
class WorkloadConfig:
    threads: int = 1
    objects: int = 1
    distribution: str = "uniform"
    alpha: float = 1.0
    ops_per_thread: int = 100_000
    write_ratio: float = 0.0
    mode: str = "trust"
    trustees: str = "shared"
    seed: int = 0
    fibers_per_thread: int = 16
    inflight_cap: int = 64

    def __post_init__(self):
        if self.threads < 1:
            raise UsageError("threads must be >= 1")
        if self.objects < 1:
            raise UsageError("objects must be >= 1")
        if self.ops_per_thread < 1:
            raise UsageError("ops_per_thread must be >= 1")
        if not self.alpha > 0:
            raise UsageError("alpha must be positive")
        if self.distribution not in ("uniform", "zipf"):
            raise UsageError(f"unknown distribution {self.distribution!r}")
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if not 0.0 <= self.write_ratio <= 1.0:
            raise UsageError("write_ratio must be within [0, 1]")
        n = self.dedicated
        if n and self.mode not in TRUST_MODES:
            raise UsageError(f"dedicated trustees make no sense with lock mode {self.mode!r}")
        if self.fibers_per_thread < 1 or self.inflight_cap < 1:
            raise UsageError("fibers_per_thread and inflight_cap must be >= 1")

    @property
    def dedicated(self) -> int:
        """Number of dedicated trustee threads (0 for a shared layout)."""
        t = self.trustees
        if t == "shared":
            return 0
        if t.startswith("dedicated:"):
            try:
                n = int(t.split(":", 1)[1])
            except ValueError:
                n = -1
            if n < 1:
                raise UsageError(f"bad trustee layout {t!r}")
            return n
        raise UsageError(f"bad trustee layout {t!r}; use shared or dedicated:N")

    def runtime_config(self) -> RuntimeConfig:
        d = self.dedicated
        return RuntimeConfig(worker_threads=self.threads + d, dedicated_trustees=d)

    def sequences(self) -> list[np.ndarray]:
        return [
            object_sequence(self.objects, self.ops_per_thread, self.distribution, self.alpha, self.seed, t)
            for t in range(self.threads)
        ]


@dataclass
class BenchStats:
    mode: str = ""
    throughput: float = 0.0  # operations per second, warm-up excluded
    mean_latency: float = float("nan")  # seconds
    p999_latency: float = float("nan")
    per_thread: list[int] = field(default_factory=list)
    total_ops: int = 0
    elapsed: float = 0.0
    sum_ok: bool = True
    offered_load: float = 0.0
    saturated: bool = False
    counters: dict[str, int] = field(default_factory=dict)
    config: WorkloadConfig | None = None

    @property
    def empty(self) -> bool:
        return self.total_ops == 0

    def row(self) -> dict[str, Any]:
        out: dict[str, Any] = dataclasses.asdict(self.config) if self.config else {}
        out.update(
            offered_load=self.offered_load,
            throughput=self.throughput,
            mean_latency=self.mean_latency,
            p999_latency=self.p999_latency,
            total_ops=self.total_ops,
            elapsed=self.elapsed,
            sum_ok=self.sum_ok,
            saturated=self.saturated,
        )
        return out


class _ThreadRecord:
    """Timing of one client thread; only ever touched by that thread."""

    __slots__ = ("done", "warm_at", "t_warm", "t_end", "lat")

    def __init__(self, n: int, latencies: bool = False):
        self.done = 0
        self.warm_at = int(n * WARMUP_FRACTION)
        self.t_warm = 0.0
        self.t_end = 0.0
        self.lat = np.zeros(n) if latencies else None

    def tick(self) -> None:
        self.done += 1
        if self.done == self.warm_at:
            self.t_warm = time.perf_counter()


def _window_throughput(records: list[_ThreadRecord], t0: float) -> tuple[float, float]:
    """(ops/s over the post-warm-up window, total elapsed)."""
    end = max(r.t_end for r in records)
    start = min((r.t_warm if r.warm_at else t0) for r in records)
    measured = sum(r.done - r.warm_at for r in records)
    window = end - start
    return (measured / window if window > 0 else float("inf")), end - t0


def _pace(target: float) -> None:
    """Wait for ``target`` on a plain thread."""
    while True:
        left = target - time.perf_counter()
        if left <= 0:
            return
        if left > 3e-4:
            time.sleep(left - 2e-4)
        else:
            os.sched_yield()


# -- delegated bodies ----------------------------------------------------------


def _incr(c: Ref) -> None:
    cpu_relax()
    c.value += 1


def _read(c: Ref) -> int:
    return c.value


# -- trust modes ----------------------------------------------------------------


def _entrust_counters(rt: Runtime, n: int) -> list:
    pool = rt.trustee_pool()
    trusts: list = [None] * n
    for k, t in enumerate(pool):
        idx = range(k, n, len(pool))
        for i, tr in zip(idx, rt.entrust_many([0] * len(idx), t)):
            trusts[i] = tr
    return trusts


def _audit_counters(rt: Runtime, trusts: list) -> np.ndarray:
    """Read every counter straight from its trustee after the run is quiet."""
    snaps = [rt.call_on(t, lambda w: {p: c.ref.value for p, c in w.props.items()}).result() for t in range(rt.size)]
    return np.array([snaps[tr.trustee][tr.prop] for tr in trusts], dtype=np.int64)


def _sync_driver(trusts: list, seq: list[int], fibers: int, rec: _ThreadRecord, t0: float) -> None:
    while time.perf_counter() < t0:
        yield_now()

    def worker(part: list[int]) -> None:
        for i in part:
            trusts[i].apply(_incr)
            rec.tick()

    hs = [spawn(worker, seq[f::fibers]) for f in range(fibers)]
    for h in hs:
        h.join()
    rec.t_end = time.perf_counter()


def _async_driver(trusts: list, seq: list[int], cap: int, rec: _ThreadRecord, t0: float) -> None:
    while time.perf_counter() < t0:
        yield_now()
    tick = rec.tick
    issued = 0

    def then(_):
        tick()

    for i in seq:
        trusts[i].apply_then(_incr, then)
        issued += 1
        while issued - rec.done >= cap:
            yield_now()
    while rec.done < issued:
        yield_now()
    rec.t_end = time.perf_counter()


def _run_trust(cfg: WorkloadConfig, seqs: list[np.ndarray]) -> tuple[BenchStats, np.ndarray]:
    with Runtime(cfg.runtime_config()) as rt:
        trusts = _entrust_counters(rt, cfg.objects)
        clients = rt.client_threads()
        recs = [_ThreadRecord(cfg.ops_per_thread) for _ in clients]
        t0 = time.perf_counter() + 0.02
        handles = []
        for k, th in enumerate(clients):
            seq = seqs[k].tolist()
            if cfg.mode == "trust":
                handles.append(rt.spawn(_sync_driver, trusts, seq, cfg.fibers_per_thread, recs[k], t0, thread=th))
            else:
                handles.append(rt.spawn(_async_driver, trusts, seq, cfg.inflight_cap, recs[k], t0, thread=th))
        for h in handles:
            h.join()
        rt.wait_idle()
        finals = _audit_counters(rt, trusts)
        counters = rt.counters()
    tput, elapsed = _window_throughput(recs, t0)
    stats = BenchStats(
        mode=cfg.mode,
        throughput=tput,
        per_thread=[r.done for r in recs],
        total_ops=sum(r.done for r in recs),
        elapsed=elapsed,
        counters=counters,
    )
    return stats, finals


# -- lock modes -----------------------------------------------------------------


def _run_locks(cfg: WorkloadConfig, seqs: list[np.ndarray]) -> tuple[BenchStats, np.ndarray]:
    lock_cls = LOCKS[cfg.mode]
    locks = [lock_cls() for _ in range(cfg.objects)]
    counts = [0] * cfg.objects
    recs = [_ThreadRecord(cfg.ops_per_thread) for _ in range(cfg.threads)]
    barrier = threading.Barrier(cfg.threads + 1)
    start = [0.0]

    def body(k: int, seq: list[int]) -> None:
        rec = recs[k]
        barrier.wait()
        for i in seq:
            lk = locks[i]
            lk.acquire()
            cpu_relax()
            counts[i] += 1
            lk.release()
            rec.tick()
        rec.t_end = time.perf_counter()

    threads = [threading.Thread(target=body, args=(k, s.tolist())) for k, s in enumerate(seqs)]
    for th in threads:
        th.start()
    start[0] = time.perf_counter()
    barrier.wait()
    for th in threads:
        th.join()
    tput, elapsed = _window_throughput(recs, start[0])
    stats = BenchStats(
        mode=cfg.mode,
        throughput=tput,
        per_thread=[r.done for r in recs],
        total_ops=sum(r.done for r in recs),
        elapsed=elapsed,
    )
    return stats, np.asarray(counts, dtype=np.int64)


def issue_histogram(cfg: WorkloadConfig, seqs: list[np.ndarray] | None = None) -> np.ndarray:
    """How often each object is incremented, computed from the sequences alone."""
    seqs = cfg.sequences() if seqs is None else seqs
    return np.bincount(np.concatenate(seqs), minlength=cfg.objects).astype(np.int64)


def run_fetch_add(cfg: WorkloadConfig) -> BenchStats:
    """Run the fetch-and-add benchmark and check every counter exactly."""
    seqs = cfg.sequences()
    runner = _run_trust if cfg.mode in TRUST_MODES else _run_locks
    stats, finals = runner(cfg, seqs)
    expected = issue_histogram(cfg, seqs)
    stats.sum_ok = bool(
        np.array_equal(finals, expected) and stats.total_ops == cfg.threads * cfg.ops_per_thread
    )
    stats.config = cfg
    return stats


# -- latency --------------------------------------------------------------------


def _latency_summary(recs: list[_ThreadRecord]) -> tuple[float, float]:
    lat = np.concatenate([r.lat[r.warm_at : r.done] for r in recs])
    if lat.size == 0:
        return float("nan"), float("nan")
    return float(lat.mean()), float(np.percentile(lat, 99.9))


def _paced_async(trusts: list, seq: list[int], rate: float, cap: int, rec: _ThreadRecord, t0: float) -> None:
    lat = rec.lat
    now = time.perf_counter
    issued = 0

    def then(k: int, target: float, _v) -> None:
        lat[k] = now() - target
        rec.tick()

    for k, i in enumerate(seq):
        target = t0 + k / rate
        while now() < target or issued - rec.done >= cap:
            yield_now()
        trusts[i].apply_then(_incr, functools.partial(then, k, target))
        issued += 1
    while rec.done < issued:
        yield_now()
    rec.t_end = now()


def _paced_sync(trusts: list, seq: list[int], rate: float, fibers: int, rec: _ThreadRecord, t0: float) -> None:
    lat = rec.lat
    now = time.perf_counter

    def worker(f: int) -> None:
        for k in range(f, len(seq), fibers):
            target = t0 + k / rate
            while now() < target:
                yield_now()
            trusts[seq[k]].apply(_incr)
            lat[rec.done] = now() - target
            rec.tick()

    hs = [spawn(worker, f) for f in range(fibers)]
    for h in hs:
        h.join()
    rec.t_end = now()


def run_latency(cfg: WorkloadConfig, offered_load: float) -> BenchStats:
    """Open-loop run at ``offered_load`` total operations per second.

    Delegation latency runs from the scheduled issue time to the moment
    the result is back on the client; lock latency from the start of the
    acquire to the release. A load of 0 issues nothing and returns empty
    stats.
    """
    if offered_load < 0:
        raise UsageError("offered_load must be >= 0")
    if offered_load == 0:
        return BenchStats(mode=cfg.mode, per_thread=[0] * cfg.threads, config=cfg)
    seqs = cfg.sequences()
    rate = offered_load / cfg.threads
    recs = [_ThreadRecord(cfg.ops_per_thread, latencies=True) for _ in range(cfg.threads)]
    counters: dict[str, int] = {}
    if cfg.mode in TRUST_MODES:
        with Runtime(cfg.runtime_config()) as rt:
            trusts = _entrust_counters(rt, cfg.objects)
            t0 = time.perf_counter() + 0.02
            handles = []
            for k, th in enumerate(rt.client_threads()):
                seq = seqs[k].tolist()
                if cfg.mode == "async":
                    args = (_paced_async, trusts, seq, rate, cfg.inflight_cap, recs[k], t0)
                else:
                    args = (_paced_sync, trusts, seq, rate, cfg.fibers_per_thread, recs[k], t0)
                handles.append(rt.spawn(*args, thread=th))
            for h in handles:
                h.join()
            rt.wait_idle()
            finals = _audit_counters(rt, trusts)
            counters = rt.counters()
    else:
        lock_cls = LOCKS[cfg.mode]
        locks = [lock_cls() for _ in range(cfg.objects)]
        counts = [0] * cfg.objects
        barrier = threading.Barrier(cfg.threads)
        t0 = time.perf_counter() + 0.05

        def body(k: int, seq: list[int]) -> None:
            rec = recs[k]
            lat = rec.lat
            now = time.perf_counter
            barrier.wait()
            for j, i in enumerate(seq):
                _pace(t0 + j / rate)
                s = now()
                lk = locks[i]
                lk.acquire()
                cpu_relax()
                counts[i] += 1
                lk.release()
                lat[j] = now() - s
                rec.tick()
            rec.t_end = now()

        threads = [threading.Thread(target=body, args=(k, s.tolist())) for k, s in enumerate(seqs)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        finals = np.asarray(counts, dtype=np.int64)
    tput, elapsed = _window_throughput(recs, t0)
    mean, p999 = _latency_summary(recs)
    total = sum(r.done for r in recs)
    return BenchStats(
        mode=cfg.mode,
        throughput=tput,
        mean_latency=mean,
        p999_latency=p999,
        per_thread=[r.done for r in recs],
        total_ops=total,
        elapsed=elapsed,
        sum_ok=bool(np.array_equal(finals, issue_histogram(cfg, seqs)) and total == cfg.threads * cfg.ops_per_thread),
        offered_load=offered_load,
        saturated=tput < 0.9 * offered_load,
        counters=counters,
        config=cfg,
    )


# -- output ---------------------------------------------------------------------

CSV_FIELDS = [f.name for f in dataclasses.fields(WorkloadConfig)] + [
    "offered_load",
    "throughput",
    "mean_latency",
    "p999_latency",
    "total_ops",
    "elapsed",
    "sum_ok",
    "saturated",
]


def emit_csv(stats: BenchStats, path: str | os.PathLike) -> None:
    """Append one row; the header is written only when the file is new or empty."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="ignore")
        if fresh:
            w.writeheader()
        w.writerow(stats.row())
