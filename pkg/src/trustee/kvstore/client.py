"""Pipelined load generator with history capture and verification.

Each client thread owns one connection and keeps ``pipeline`` requests
outstanding. Every PUT writes a value unique to (thread, sequence number),
so a GET names exactly the write it observed; the captured per-key
histories are then checked for linearizability.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..bench.zipf import ZipfSampler
from .checker import Op, check_history
from .protocol import GET, MISS, OK, PUT, ProtocolError, ResponseParser, encode_request

KEY_SIZE = 8
VALUE_SIZE = 16
_VALUE = struct.Struct("<QQ")


def key_bytes(i: int) -> bytes:
    return i.to_bytes(KEY_SIZE, "little")


def value_bytes(writer: int, seq: int) -> bytes:
    """16-byte value unique to one write; writer 0 is the prefill."""
    return _VALUE.pack(writer, seq)


@dataclass
class ClientConfig:
    host: str = "127.0.0.1"
    port: int = 0
    threads: int = 1
    pipeline: int = 1
    keys: int = 1000
    distribution: str = "uniform"
    alpha: float = 1.0
    write_ratio: float = 0.05
    seconds: float = 1.0
    max_ops: int | None = None  # per thread; stops early when reached
    verify: bool = True
    prefill: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.threads < 1 or self.pipeline < 1 or self.keys < 1:
            raise ValueError("threads, pipeline and keys must be >= 1")
        if self.distribution not in ("uniform", "zipf"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if not 0.0 <= self.write_ratio <= 1.0:
            raise ValueError("write ratio must be within [0, 1]")


@dataclass
class KVStats:
    throughput: float = 0.0
    mean_latency: float = float("nan")
    p999_latency: float = float("nan")
    per_thread: list[int] = field(default_factory=list)
    total_ops: int = 0
    gets: int = 0
    puts: int = 0
    misses: int = 0
    elapsed: float = 0.0
    bijection_ok: bool = True
    errors: list[str] = field(default_factory=list)
    violations: dict = field(default_factory=dict)
    max_outstanding: int = 0
    verified: bool = False

    @property
    def ok(self) -> bool:
        return self.bijection_ok and not self.errors and not self.violations


class KeyStream:
    """Deterministic key indices (0-based) and write decisions for one thread."""

    def __init__(self, cfg: ClientConfig, stream: int, chunk: int = 4096):
        ss = np.random.SeedSequence([cfg.seed, stream])
        a, b = ss.spawn(2)
        self.rng = np.random.default_rng(a)
        self.zipf = ZipfSampler(cfg.keys, cfg.alpha, b) if cfg.distribution == "zipf" else None
        self.cfg = cfg
        self.chunk = chunk
        self._keys: list[int] = []
        self._writes: list[bool] = []
        self._i = 0

    def next(self) -> tuple[int, bool]:
        if self._i == len(self._keys):
            n = self.chunk
            if self.zipf is not None:
                self._keys = (self.zipf.draw(n) - 1).tolist()
            else:
                self._keys = self.rng.integers(0, self.cfg.keys, n).tolist()
            self._writes = (self.rng.random(n) < self.cfg.write_ratio).tolist()
            self._i = 0
        i = self._i
        self._i += 1
        return self._keys[i], self._writes[i]

    def take(self, n: int) -> np.ndarray:
        return np.fromiter((self.next()[0] for _ in range(n)), dtype=np.int64, count=n)


def _recv_into(sock: socket.socket, parser: ResponseParser):
    data = sock.recv(1 << 16)
    if not data:
        raise ConnectionError("server closed the connection")
    return parser.feed(data)


def prefill(cfg: ClientConfig, batch: int = 512) -> float:
    """PUT every key once with writer id 0; returns the completion time."""
    with socket.create_connection((cfg.host, cfg.port)) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        pending: set[int] = set()
        parser = ResponseParser(lambda rid: PUT if rid in pending else None)
        for lo in range(0, cfg.keys, batch):
            ids = range(lo, min(lo + batch, cfg.keys))
            pending.update(ids)
            sock.sendall(b"".join(encode_request(i, PUT, key_bytes(i), value_bytes(0, i)) for i in ids))
            while pending:
                for r in _recv_into(sock, parser):
                    if r.status != OK:
                        raise ProtocolError(f"prefill PUT {r.rid} failed")
                    pending.remove(r.rid)
    return time.perf_counter()


class _Worker:
    def __init__(self, cfg: ClientConfig, idx: int, deadline_box: list):
        self.cfg = cfg
        self.idx = idx
        self.deadline_box = deadline_box
        self.stream = KeyStream(cfg, idx)
        self.history: dict[int, list[Op]] = defaultdict(list)
        self.lat: list[float] = []
        self.done = 0
        self.gets = self.puts = self.misses = 0
        self.errors: list[str] = []
        self.max_outstanding = 0
        self.t_end = 0.0

    def run(self, barrier: threading.Barrier) -> None:
        try:
            self._run(barrier)
        except Exception as exc:  # recorded; the run as a whole fails
            self.errors.append(f"thread {self.idx}: {type(exc).__name__}: {exc}")
            self.t_end = time.perf_counter()

    def _run(self, barrier: threading.Barrier) -> None:
        cfg = self.cfg
        sock = socket.create_connection((cfg.host, cfg.port))
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        outstanding: dict[int, tuple[int, int, bytes | None, float]] = {}
        parser = ResponseParser(lambda rid: outstanding[rid][0] if rid in outstanding else None)
        now = time.perf_counter
        verify = cfg.verify
        history = self.history
        base = (self.idx + 1) << 40
        seq = 0
        max_ops = cfg.max_ops
        barrier.wait()
        deadline = self.deadline_box[0]
        try:
            while True:
                t = now()
                issuing = t < deadline and (max_ops is None or seq < max_ops)
                if issuing and len(outstanding) < cfg.pipeline:
                    # invocation is stamped before the request exists, which only widens its interval
                    frames = []
                    while len(outstanding) < cfg.pipeline and (max_ops is None or seq < max_ops):
                        k, w = self.stream.next()
                        rid = base | seq
                        kb = key_bytes(k)
                        if w:
                            val = value_bytes(self.idx + 1, seq)
                            frames.append(encode_request(rid, PUT, kb, val))
                            outstanding[rid] = (PUT, k, val, t)
                        else:
                            frames.append(encode_request(rid, GET, kb))
                            outstanding[rid] = (GET, k, None, t)
                        seq += 1
                    sock.sendall(b"".join(frames))
                    if len(outstanding) > self.max_outstanding:
                        self.max_outstanding = len(outstanding)
                if not outstanding:
                    break
                resps = _recv_into(sock, parser)
                t = now()
                for rid, status, value in resps:
                    op, k, val, t_inv = outstanding.pop(rid)
                    self.lat.append(t - t_inv)
                    self.done += 1
                    if op == PUT:
                        self.puts += 1
                        if status != OK:
                            self.errors.append(f"PUT {rid} answered with status {status}")
                        if verify:
                            history[k].append(Op("w", val, t_inv, t))
                    else:
                        self.gets += 1
                        if status == MISS:
                            self.misses += 1
                        if verify:
                            history[k].append(Op("r", value, t_inv, t))
        except ProtocolError as exc:
            self.errors.append(f"thread {self.idx}: {exc}")
        finally:
            self.t_end = now()
            if outstanding:
                self.errors.append(f"thread {self.idx}: {len(outstanding)} requests never answered")
            sock.close()


def load_client(cfg: ClientConfig) -> KVStats:
    """Drive the server for ``cfg.seconds`` and check what came back."""
    t_prefill = prefill(cfg) if cfg.prefill else None
    deadline_box = [0.0]
    workers = [_Worker(cfg, i, deadline_box) for i in range(cfg.threads)]

    barrier = threading.Barrier(cfg.threads + 1, action=lambda: deadline_box.__setitem__(0, time.perf_counter() + cfg.seconds))
    threads = [threading.Thread(target=w.run, args=(barrier,), name=f"kv-client-{w.idx}") for w in workers]
    for th in threads:
        th.start()
    barrier.wait()
    t0 = deadline_box[0] - cfg.seconds
    for th in threads:
        th.join()
    end = max(w.t_end for w in workers)
    stats = KVStats(
        per_thread=[w.done for w in workers],
        total_ops=sum(w.done for w in workers),
        gets=sum(w.gets for w in workers),
        puts=sum(w.puts for w in workers),
        misses=sum(w.misses for w in workers),
        elapsed=end - t0,
        errors=[e for w in workers for e in w.errors],
        max_outstanding=max(w.max_outstanding for w in workers),
    )
    stats.bijection_ok = not any("unknown request id" in e or "never answered" in e for e in stats.errors)
    stats.throughput = stats.total_ops / stats.elapsed if stats.elapsed > 0 else 0.0
    lat = np.fromiter((x for w in workers for x in w.lat), dtype=np.float64)
    if lat.size:
        stats.mean_latency = float(lat.mean())
        stats.p999_latency = float(np.percentile(lat, 99.9))
    if cfg.verify:
        history: dict[int, list[Op]] = defaultdict(list)
        for w in workers:
            for k, ops in w.history.items():
                history[k].extend(ops)
        if t_prefill is not None:
            # prefill writes finished before the run: model them as writes at the dawn of time
            for k in history:
                history[k].append(Op("w", value_bytes(0, k), float("-inf"), t_prefill))
        stats.violations = check_history(history)
        stats.verified = True
    return stats
