"""TCP key-value server, in a delegation flavour and a lock flavour.

In ``trust`` mode the table is split into shards, each entrusted as one
dict to a dedicated trustee thread. Socket workers are fibers on the
remaining threads; they parse request batches and issue one
``apply_with_then`` per request, so a worker never waits for a trustee
and writes each response when its callback fires.

In ``locks`` mode the same protocol is served by plain threads that look
up a lock-protected shard inline.
"""

from __future__ import annotations

import errno
import functools
import logging
import selectors
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass

from ..fibers import yield_now
from ..runtime import Runtime, RuntimeConfig
from ..trust import Ref
from .protocol import GET, MISS, OK, ProtocolError, RequestParser, encode_response
from .shards import ShardMap

log = logging.getLogger(__name__)

RECV_SIZE = 1 << 16
LOCK_SHARDS = 512


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 0
    workers: int = 1
    trustees: int = 1
    shards: int | None = None  # default: trustees (trust) or 512 (locks)
    mode: str = "trust"

    def __post_init__(self):
        if self.mode not in ("trust", "locks"):
            raise ValueError(f"unknown server mode {self.mode!r}")
        if self.workers < 1 or self.trustees < 1:
            raise ValueError("workers and trustees must be >= 1")
        if self.shards is None:
            self.shards = self.trustees if self.mode == "trust" else LOCK_SHARDS
        if self.shards < 1:
            raise ValueError("shards must be >= 1")


# -- delegated bodies --------------------------------------------------------


def table_get(table: Ref, key):
    return table.value.get(key)


def table_put(table: Ref, kv) -> None:
    table.value[kv[0]] = kv[1]


class _Conn:
    __slots__ = ("sock", "parser", "out", "closed", "pending")

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.parser = RequestParser()
        self.out = bytearray()
        self.closed = False
        self.pending = 0


def _flush(conn: _Conn) -> bool:
    """Send what the socket takes; False when the peer is gone."""
    out = conn.out
    while out:
        try:
            n = conn.sock.send(out)
        except (BlockingIOError, InterruptedError):
            return True
        except OSError:
            return False
        del out[:n]
    return True


def _recv(conn: _Conn) -> bytes | None:
    """Bytes read, b"" when nothing is available, None on EOF or error."""
    try:
        data = conn.sock.recv(RECV_SIZE)
    except (BlockingIOError, InterruptedError):
        return b""
    except OSError:
        return None
    return data or None


class KVServer:
    """Start with :meth:`start`, stop with :meth:`stop` (or use ``with``)."""

    def __init__(self, config: ServerConfig | None = None, **kw):
        self.config = config if config is not None else ServerConfig(**kw)
        cfg = self.config
        self.shard_map = ShardMap(cfg.shards, cfg.trustees if cfg.mode == "trust" else 1)
        self.address: tuple[str, int] | None = None
        self.stopping = False
        self.runtime: Runtime | None = None
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._threads: list[threading.Thread] = []
        self._handles = []
        self._new_conns: list[deque] = [deque() for _ in range(cfg.workers)]
        self.protocol_errors = 0
        self.requests = 0

    # -- lifecycle ------------------------------------------------------
    def start(self) -> tuple[str, int]:
        cfg = self.config
        ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        ls.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        ls.bind((cfg.host, cfg.port))
        ls.listen(128)
        ls.settimeout(0.1)
        self._listener = ls
        self.address = ls.getsockname()[:2]
        if cfg.mode == "trust":
            self._start_trust()
        else:
            self._start_locks()
        self._accept_thread = threading.Thread(target=self._accept_loop, name="kv-accept", daemon=True)
        self._accept_thread.start()
        return self.address

    def _accept_loop(self) -> None:
        nxt = 0
        while not self.stopping:
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                if self.stopping:
                    return
                time.sleep(0.01)
                continue
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.setblocking(False)
            # a connection belongs to one worker for its whole life
            self._new_conns[nxt % self.config.workers].append(sock)
            nxt += 1

    def stop(self) -> None:
        if self.stopping:
            return
        self.stopping = True
        if self._listener is not None:
            self._listener.close()
        if self._accept_thread is not None:
            self._accept_thread.join()
        for h in self._handles:
            h.join(10)
        for th in self._threads:
            th.join(10)
        if self.runtime is not None:
            self.runtime.shutdown()

    def serve_forever(self) -> None:
        try:
            while not self.stopping:
                time.sleep(0.2)
        finally:
            self.stop()

    def __enter__(self) -> KVServer:
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- trust mode -----------------------------------------------------
    def _start_trust(self) -> None:
        cfg = self.config
        rt = Runtime(RuntimeConfig(worker_threads=cfg.trustees + cfg.workers, dedicated_trustees=cfg.trustees))
        rt.start()
        self.runtime = rt
        shards: list = [None] * cfg.shards
        for t in range(cfg.trustees):
            mine = [s for s in range(cfg.shards) if self.shard_map.trustee_of(s) == t]
            for s, tr in zip(mine, rt.entrust_many([{} for _ in mine], t)):
                shards[s] = tr
        self.shards = shards
        for w, th in enumerate(rt.client_threads()):
            self._handles.append(rt.spawn(self._trust_worker, w, thread=th))

    def _trust_worker(self, w: int) -> None:
        sel = selectors.DefaultSelector()
        inbox = self._new_conns[w]
        shards = self.shards
        shard_of = self.shard_map.shard_of
        dirty: set[_Conn] = set()
        state = [0]  # requests in flight from this worker

        def answered(conn: _Conn, rid: int, value) -> None:
            state[0] -= 1
            conn.pending -= 1
            if conn.closed:
                return
            if value is None:
                conn.out += encode_response(rid, MISS)
            else:
                conn.out += encode_response(rid, OK, value)
            dirty.add(conn)

        def stored(conn: _Conn, rid: int, _value) -> None:
            state[0] -= 1
            conn.pending -= 1
            if not conn.closed:
                conn.out += encode_response(rid, OK)
                dirty.add(conn)

        def failed(conn: _Conn, _exc) -> None:
            state[0] -= 1
            conn.pending -= 1
            log.error("table operation failed: %r", _exc)
            self._close(sel, conn)

        try:
            while not self.stopping:
                while inbox:
                    conn = _Conn(inbox.popleft())
                    sel.register(conn.sock, selectors.EVENT_READ, conn)
                timeout = 0 if (state[0] or dirty) else 0.001
                for key, _ in sel.select(timeout):
                    conn = key.data
                    data = _recv(conn)
                    if data is None:
                        self._close(sel, conn)
                        continue
                    try:
                        reqs = conn.parser.feed(data)
                    except ProtocolError as exc:
                        self.protocol_errors += 1
                        log.warning("closing connection: %s", exc)
                        self._close(sel, conn)
                        continue
                    on_err = functools.partial(failed, conn)
                    for rid, op, k, v in reqs:
                        tr = shards[shard_of(k)]
                        if op == GET:
                            tr.apply_with_then(table_get, k, functools.partial(answered, conn, rid), on_err)
                        else:
                            tr.apply_with_then(table_put, (k, v), functools.partial(stored, conn, rid), on_err)
                    n = len(reqs)
                    state[0] += n
                    conn.pending += n
                    self.requests += n
                for conn in list(dirty):
                    if conn.closed or not _flush(conn):
                        self._close(sel, conn)
                    if not conn.out or conn.closed:
                        dirty.discard(conn)
                yield_now()
            while state[0]:
                yield_now()
        finally:
            for key in list(sel.get_map().values()):
                self._close(sel, key.data)
            sel.close()

    def _close(self, sel: selectors.BaseSelector, conn: _Conn) -> None:
        if conn.closed:
            return
        conn.closed = True
        try:
            sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        conn.sock.close()

    # -- lock mode ------------------------------------------------------
    def _start_locks(self) -> None:
        cfg = self.config
        self.tables = [{} for _ in range(cfg.shards)]
        self.locks = [threading.Lock() for _ in range(cfg.shards)]
        for w in range(cfg.workers):
            th = threading.Thread(target=self._lock_worker, args=(w,), name=f"kv-worker-{w}", daemon=True)
            th.start()
            self._threads.append(th)

    def _lock_worker(self, w: int) -> None:
        sel = selectors.DefaultSelector()
        inbox = self._new_conns[w]
        tables, locks = self.tables, self.locks
        shard_of = self.shard_map.shard_of
        try:
            while not self.stopping:
                while inbox:
                    conn = _Conn(inbox.popleft())
                    sel.register(conn.sock, selectors.EVENT_READ, conn)
                for key, _ in sel.select(0.01):
                    conn = key.data
                    data = _recv(conn)
                    if data is None:
                        self._close(sel, conn)
                        continue
                    try:
                        reqs = conn.parser.feed(data)
                    except ProtocolError as exc:
                        self.protocol_errors += 1
                        log.warning("closing connection: %s", exc)
                        self._close(sel, conn)
                        continue
                    out = conn.out
                    for rid, op, k, v in reqs:
                        s = shard_of(k)
                        if op == GET:
                            with locks[s]:
                                val = tables[s].get(k)
                            out += encode_response(rid, MISS) if val is None else encode_response(rid, OK, val)
                        else:
                            with locks[s]:
                                tables[s][k] = v
                            out += encode_response(rid, OK)
                    self.requests += len(reqs)
                    if not _flush(conn):
                        self._close(sel, conn)
                        continue
                    while conn.out and not self.stopping:
                        # slow reader: wait for buffer space rather than spin
                        try:
                            select_w = selectors.DefaultSelector()
                            select_w.register(conn.sock, selectors.EVENT_WRITE)
                            select_w.select(0.05)
                            select_w.close()
                        except OSError as exc:
                            if exc.errno != errno.EBADF:
                                raise
                        if not _flush(conn):
                            self._close(sel, conn)
                            break
        finally:
            for key in list(sel.get_map().values()):
                self._close(sel, key.data)
            sel.close()


def serve(config: ServerConfig) -> None:
    """Run a server until interrupted."""
    srv = KVServer(config)
    host, port = srv.start()
    print(f"kv {config.mode} server listening on {host}:{port}", flush=True)
    srv.serve_forever()
