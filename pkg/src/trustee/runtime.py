"""Thread topology, per-thread delegation state and lifecycle.

Every runtime thread runs a :class:`ThreadScheduler` whose service fiber
calls :meth:`Worker.service_pass`. A pass does three things in order:

1. serves every inbound pair whose request flag differs from its response
   flag (the thread acting as trustee),
2. collects finished batches on outbound pairs and hands each result to
   its waiter: a suspended fiber, a ``then`` callback, or nobody,
3. flushes the per-trustee pending queues into any free request slot.

Besides the channels there is a small control inbox per thread used only
for lifecycle traffic from outside the runtime: spawning fibers, waking a
fiber that joined another thread's fiber, drops of handles that were
garbage-collected off-runtime, and shutdown steps.
"""

from __future__ import annotations

import itertools
import logging
import marshal
import os
import pickle
import threading
import time
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Any, Callable

from . import _local
from .channel import (
    KIND_APPLY,
    KIND_LAUNCH,
    KIND_SYSTEM,
    RESP_HEADER,
    SHAPE_BOOL,
    SHAPE_DISCARD,
    SHAPE_F64,
    SHAPE_I64,
    SHAPE_NONE,
    ChannelMatrix,
    Failure,
    Task,
)
from .closures import REGISTRY, deserialize_arg, serialize_arg
from .errors import (
    DelegatedContextViolation,
    RuntimeStateError,
    SerializationError,
    ShutdownError,
    TrustError,
)
from .fibers import DEFAULT_POOL_SIZE, DEFAULT_STACK_SIZE, ThreadScheduler, WakeToken
from .trust import Latch, PropertyCell, JoinHandle, Trust, TrusteeRef

log = logging.getLogger(__name__)

_NOARG = object()
_I64_MIN = -(1 << 63)
_I64_MAX = (1 << 63) - 1
ENTRIES = REGISTRY.entries


@dataclass
class RuntimeConfig:
    """Shape of a runtime.

    The first ``dedicated_trustees`` threads only serve delegation requests
    and never run client fibers.
    """

    worker_threads: int = 1
    dedicated_trustees: int = 0
    pinning: dict[int, int] | None = None
    stack_size: int = DEFAULT_STACK_SIZE
    fiber_pool: int = DEFAULT_POOL_SIZE
    high_water: int = 4096
    debug_channels: bool = False
    drain_timeout: float = 30.0

    def __post_init__(self):
        if self.worker_threads < 1:
            raise ValueError("worker_threads must be >= 1")
        if self.dedicated_trustees and not 0 <= self.dedicated_trustees < self.worker_threads:
            raise ValueError("dedicated_trustees must be smaller than worker_threads")
        if self.high_water < 1:
            raise ValueError("high_water must be >= 1")

    @classmethod
    def from_env(cls, environ: dict | None = None, **overrides) -> RuntimeConfig:
        """Read ``TRUSTEE_*`` environment variables; keyword overrides win."""
        env = os.environ if environ is None else environ
        names = {
            "worker_threads": "TRUSTEE_THREADS",
            "dedicated_trustees": "TRUSTEE_DEDICATED",
            "stack_size": "TRUSTEE_STACK_SIZE",
            "fiber_pool": "TRUSTEE_FIBER_POOL",
            "high_water": "TRUSTEE_HIGH_WATER",
        }
        kw: dict[str, Any] = {k: int(env[v]) for k, v in names.items() if v in env}
        kw.update(overrides)
        return cls(**kw)


class _Then:
    __slots__ = ("then", "on_error")

    def __init__(self, then, on_error):
        self.then = then
        self.on_error = on_error


class _LaunchAck:
    __slots__ = ("token",)

    def __init__(self, token: int):
        self.token = token


def _as_value(shape: int, value: Any) -> Any:
    """What the remote path would hand back for ``value``."""
    if shape == SHAPE_DISCARD:
        return None
    tp = type(value)
    if (
        (shape == SHAPE_I64 and tp is int and _I64_MIN <= value <= _I64_MAX)
        or (shape == SHAPE_NONE and value is None)
        or (shape == SHAPE_F64 and tp is float)
        or (shape == SHAPE_BOOL and tp is bool)
    ):
        return value
    try:
        return marshal.loads(marshal.dumps(value))
    except ValueError as exc:
        raise SerializationError(f"result of type {tp.__name__} cannot cross the channel: {exc}") from None


# -- system requests (run on the trustee with the worker as first argument) ---


def _sys_entrust(worker: Worker, prop: int, arg: bytes | None) -> int:
    value = worker.runtime._handoff.pop(deserialize_arg(arg))
    return worker.new_property(value)


def _sys_incref(worker: Worker, prop: int, arg: bytes | None) -> None:
    worker.props[prop].refcount += 1


def _sys_decref(worker: Worker, prop: int, arg: bytes | None) -> None:
    worker.decref(prop)


def _sys_complete(worker: Worker, prop: int, arg: bytes | None) -> None:
    token, ok, payload = deserialize_arg(arg)
    worker.resolve_token(token, ok, payload if ok else pickle.loads(payload))


SYS_ENTRUST = REGISTRY.register_system(_sys_entrust)
SYS_INCREF = REGISTRY.register_system(_sys_incref)
SYS_DECREF = REGISTRY.register_system(_sys_decref)
SYS_COMPLETE = REGISTRY.register_system(_sys_complete)


@dataclass
class Counters:
    issued: int = 0
    submitted: int = 0
    served: int = 0
    delivered: int = 0
    batches: int = 0
    local_applied: int = 0
    entrusted: int = 0
    destroyed: int = 0
    errors: int = 0
    max_pending: int = 0
    extra: dict = field(default_factory=dict)


class Worker:
    """Delegation state of one runtime thread (client and trustee roles)."""

    def __init__(self, runtime: Runtime, index: int):
        cfg = runtime.config
        n = cfg.worker_threads
        self.runtime = runtime
        self.index = index
        self.dedicated = index < cfg.dedicated_trustees
        self.high_water = cfg.high_water
        self.out_pairs = runtime.matrix.pairs[index]
        self.in_pairs = [runtime.matrix.pairs[c][index] for c in range(n) if c != index]
        # (request flag offset, response flag offset, pair) for the cheap ready scan
        self._in_flags = [(p.base, p.base + RESP_HEADER, p) for p in self.in_pairs]
        self._buf = runtime.matrix.buf
        self.pending_tasks: list[deque[Task]] = [deque() for _ in range(n)]
        self.pending_comps: list[deque] = [deque() for _ in range(n)]
        self.inflight: list[list | None] = [None] * n
        self.active: set[int] = set()
        self.props: dict[int, PropertyCell] = {}
        self._prop_ids = itertools.count(1)
        self.tokens: dict[int, Any] = {}
        self._token_ids = itertools.count(1)
        self.deferred: deque = deque()
        self.inbox: deque = deque()
        self.accepting_entrusts = True
        self.exit_requested = False
        self.quiet = True
        self.c = Counters()
        self.scheduler = ThreadScheduler(
            index,
            self.service_pass,
            self._should_exit,
            stack_size=cfg.stack_size,
            pool_size=cfg.fiber_pool,
            allow_app_fibers=not self.dedicated,
        )

    def __repr__(self) -> str:
        return f"<Worker {self.index}{' dedicated' if self.dedicated else ''}>"

    # -- service fiber ----------------------------------------------------
    def _should_exit(self) -> bool:
        return self.exit_requested

    def service_pass(self) -> bool:
        worked = False
        if self.inbox:
            self._drain_inbox()
            worked = True
        execute = self._execute
        served = 0
        buf = self._buf
        for req, resp, pair in self._in_flags:
            if buf[req] != buf[resp]:
                served += pair.poll_serve(execute)
        if served:
            self.c.served += served
            worked = True
        if self.deferred:
            self._run_deferred()
            worked = True
        if self.active:
            out_pairs = self.out_pairs
            inflight = self.inflight
            for t in tuple(self.active):
                pair = out_pairs[t]
                comps = inflight[t]
                if comps is not None:
                    values = pair.poll_responses()
                    if values is None:
                        continue
                    inflight[t] = None
                    self._deliver(comps, values)
                    worked = True
                tasks = self.pending_tasks[t]
                if tasks:
                    depth = len(tasks)
                    if depth > self.c.max_pending:
                        self.c.max_pending = depth
                    sent = pair.try_submit_batch(tasks)
                    comps_q = self.pending_comps[t]
                    batch = []
                    for _ in range(sent):
                        tasks.popleft()
                        batch.append(comps_q.popleft())
                    inflight[t] = batch
                    self.c.submitted += sent
                    self.c.batches += 1
                    worked = True
                elif inflight[t] is None:
                    self.active.discard(t)
        self.quiet = not (self.active or self.deferred or self.tokens or self.scheduler.live)
        return worked

    def _drain_inbox(self) -> None:
        inbox = self.inbox
        while inbox:
            msg = inbox.popleft()
            op = msg[0]
            if op == "spawn":
                _, fn, args, fut = msg
                if fut.set_running_or_notify_cancel():
                    try:
                        fiber = self.scheduler.spawn(fn, *args)
                    except BaseException as exc:
                        fut.set_exception(exc)
                    else:
                        fiber.on_done = _finisher(fut)
            elif op == "wake":
                msg[1].resume()
            elif op == "drop":
                _, trustee, prop = msg
                self._drop_ref(trustee, prop)
            elif op == "decref":
                self.decref(msg[1])
            elif op == "call":
                _, fn, fut = msg
                try:
                    fut.set_result(fn(self))
                except BaseException as exc:
                    fut.set_exception(exc)
            elif op == "exit":
                self.exit_requested = True

    def post(self, msg: tuple) -> None:
        self.inbox.append(msg)

    def _run_deferred(self) -> None:
        deferred = self.deferred
        svc = self.scheduler.service_fiber
        for _ in range(len(deferred)):
            fn, value = deferred.popleft()
            svc.depth += 1
            try:
                fn(value)
            except Exception:
                self.c.errors += 1
                log.exception("then-callback failed on thread %d", self.index)
            finally:
                svc.depth -= 1

    def _deliver(self, comps: list, values: list) -> None:
        self.c.delivered += len(values)
        for comp, value in zip(comps, values):
            failed = type(value) is Failure
            if comp is None:
                if failed:
                    self.c.errors += 1
                    log.error("delegated request from thread %d failed: %r", self.index, value.error)
                continue
            tp = type(comp)
            if tp is WakeToken:
                if failed:
                    comp.resume(None, value.error)
                else:
                    comp.resume(value)
            elif tp is _Then:
                self._run_then(comp, value.error if failed else value, failed)
            elif tp is _LaunchAck:
                if failed:
                    self.resolve_token(comp.token, False, value.error)

    def _run_then(self, comp: _Then, value: Any, failed: bool) -> None:
        fn = comp.on_error if failed else comp.then
        if fn is None:
            if failed:
                self.c.errors += 1
                log.error("delegated request from thread %d failed: %r", self.index, value)
            return
        svc = self.scheduler.service_fiber
        svc.depth += 1
        try:
            fn(value)
        except Exception:
            self.c.errors += 1
            log.exception("then-callback failed on thread %d", self.index)
        finally:
            svc.depth -= 1

    # -- trustee side -----------------------------------------------------
    def _execute(self, kind: int, code: int, prop: int, env: bytes, arg: bytes | None) -> Any:
        entry = ENTRIES[code]
        if kind == KIND_APPLY:
            cell = self.props.get(prop)
            if cell is None:
                raise TrustError(f"property {prop} does not exist on trustee {self.index}")
            if cell.busy:
                raise TrustError(f"re-entrant access to property {prop}")
            fn = entry.materialize(env) if env else entry.fn
            svc = self.scheduler.service_fiber
            svc.depth += 1
            cell.busy = True
            try:
                if arg is None:
                    return fn(cell.ref)
                return fn(cell.ref, marshal.loads(arg))
            finally:
                cell.busy = False
                svc.depth -= 1
                if cell.doomed:
                    self._destroy(prop, cell)
        if kind == KIND_SYSTEM:
            return entry.fn(self, prop, arg)
        if kind == KIND_LAUNCH:
            client, token = deserialize_arg(arg)
            self._start_launch(entry.materialize(env) if env else entry.fn, entry.shape, prop, client, token)
            return None
        raise TrustError(f"unknown request kind {kind}")

    def new_property(self, value: Any) -> int:
        prop = next(self._prop_ids)
        self.props[prop] = PropertyCell(value)
        self.c.entrusted += 1
        return prop

    def decref(self, prop: int) -> None:
        cell = self.props.get(prop)
        if cell is None:
            log.debug("decref of unknown property %d on thread %d", prop, self.index)
            return
        cell.refcount -= 1
        if cell.refcount <= 0:
            if cell.busy:
                cell.doomed = True
            else:
                self._destroy(prop, cell)

    def _destroy(self, prop: int, cell: PropertyCell) -> None:
        if self.props.pop(prop, None) is None:
            return
        self.c.destroyed += 1
        value = cell.ref.value
        cell.ref.value = None
        svc = self.scheduler.service_fiber
        svc.depth += 1
        try:
            del value  # destructor runs here, on the trustee thread
        finally:
            svc.depth -= 1

    def destroy_all(self) -> int:
        props = list(self.props.items())
        for prop, cell in props:
            self._destroy(prop, cell)
        return len(props)

    def _start_launch(self, fn: Callable, shape: int, prop: int, client: int, token: int) -> None:
        cell = self.props.get(prop)
        if cell is None:
            raise TrustError(f"property {prop} does not exist on trustee {self.index}")
        latch = cell.ref.value
        if not isinstance(latch, Latch):
            raise TypeError("launch() needs a Latch-wrapped property")
        self.scheduler.spawn(self._launch_body, fn, shape, latch, client, token, launch=True)

    def _launch_body(self, fn: Callable, shape: int, latch: Latch, client: int, token: int) -> None:
        latch.acquire()
        try:
            result = _as_value(shape, fn(latch))
            ok = True
        except Exception as exc:
            result, ok = exc, False
        finally:
            latch.release()
        if client == self.index:
            self.resolve_token(token, ok, result)
            return
        # second message of a launch: this trustee acts as client of the caller
        if ok:
            try:
                payload = marshal.dumps((token, True, result))
            except ValueError as exc:
                ok, result = False, SerializationError(str(exc))
        if not ok:
            try:
                err = pickle.dumps(result)
            except Exception:
                err = pickle.dumps(TrustError(f"{type(result).__name__}: {result}"))
            payload = marshal.dumps((token, False, err))
        self.enqueue(client, Task(SYS_COMPLETE.id, 0, KIND_SYSTEM, SHAPE_DISCARD, b"", payload), None)

    def resolve_token(self, token: int, ok: bool, value: Any) -> None:
        comp = self.tokens.pop(token, None)
        if comp is None:
            log.error("completion for unknown launch token %d on thread %d", token, self.index)
            return
        if type(comp) is WakeToken:
            if ok:
                comp.resume(value)
            else:
                comp.resume(None, value)
        else:
            self._run_then(comp, value, not ok)

    # -- client side ------------------------------------------------------
    def enqueue(self, trustee: int, task: Task, comp: Any) -> None:
        self.pending_tasks[trustee].append(task)
        self.pending_comps[trustee].append(comp)
        self.active.add(trustee)
        self.c.issued += 1

    def _blocking_allowed(self, what: str) -> None:
        cur = self.scheduler.current
        if cur.is_service or cur.depth:
            raise DelegatedContextViolation(
                f"blocking {what} in delegated context; use apply_then, or launch() for bodies that must block"
            )

    def _throttle(self, trustee: int) -> None:
        sched = self.scheduler
        cur = sched.current
        if cur.is_service or cur.depth:
            return
        q = self.pending_tasks[trustee]
        while len(q) >= self.high_water:
            sched.yield_now()

    def _apply_local(self, prop: int, body: Callable, shape: int, arg: Any) -> Any:
        cell = self.props.get(prop)
        if cell is None:
            raise TrustError(f"property {prop} does not exist on trustee {self.index}")
        if cell.busy:
            raise TrustError(f"re-entrant access to property {prop}")
        cur = self.scheduler.current
        cur.depth += 1
        cell.busy = True
        try:
            if arg is _NOARG:
                result = body(cell.ref)
            else:
                result = body(cell.ref, marshal.loads(serialize_arg(arg)))
        finally:
            cell.busy = False
            cur.depth -= 1
            if cell.doomed:
                self._destroy(prop, cell)
        self.c.local_applied += 1
        return _as_value(shape, result)

    def apply(self, trust: Trust, body: Callable, arg: Any = _NOARG) -> Any:
        entry, env = REGISTRY.lookup(body)
        t = trust.trustee
        if t == self.index:
            return self._apply_local(trust.prop, body, entry.shape, arg)
        self._blocking_allowed("apply to a remote trustee")
        argb = None if arg is _NOARG else serialize_arg(arg)
        task = Task(entry.id, trust.prop, KIND_APPLY, entry.shape, env, argb)
        if len(self.pending_tasks[t]) >= self.high_water:
            self._throttle(t)
        return self.scheduler.suspend(lambda tok: self.enqueue(t, task, tok))

    def apply_then(self, trust: Trust, body: Callable, then, on_error, arg: Any = _NOARG) -> None:
        entry, env = REGISTRY.lookup(body)
        t = trust.trustee
        if t == self.index:
            try:
                result = self._apply_local(trust.prop, body, entry.shape if then else SHAPE_DISCARD, arg)
            except Exception as exc:
                if on_error is not None:
                    self.deferred.append((on_error, exc))
                else:
                    self.c.errors += 1
                    log.error("local apply_then on thread %d failed: %r", self.index, exc)
                return
            if then is not None:
                self.deferred.append((then, result))
            return
        argb = None if arg is _NOARG else serialize_arg(arg)
        task = Task(entry.id, trust.prop, KIND_APPLY, entry.shape if then else SHAPE_DISCARD, env, argb)
        comp = _Then(then, on_error) if (then is not None or on_error is not None) else None
        if len(self.pending_tasks[t]) >= self.high_water:
            self._throttle(t)
        self.enqueue(t, task, comp)

    def launch(self, trust: Trust, body: Callable, then=None, on_error=None, blocking: bool = True) -> Any:
        entry, env = REGISTRY.lookup(body)
        if blocking:
            self._blocking_allowed("launch")
        token = next(self._token_ids)
        t = trust.trustee

        def send(comp: Any) -> None:
            self.tokens[token] = comp
            if t == self.index:
                self._start_launch(body, entry.shape, trust.prop, self.index, token)
            else:
                arg = marshal.dumps((self.index, token))
                self.enqueue(t, Task(entry.id, trust.prop, KIND_LAUNCH, SHAPE_DISCARD, env, arg), _LaunchAck(token))

        if blocking:
            return self.scheduler.suspend(send)
        send(_Then(then, on_error))
        return None

    def entrust(self, value: Any, trustee: int) -> Trust:
        if not self.accepting_entrusts:
            raise RuntimeStateError("the runtime is shutting down and accepts no new properties")
        n = self.runtime.config.worker_threads
        if not 0 <= trustee < n:
            raise IndexError(f"trustee {trustee} out of range 0..{n - 1}")
        if trustee == self.index:
            return Trust(self.runtime, trustee, self.new_property(value))
        self._blocking_allowed("entrust to a remote trustee")
        key = self.runtime._stash(value)
        task = Task(SYS_ENTRUST.id, 0, KIND_SYSTEM, SYS_ENTRUST.shape, b"", marshal.dumps(key))
        prop = self.scheduler.suspend(lambda tok: self.enqueue(trustee, task, tok))
        return Trust(self.runtime, trustee, prop)

    def clone(self, trust: Trust) -> Trust:
        t = trust.trustee
        if t == self.index:
            cell = self.props.get(trust.prop)
            if cell is None:
                raise TrustError(f"property {trust.prop} does not exist on trustee {t}")
            cell.refcount += 1
        else:
            # round trip so the count is raised before the new handle can travel
            self._blocking_allowed("clone of a remote trust")
            task = Task(SYS_INCREF.id, trust.prop, KIND_SYSTEM, SYS_INCREF.shape)
            self.scheduler.suspend(lambda tok: self.enqueue(t, task, tok))
        return Trust(self.runtime, t, trust.prop)

    def drop(self, trust: Trust) -> None:
        trust._live = False
        self._drop_ref(trust.trustee, trust.prop)

    def _drop_ref(self, trustee: int, prop: int) -> None:
        if trustee == self.index:
            self.decref(prop)
        else:
            self.enqueue(trustee, Task(SYS_DECREF.id, prop, KIND_SYSTEM, SHAPE_DISCARD), None)


def _finisher(fut: Future) -> Callable:
    def done(fiber) -> None:
        if fiber.error is not None:
            fut.set_exception(fiber.error)
        else:
            fut.set_result(fiber.result)

    return done


class Runtime:
    """A set of OS threads that act as both delegation clients and trustees.

    Use as a context manager or call :meth:`start` and :meth:`shutdown`.
    Code that uses trusts must run in fibers on runtime threads; from
    outside, submit it with :meth:`run` or :meth:`spawn`.
    """

    def __init__(self, config: RuntimeConfig | None = None, **kw):
        self.config = config if config is not None else RuntimeConfig(**kw)
        self.state = "new"
        self.matrix: ChannelMatrix | None = None
        self.workers: list[Worker] = []
        self.threads: list[threading.Thread] = []
        self._handoff: dict[int, Any] = {}
        self._handoff_ids = itertools.count(1)
        self._placement = itertools.count()
        self._state_lock = threading.Lock()

    # -- lifecycle --------------------------------------------------------
    def start(self) -> Runtime:
        with self._state_lock:
            if self.state != "new":
                raise RuntimeStateError(f"runtime already {self.state}")
            self.state = "running"
        cfg = self.config
        self.matrix = ChannelMatrix(cfg.worker_threads, debug=cfg.debug_channels)
        self.workers = [Worker(self, i) for i in range(cfg.worker_threads)]
        started = []
        for w in self.workers:
            ready = threading.Event()
            th = threading.Thread(target=self._thread_main, args=(w, ready), name=f"trustee-{w.index}", daemon=True)
            th.start()
            started.append(ready)
            self.threads.append(th)
        for ev in started:
            ev.wait()
        return self

    def _thread_main(self, worker: Worker, ready: threading.Event) -> None:
        _local.tls.worker = worker
        pin = (self.config.pinning or {}).get(worker.index)
        if pin is not None and hasattr(os, "sched_setaffinity"):
            try:
                os.sched_setaffinity(0, {pin})
            except OSError as exc:  # best effort
                log.warning("pinning thread %d to core %d failed: %s", worker.index, pin, exc)
        worker.scheduler._bind()
        ready.set()
        try:
            worker.scheduler.run()
        finally:
            _local.tls.worker = None

    def __enter__(self) -> Runtime:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()

    def _require_running(self) -> None:
        if self.state != "running":
            raise RuntimeStateError(f"runtime is {self.state}")

    # -- placement --------------------------------------------------------
    @property
    def size(self) -> int:
        return self.config.worker_threads

    def trustee_at(self, i: int) -> TrusteeRef:
        if not 0 <= i < self.size:
            raise IndexError(f"trustee index {i} out of range 0..{self.size - 1}")
        return TrusteeRef(self, i)

    def trustee_pool(self) -> list[int]:
        """Threads that properties are placed on by default."""
        d = self.config.dedicated_trustees
        return list(range(d)) if d else list(range(self.size))

    def client_threads(self) -> list[int]:
        return list(range(self.config.dedicated_trustees, self.size))

    def placement(self, i: int) -> TrusteeRef:
        """Round-robin trustee for the ``i``-th property."""
        pool = self.trustee_pool()
        return TrusteeRef(self, pool[i % len(pool)])

    def next_trustee(self) -> TrusteeRef:
        return self.placement(next(self._placement))

    # -- submitting work --------------------------------------------------
    def spawn(self, fn: Callable, *args: Any, thread: int = 0) -> JoinHandle:
        """Start ``fn(*args)`` as a fiber on ``thread``."""
        self._require_running()
        if not 0 <= thread < self.size:
            raise IndexError(f"thread {thread} out of range")
        fut: Future = Future()
        w = self.workers[thread]
        if _local.worker_or_none() is w:
            fiber = w.scheduler.spawn(fn, *args)
            fut.set_running_or_notify_cancel()
            fiber.on_done = _finisher(fut)
        else:
            w.post(("spawn", fn, args, fut))
        return JoinHandle(self, fut)

    def run(self, fn: Callable, *args: Any, thread: int | None = None, timeout: float | None = None) -> Any:
        """Run ``fn(*args)`` in a fiber and wait for its result."""
        if thread is None:
            clients = self.client_threads()
            thread = clients[0]
        return self.spawn(fn, *args, thread=thread).join(timeout)

    def call_on(self, thread: int, fn: Callable[[Worker], Any]) -> Future:
        """Run ``fn(worker)`` in the service context of ``thread`` (control plane)."""
        fut: Future = Future()
        self.workers[thread].post(("call", fn, fut))
        return fut

    def entrust_many(self, values: list, trustee: int) -> list[Trust]:
        """Entrust many values to one trustee in one control step.

        Meant for setup code outside the runtime; fibers use
        :meth:`TrusteeRef.entrust`.
        """
        self._require_running()
        if not 0 <= trustee < self.size:
            raise IndexError(f"trustee {trustee} out of range 0..{self.size - 1}")
        here = _local.worker_or_none()
        if here is not None and here.runtime is self:
            if here.index != trustee:
                raise RuntimeStateError("entrust_many from a runtime thread only works for the local trustee")
            if not here.accepting_entrusts:
                raise RuntimeStateError("the runtime is shutting down")
            return [Trust(self, trustee, here.new_property(v)) for v in values]

        def make(w: Worker) -> list[Trust]:
            if not w.accepting_entrusts:
                raise RuntimeStateError("the runtime is shutting down")
            return [Trust(self, w.index, w.new_property(v)) for v in values]

        return self.call_on(trustee, make).result()

    def entrust(self, value: Any, trustee: int = 0) -> Trust:
        return self.entrust_many([value], trustee)[0]

    def _stash(self, value: Any) -> int:
        key = next(self._handoff_ids)
        self._handoff[key] = value
        return key

    def _post_drop(self, trustee: int, prop: int) -> None:
        if self.state == "stopped" or not self.workers:
            return
        w = _local.worker_or_none()
        if w is not None and w.runtime is self:
            w.post(("drop", trustee, prop))
        else:
            self.workers[trustee].post(("decref", prop))

    def _post_decref(self, trustee: int, prop: int) -> None:
        if self.state == "stopped" or not self.workers:
            return
        self.workers[trustee].post(("decref", prop))

    # -- observation ------------------------------------------------------
    def counters(self) -> dict[str, int]:
        """Totals over all threads."""
        out: dict[str, int] = {}
        for w in self.workers:
            for k, v in vars(w.c).items():
                if k == "extra":
                    continue
                out[k] = max(out.get(k, 0), v) if k == "max_pending" else out.get(k, 0) + v
            s = w.scheduler
            out["service_passes"] = out.get("service_passes", 0) + s.service_passes
            out["context_switches"] = out.get("context_switches", 0) + s.context_switches
            out["fibers_spawned"] = out.get("fibers_spawned", 0) + s.spawned
            out["pending"] = out.get("pending", 0) + sum(len(q) for q in w.pending_tasks)
        return out

    def _snapshot(self) -> tuple:
        return tuple(
            (w.quiet, w.scheduler.live, len(w.inbox), w.c.issued, w.c.submitted, w.c.served, w.c.delivered)
            for w in self.workers
        )

    def _quiescent(self, deadline: float) -> bool:
        prev = None
        while time.monotonic() < deadline:
            snap = self._snapshot()
            idle = all(q and live == 0 and inbox == 0 for q, live, inbox, *_ in snap)
            sums = [sum(s[i] for s in snap) for i in (3, 4, 5, 6)]
            if idle and len(set(sums)) == 1 and snap == prev:
                return True
            prev = snap if idle else None
            time.sleep(0.001)
        return False

    def wait_idle(self, timeout: float = 10.0) -> bool:
        """Wait until no fiber runs and every issued request was answered."""
        return self._quiescent(time.monotonic() + timeout)

    def shutdown(self, timeout: float | None = None) -> None:
        """Drain, destroy remaining properties trustee by trustee, join threads.

        Idempotent. Raises :class:`ShutdownError` if fibers were still
        suspended when the drain timed out.
        """
        with self._state_lock:
            if self.state in ("stopped", "stopping"):
                return
            if self.state == "new":
                self.state = "stopped"
                return
            self.state = "stopping"
        if _local.worker_or_none() is not None and _local.tls.worker.runtime is self:
            raise RuntimeStateError("shutdown() must be called from outside the runtime threads")
        deadline = time.monotonic() + (self.config.drain_timeout if timeout is None else timeout)
        ok = self._quiescent(deadline)
        for w in self.workers:
            w.accepting_entrusts = False
        if ok:
            for w in self.workers:
                try:
                    self.call_on(w.index, Worker.destroy_all).result(max(deadline - time.monotonic(), 0.1))
                except Exception:
                    ok = False
                    break
                if not self._quiescent(deadline):
                    ok = False
                    break
        stuck = [(w.index, w.scheduler.live) for w in self.workers if w.scheduler.live]
        for w in self.workers:
            w.post(("exit",))
        for th in self.threads:
            th.join(5.0)
        self.state = "stopped"
        self._handoff.clear()
        if self.matrix is not None:
            self.matrix.close()
        if not ok:
            raise ShutdownError(f"drain timed out; live fibers per thread: {stuck}", stuck)


def start_runtime(config: RuntimeConfig | None = None, **kw) -> Runtime:
    return Runtime(config, **kw).start()
