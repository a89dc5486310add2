"""Cooperative fibers and the per-thread FIFO scheduler.

Fibers are greenlets: each has its own stack slice, runs on the OS thread
that created it and never migrates. The scheduler keeps one FIFO ready
queue. The *service fiber* lives in that queue like any other fiber; when
it reaches the head the scheduler runs one service pass (serve inbound
requests, collect responses, flush outgoing requests) directly on the
thread's root context and re-queues it at the tail.

Delegated context is tracked per fiber with a depth counter. A fiber whose
depth is non-zero is running a delegated body and must not suspend or
yield; :func:`suspend_current` raises :class:`DelegatedContextViolation`
instead. Launch fibers start at depth zero, which is what makes them
allowed to block.
"""

from __future__ import annotations

import enum
import itertools
import logging
import os
import threading
import time
from collections import deque
from typing import Any, Callable

import greenlet

from .errors import DelegatedContextViolation

DEFAULT_STACK_SIZE = 64 * 1024
DEFAULT_POOL_SIZE = 64
# idle passes spent polling (with sched_yield) before napping between passes
IDLE_SPINS = 4000
IDLE_NAP = 0.0002

log = logging.getLogger(__name__)
_tls = threading.local()
_ids = itertools.count(1)


class FiberState(enum.Enum):
    READY = "ready"
    RUNNING = "running"
    SUSPENDED = "suspended"
    DONE = "done"


class Fiber:
    __slots__ = (
        "id",
        "entry",
        "args",
        "state",
        "result",
        "error",
        "depth",
        "is_launch",
        "is_service",
        "glet",
        "on_done",
        "_wake_value",
        "_wake_error",
    )

    def __init__(self, entry: Callable | None, args: tuple = (), *, is_launch: bool = False, is_service: bool = False):
        self.id = next(_ids)
        self.entry = entry
        self.args = args
        self.state = FiberState.READY
        self.result: Any = None
        self.error: BaseException | None = None
        self.depth = 0
        self.is_launch = is_launch
        self.is_service = is_service
        self.glet: greenlet.greenlet | None = None
        self.on_done: Callable[[Fiber], None] | None = None
        self._wake_value: Any = None
        self._wake_error: BaseException | None = None

    def __repr__(self) -> str:
        kind = "service" if self.is_service else "launch" if self.is_launch else "app"
        return f"<Fiber {self.id} {kind} {self.state.value}>"


class WakeToken:
    """Single-use handle that moves one suspended fiber back to the ready queue."""

    __slots__ = ("fiber", "scheduler", "used")

    def __init__(self, fiber: Fiber, scheduler: ThreadScheduler):
        self.fiber = fiber
        self.scheduler = scheduler
        self.used = False

    def resume(self, value: Any = None, error: BaseException | None = None) -> None:
        if self.used:
            raise RuntimeError(f"wake token for {self.fiber!r} already used")
        self.used = True
        fiber = self.fiber
        assert fiber.state is FiberState.SUSPENDED, fiber
        fiber._wake_value = value
        fiber._wake_error = error
        fiber.state = FiberState.READY
        self.scheduler.ready.append(fiber)


class ThreadScheduler:
    """FIFO scheduler for the fibers of one OS thread.

    ``service`` is called once per rotation of the ready queue and returns
    True when it did any work. ``should_exit`` is polled after each service
    pass; the loop ends once it returns True.
    """

    def __init__(
        self,
        index: int = 0,
        service: Callable[[], bool] | None = None,
        should_exit: Callable[[], bool] | None = None,
        *,
        stack_size: int = DEFAULT_STACK_SIZE,
        pool_size: int = DEFAULT_POOL_SIZE,
        allow_app_fibers: bool = True,
    ):
        self.index = index
        self.service = service
        self.should_exit = should_exit
        self.stack_size = stack_size
        self.pool_size = pool_size
        self.allow_app_fibers = allow_app_fibers
        self.ready: deque[Fiber] = deque()
        self.service_fiber = Fiber(None, is_service=True)
        self.service_fiber.state = FiberState.RUNNING
        self.current: Fiber = self.service_fiber
        self.root: greenlet.greenlet | None = None
        self.thread_ident: int | None = None
        self._pool: list[Fiber] = []
        self.live = 0  # app + launch fibers not yet Done
        self.suspended = 0
        # debug counters
        self.context_switches = 0
        self.service_passes = 0
        self.spawned = 0
        self.completed = 0
        self.idle_passes = 0

    # -- properties -------------------------------------------------------
    @property
    def delegated_depth(self) -> int:
        return self.current.depth

    @property
    def in_fiber(self) -> bool:
        """True when running on an app or launch fiber (not the service)."""
        return not self.current.is_service

    def _bind(self) -> None:
        if self.root is None:
            self.root = greenlet.getcurrent()
            self.thread_ident = threading.get_ident()
            _tls.scheduler = self
        elif self.thread_ident != threading.get_ident():
            raise RuntimeError("a scheduler is bound to one OS thread for its whole life")

    # -- fiber lifecycle --------------------------------------------------
    def spawn(self, entry: Callable, *args: Any, launch: bool = False) -> Fiber:
        """Create a fiber and queue it Ready at the tail."""
        self._bind()
        if not launch and not self.allow_app_fibers:
            raise ValueError(f"thread {self.index} is a dedicated trustee and runs no client fibers")
        if self._pool:
            fiber = self._pool.pop()
            fiber.id = next(_ids)
            fiber.entry = entry
            fiber.args = args
            fiber.result = fiber.error = None
            fiber.depth = 0
            fiber.is_launch = launch
            fiber.on_done = None
            fiber.state = FiberState.READY
        else:
            fiber = Fiber(entry, args, is_launch=launch)
            fiber.glet = greenlet.greenlet(self._make_loop(fiber), parent=self.root)
        self.live += 1
        self.spawned += 1
        self.ready.append(fiber)
        return fiber

    def _make_loop(self, fiber: Fiber) -> Callable[[], None]:
        def loop() -> None:
            while True:
                try:
                    fiber.result = fiber.entry(*fiber.args)
                except greenlet.GreenletExit:
                    raise
                except BaseException as exc:
                    fiber.error = exc
                fiber.state = FiberState.DONE
                fiber.entry = fiber.args = None
                self.live -= 1
                self.completed += 1
                done = fiber.on_done
                if done is not None:
                    fiber.on_done = None
                    done(fiber)
                elif fiber.error is not None:
                    log.error("fiber %d raised", fiber.id, exc_info=fiber.error)
                if len(self._pool) >= self.pool_size:
                    return
                self._pool.append(fiber)
                self.root.switch()

        return loop

    def yield_now(self) -> None:
        fiber = self.current
        if fiber.is_service:
            raise DelegatedContextViolation("yield_now called outside a fiber (service context)")
        if fiber.depth:
            raise DelegatedContextViolation("yield_now called in delegated context")
        fiber.state = FiberState.READY
        self.ready.append(fiber)
        self.root.switch()

    def suspend(self, on_suspend: Callable[[WakeToken], None] | None = None) -> Any:
        """Suspend the current fiber until its wake token is used.

        ``on_suspend`` receives the token before the switch. Returns the
        value passed to :meth:`WakeToken.resume` or raises its error.
        """
        fiber = self.current
        if fiber.is_service:
            raise DelegatedContextViolation("cannot suspend in delegated context (service fiber)")
        if fiber.depth:
            raise DelegatedContextViolation("cannot suspend in delegated context; use launch() for blocking bodies")
        token = WakeToken(fiber, self)
        fiber.state = FiberState.SUSPENDED
        self.suspended += 1
        if on_suspend is not None:
            try:
                on_suspend(token)
            except BaseException:
                fiber.state = FiberState.RUNNING
                self.suspended -= 1
                raise
        if not token.used:
            self.root.switch()
        else:
            # woken synchronously by on_suspend; leave the ready queue entry to the loop
            self.ready.remove(fiber)
        self.suspended -= 1
        fiber.state = FiberState.RUNNING
        err = fiber._wake_error
        value = fiber._wake_value
        fiber._wake_error = fiber._wake_value = None
        if err is not None:
            raise err
        return value

    # -- main loop --------------------------------------------------------
    def run(self) -> None:
        """Run fibers until ``should_exit`` says so."""
        self._bind()
        ready = self.ready
        service = self.service_fiber
        ready.append(service)
        idle = 0
        while True:
            fiber = ready.popleft()
            if fiber is service:
                self.current = service
                worked = self.service() if self.service is not None else False
                self.service_passes += 1
                if self.should_exit is not None and self.should_exit():
                    break
                ready.append(service)
                if worked:
                    idle = 0
                elif len(ready) > 1:
                    # fibers are runnable but the pass found nothing: let other
                    # threads (and the GIL) make progress before polling again
                    idle = 0
                    if self.service is not None:
                        os.sched_yield()
                else:
                    idle += 1
                    self.idle_passes += 1
                    if self.service is None:
                        break  # standalone use: nothing can wake the rest
                    if idle < IDLE_SPINS:
                        os.sched_yield()
                    else:
                        time.sleep(IDLE_NAP)
                continue
            self.current = fiber
            fiber.state = FiberState.RUNNING
            self.context_switches += 1
            fiber.glet.switch()
            self.current = service
        ready.clear()
        self.current = service

    def drain(self) -> None:
        """Run until no app or launch fiber is left (standalone use)."""
        self._bind()
        previous = self.should_exit
        self.should_exit = lambda: self.live == 0 or (previous is not None and previous())
        try:
            self.run()
        finally:
            self.should_exit = previous


def current_scheduler() -> ThreadScheduler:
    sched = getattr(_tls, "scheduler", None)
    if sched is None:
        raise RuntimeError("no fiber scheduler on this thread")
    return sched


def spawn_fiber(entry: Callable, *args: Any) -> Fiber:
    return current_scheduler().spawn(entry, *args)


def yield_now() -> None:
    current_scheduler().yield_now()


def suspend_current(on_suspend: Callable[[WakeToken], None] | None = None) -> Any:
    return current_scheduler().suspend(on_suspend)
