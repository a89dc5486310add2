"""Lock baselines sharing one critical-section interface.

Every lock supports ``acquire()``, ``release()`` and ``with lock:``.
CPython exposes no compare-and-swap to Python code, so the one atomic
primitive used here is a non-blocking ``Lock.acquire``, which behaves as
test-and-set. The MCS lock uses a tiny guard for its tail exchange and
spins only on its own queue node.
"""

from __future__ import annotations

import os
import threading


def cpu_relax() -> None:
    """Stand-in for a pause instruction: one cheap call, no effect."""


class Mutex:
    """Blocking mutual exclusion (the platform lock)."""

    __slots__ = ("_lock",)
    name = "mutex"

    def __init__(self):
        self._lock = threading.Lock()

    def acquire(self) -> None:
        self._lock.acquire()

    def release(self) -> None:
        self._lock.release()

    def __enter__(self):
        self._lock.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self._lock.release()


class SpinLock:
    """Test-and-test-and-set spin lock with exponential relax backoff."""

    __slots__ = ("_flag", "_held")
    name = "spin"
    MAX_BACKOFF = 64

    def __init__(self):
        self._flag = threading.Lock()
        self._held = False

    def acquire(self) -> None:
        flag = self._flag
        backoff = 1
        while True:
            if not self._held and flag.acquire(False):
                self._held = True
                return
            for _ in range(backoff):
                cpu_relax()
            if backoff < self.MAX_BACKOFF:
                backoff <<= 1
            else:
                os.sched_yield()

    def release(self) -> None:
        self._held = False
        self._flag.release()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()


class _QNode:
    __slots__ = ("locked", "next")

    def __init__(self):
        self.locked = False
        self.next: _QNode | None = None


_node_pool = threading.local()


def _take_node() -> _QNode:
    pool = getattr(_node_pool, "free", None)
    if pool:
        return pool.pop()
    if pool is None:
        _node_pool.free = []
    return _QNode()


class MCSLock:
    """Queue lock with FIFO hand-off; each waiter spins on its own node."""

    __slots__ = ("_tail", "_guard", "_holder")
    name = "mcs"

    def __init__(self):
        self._tail: _QNode | None = None
        self._guard = threading.Lock()
        self._holder: _QNode | None = None

    def _swap_tail(self, node: _QNode) -> _QNode | None:
        with self._guard:
            prev, self._tail = self._tail, node
        return prev

    def _cas_tail(self, expect: _QNode, new: _QNode | None) -> bool:
        with self._guard:
            if self._tail is expect:
                self._tail = new
                return True
            return False

    def acquire(self) -> None:
        node = _take_node()
        node.next = None
        node.locked = True
        prev = self._swap_tail(node)
        if prev is not None:
            prev.next = node
            spins = 0
            while node.locked:
                spins += 1
                if spins & 3:
                    cpu_relax()
                else:
                    os.sched_yield()
        self._holder = node

    def release(self) -> None:
        node = self._holder
        self._holder = None
        if node.next is None:
            if self._cas_tail(node, None):
                _node_pool.free.append(node)
                return
            while node.next is None:  # successor is linking itself in
                os.sched_yield()
        node.next.locked = False
        _node_pool.free.append(node)

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()


LOCKS = {"mutex": Mutex, "spin": SpinLock, "mcs": MCSLock}
