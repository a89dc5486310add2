"""User-facing delegation API: trusts, trustee references and latches.

A property is entrusted to a trustee thread and from then on is reachable
only through :class:`Trust` handles. Bodies passed to the apply family
receive a :class:`Ref` whose ``value`` attribute is the property; assigning
to it replaces the property, which is how immutable values such as ints
are updated::

    def incr(c: Ref) -> None:
        c.value += 1

    ct = local_trustee().entrust(17)
    ct.apply(incr)
    assert ct.apply(lambda c: c.value) == 18
"""

from __future__ import annotations

import threading
from concurrent.futures import Future
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Generic, TypeVar

from . import _local
from .errors import RuntimeStateError
from .fibers import FiberState, WakeToken, current_scheduler

if TYPE_CHECKING:
    from .runtime import Runtime, Worker

T = TypeVar("T")
U = TypeVar("U")


class Ref(Generic[T]):
    """Exclusive access to a property for the duration of one body."""

    __slots__ = ("value",)

    def __init__(self, value: T):
        self.value = value

    def __repr__(self) -> str:
        return f"Ref({self.value!r})"


class PropertyCell:
    """Trustee-side record of an entrusted property."""

    __slots__ = ("ref", "refcount", "busy", "doomed")

    def __init__(self, value: Any):
        self.ref = Ref(value)
        self.refcount = 1
        self.busy = False
        self.doomed = False


class Latch(Generic[T]):
    """Mutual exclusion among the fibers of one thread.

    Used to wrap properties that ``launch`` bodies touch: a launch body may
    suspend half-way, and the latch keeps a second launch body off the
    property until the first releases it. Waiters are granted in FIFO
    order. Uses no atomic operations, so it must only ever be touched from
    the thread that first acquires it.
    """

    __slots__ = ("value", "held", "waiters", "_thread", "__weakref__")

    def __init__(self, value: T):
        self.value = value
        self.held = False
        self.waiters: list[WakeToken] = []
        self._thread: int | None = None

    def _check_thread(self) -> None:
        ident = threading.get_ident()
        if self._thread is None:
            self._thread = ident
        elif self._thread != ident:
            raise AssertionError("Latch accessed from a second thread")

    def acquire(self) -> None:
        self._check_thread()
        if not self.held:
            self.held = True
            return
        # ownership is handed over by release(); nothing to do after waking
        current_scheduler().suspend(self.waiters.append)

    def release(self) -> None:
        self._check_thread()
        if not self.held:
            raise RuntimeError("release of an unheld Latch")
        if self.waiters:
            self.waiters.pop(0).resume()
        else:
            self.held = False

    def __enter__(self) -> Latch[T]:
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def __repr__(self) -> str:
        return f"Latch({self.value!r}, held={self.held}, waiters={len(self.waiters)})"


def _worker_for(runtime: Runtime) -> Worker:
    w = _local.worker_or_none()
    if w is None or w.runtime is not runtime:
        if runtime.state == "stopped":
            raise RuntimeStateError("the runtime has been shut down")
        raise RuntimeStateError("trust operations must run on a thread of the owning runtime (see Runtime.run)")
    return w


class Trust(Generic[T]):
    """Reference-counted handle to an entrusted property.

    Cloning adjusts the trustee-side reference count; dropping the last
    handle destroys the property on its trustee. Handles that are garbage
    collected without an explicit :meth:`drop` are dropped automatically.
    """

    __slots__ = ("runtime", "trustee", "prop", "_live", "__weakref__")

    def __init__(self, runtime: Runtime, trustee: int, prop: int):
        self.runtime = runtime
        self.trustee = trustee
        self.prop = prop
        self._live = True

    def __repr__(self) -> str:
        state = "" if self._live else " dropped"
        return f"<Trust trustee={self.trustee} prop={self.prop}{state}>"

    @property
    def live(self) -> bool:
        return self._live

    def _check(self) -> Worker:
        if not self._live:
            raise RuntimeStateError("use of a dropped Trust")
        return _worker_for(self.runtime)

    # -- apply family -----------------------------------------------------
    def apply(self, body: Callable[[Ref[T]], U]) -> U:
        """Run ``body`` on the property and return its result.

        Blocks the calling fiber until the trustee has answered. Runs inline
        when the trustee is the current thread.
        """
        return self._check().apply(self, body)

    def apply_then(
        self,
        body: Callable[[Ref[T]], U],
        then: Callable[[U], Any] | None = None,
        on_error: Callable[[BaseException], Any] | None = None,
    ) -> None:
        """Queue ``body`` and return at once; ``then(result)`` runs later on this thread."""
        self._check().apply_then(self, body, then, on_error)

    def apply_with(self, body: Callable[[Ref[T], Any], U], arg: Any) -> U:
        """Like :meth:`apply` but ships ``arg`` serialized next to the body.

        Use it for data that cannot be captured: strings, bytes, containers.
        """
        return self._check().apply(self, body, arg)

    def apply_with_then(
        self,
        body: Callable[[Ref[T], Any], U],
        arg: Any,
        then: Callable[[U], Any] | None = None,
        on_error: Callable[[BaseException], Any] | None = None,
    ) -> None:
        self._check().apply_then(self, body, then, on_error, arg)

    def launch(self, body: Callable[[Latch], U]) -> U:
        """Run a body that may block in a fresh fiber on the trustee.

        The property must be a :class:`Latch`; the body receives it already
        acquired and reaches the wrapped object through ``.value``.
        """
        return self._check().launch(self, body)

    def launch_then(
        self,
        body: Callable[[Latch], U],
        then: Callable[[U], Any] | None = None,
        on_error: Callable[[BaseException], Any] | None = None,
    ) -> None:
        self._check().launch(self, body, then, on_error, blocking=False)

    # -- reference counting -----------------------------------------------
    def clone(self) -> Trust[T]:
        return self._check().clone(self)

    def drop(self) -> None:
        if not self._live:
            return
        w = _local.worker_or_none()
        if w is not None and w.runtime is self.runtime:
            w.drop(self)
        else:
            self._live = False
            self.runtime._post_decref(self.trustee, self.prop)

    def __enter__(self) -> Trust[T]:
        return self

    def __exit__(self, *exc) -> None:
        self.drop()

    def __del__(self):
        if getattr(self, "_live", False):
            self._live = False
            try:
                self.runtime._post_drop(self.trustee, self.prop)
            except Exception:
                pass


@dataclass(frozen=True)
class TrusteeRef:
    """Names a trustee thread of a runtime."""

    runtime: Runtime
    index: int

    def entrust(self, value: T) -> Trust[T]:
        """Hand ``value`` to this trustee and return the first handle to it.

        The caller must not keep other references to ``value``.
        """
        return _worker_for(self.runtime).entrust(value, self.index)

    def __repr__(self) -> str:
        return f"TrusteeRef({self.index})"


def current_runtime() -> Runtime:
    w = _local.worker_or_none()
    if w is None:
        raise RuntimeStateError("not on a runtime thread")
    return w.runtime


def local_trustee() -> TrusteeRef:
    """The trustee running on the current thread."""
    w = _local.worker_or_none()
    if w is None:
        raise RuntimeStateError("not on a runtime thread")
    return TrusteeRef(w.runtime, w.index)


def trustee_at(i: int) -> TrusteeRef:
    return current_runtime().trustee_at(i)


class JoinHandle(Generic[T]):
    """Result of a fiber spawned through the runtime."""

    def __init__(self, runtime: Runtime, future: Future):
        self.runtime = runtime
        self.future = future

    def done(self) -> bool:
        return self.future.done()

    def join(self, timeout: float | None = None) -> T:
        """Wait for the fiber; suspends (not blocks) when called from a fiber."""
        w = _local.worker_or_none()
        if w is None or not w.scheduler.in_fiber:
            return self.future.result(timeout)
        if not self.future.done():

            def register(token: WakeToken) -> None:
                self.future.add_done_callback(lambda f: w.post(("wake", token)))

            w.scheduler.suspend(register)
        return self.future.result()


def spawn(fn: Callable[..., T], *args: Any, thread: int | None = None) -> JoinHandle[T]:
    """Start ``fn(*args)`` in a new fiber on ``thread`` (default: this thread)."""
    rt = current_runtime()
    if thread is None:
        thread = _local.tls.worker.index
    return rt.spawn(fn, *args, thread=thread)


__all__ = [
    "FiberState",
    "JoinHandle",
    "Latch",
    "PropertyCell",
    "Ref",
    "Trust",
    "TrusteeRef",
    "current_runtime",
    "local_trustee",
    "spawn",
    "trustee_at",
]
