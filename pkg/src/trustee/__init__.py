"""Delegation runtime: properties owned by trustee threads, reached through trusts.

Quick start::

    from trustee import Runtime, Ref, local_trustee

    def incr(c: Ref) -> None:
        c.value += 1

    def main():
        ct = local_trustee().entrust(17)
        ct.apply(incr)
        return ct.apply(lambda c: c.value)

    with Runtime(worker_threads=1) as rt:
        assert rt.run(main) == 18
"""

from .errors import (
    BatchInFlight,
    CaptureError,
    ChannelPoisoned,
    DelegatedContextViolation,
    RemoteError,
    RuntimeStateError,
    SerializationError,
    ShutdownError,
    TrustError,
    WontFit,
)
from .fibers import yield_now
from .runtime import Runtime, RuntimeConfig, start_runtime
from .trust import (
    JoinHandle,
    Latch,
    Ref,
    Trust,
    TrusteeRef,
    current_runtime,
    local_trustee,
    spawn,
    trustee_at,
)

__all__ = [
    "BatchInFlight",
    "CaptureError",
    "ChannelPoisoned",
    "DelegatedContextViolation",
    "JoinHandle",
    "Latch",
    "Ref",
    "RemoteError",
    "Runtime",
    "RuntimeConfig",
    "RuntimeStateError",
    "SerializationError",
    "ShutdownError",
    "Trust",
    "TrustError",
    "TrusteeRef",
    "WontFit",
    "current_runtime",
    "local_trustee",
    "spawn",
    "start_runtime",
    "trustee_at",
    "yield_now",
]
