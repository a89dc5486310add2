"""Exception types raised by the delegation runtime."""


class TrustError(Exception):
    """Base class for runtime errors."""


class DelegatedContextViolation(TrustError, AssertionError):
    """A blocking operation was attempted where suspension is forbidden.

    Raised when a body executed by ``apply``/``apply_then`` (or a ``then``
    callback) tries to suspend its fiber, e.g. by issuing a blocking
    ``apply`` to a remote trustee. Use ``launch`` for bodies that must block.
    """


class CaptureError(TrustError, TypeError):
    """A delegated body captures something that is not a plain scalar value."""


class SerializationError(TrustError, ValueError):
    """An argument or return value cannot cross the delegation channel."""


class WontFit(TrustError):
    """An encoded request does not fit in the remaining slot space."""


class BatchInFlight(TrustError):
    """A new batch was submitted before the previous one was served."""


class ChannelPoisoned(TrustError):
    """A slot held a malformed encoding. Indicates an implementation bug."""


class RemoteError(TrustError):
    """A delegated body raised an exception that could not be re-raised as-is."""

    def __init__(self, type_name: str, message: str):
        super().__init__(f"{type_name}: {message}")
        self.type_name = type_name
        self.message = message

    def __reduce__(self):
        return (RemoteError, (self.type_name, self.message))


class RuntimeStateError(TrustError, RuntimeError):
    """The runtime is not started, already started, or shut down."""


class ShutdownError(TrustError, RuntimeError):
    """Shutdown timed out with fibers still suspended (likely a user deadlock)."""

    def __init__(self, message: str, stuck: list):
        super().__init__(message)
        self.stuck = stuck

    def __reduce__(self):
        return (ShutdownError, (str(self), self.stuck))
