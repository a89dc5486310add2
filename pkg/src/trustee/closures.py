"""Turning Python callables into channel-safe code descriptors.

A delegated body is identified on the wire by a code id (an index into a
process-wide registry) plus the bytes of its captured environment. Only
fixed-size scalars may be captured: ``int`` (64-bit), ``float``, ``bool``
and ``None``. Anything else - lists, dicts, strings, other handles - is a
reference into client memory or has no static size, and must be passed as
an explicit ``apply_with`` argument instead.

The response shape of a body is taken from its return annotation:
``-> int``, ``-> float``, ``-> bool`` and ``-> None`` give fixed-size (or
empty) responses, anything else is length-prefixed.
"""

from __future__ import annotations

import marshal
import struct
import threading
import types
from typing import Any, Callable

from .channel import SHAPE_BOOL, SHAPE_F64, SHAPE_I64, SHAPE_NONE, SHAPE_VAR
from .errors import CaptureError, SerializationError

_ENV_FORMAT = {int: "q", float: "d", bool: "q", type(None): ""}
_SHAPES = {
    int: SHAPE_I64,
    "int": SHAPE_I64,
    float: SHAPE_F64,
    "float": SHAPE_F64,
    bool: SHAPE_BOOL,
    "bool": SHAPE_BOOL,
    None: SHAPE_NONE,
    type(None): SHAPE_NONE,
    "None": SHAPE_NONE,
}
_PURE = (int, float, bool, complex, str, bytes, type(None), type(Ellipsis))
MAX_ENV_CELLS = 32


def is_pure_value(obj: Any) -> bool:
    """True for immutable values that hold no references to mutable state."""
    if isinstance(obj, _PURE):
        return True
    if type(obj) in (tuple, frozenset):
        return all(is_pure_value(x) for x in obj)
    return False


def shape_of(fn: Callable) -> int:
    ann = getattr(fn, "__annotations__", None)
    if not ann or "return" not in ann:
        return SHAPE_VAR
    try:
        return _SHAPES.get(ann["return"], SHAPE_VAR)
    except TypeError:  # unhashable annotation
        return SHAPE_VAR


class CodeEntry:
    """Registered code: everything but the captured values."""

    __slots__ = ("id", "fn", "code", "globals", "name", "defaults", "kinds", "env_struct", "shape", "system")

    def __init__(self, id: int, fn: Callable, kinds: tuple, system: bool = False):
        self.id = id
        self.fn = fn
        self.kinds = kinds
        self.system = system
        self.shape = shape_of(fn)
        self.code = getattr(fn, "__code__", None)
        self.globals = getattr(fn, "__globals__", None)
        self.name = getattr(fn, "__name__", "body")
        self.defaults = getattr(fn, "__defaults__", None)
        fmt = "".join(_ENV_FORMAT[k] for k in kinds)
        self.env_struct = struct.Struct("<" + fmt) if fmt else None

    @property
    def env_size(self) -> int:
        return self.env_struct.size if self.env_struct else 0

    def pack_env(self, closure: tuple | None) -> bytes:
        if self.env_struct is None:
            return b""
        vals = [c.cell_contents for c in closure if c.cell_contents is not None]
        try:
            return self.env_struct.pack(*vals)
        except struct.error as exc:
            raise CaptureError(f"captured value of {self.name} does not fit 64 bits: {exc}") from None

    def materialize(self, env: bytes) -> Callable:
        """Rebuild the body around a private copy of its environment."""
        if not self.kinds:
            return self.fn
        it = iter(self.env_struct.unpack(env) if self.env_struct else ())
        cells = []
        for kind in self.kinds:
            if kind is type(None):
                cells.append(types.CellType(None))
            elif kind is bool:
                cells.append(types.CellType(bool(next(it))))
            else:
                cells.append(types.CellType(next(it)))
        return types.FunctionType(self.code, self.globals, self.name, self.defaults, tuple(cells))

    def __repr__(self) -> str:
        return f"<CodeEntry {self.id} {self.name} env={self.env_size}B shape={self.shape}>"


class Registry:
    """Process-wide table of code entries; ids are stable for the process."""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries: list[CodeEntry | None] = [None]  # id 0 is never valid
        self._zero: dict[Any, CodeEntry] = {}
        self._keyed: dict[tuple, CodeEntry] = {}

    def register_system(self, fn: Callable) -> CodeEntry:
        with self._lock:
            entry = CodeEntry(len(self.entries), fn, (), system=True)
            self.entries.append(entry)
            return entry

    def lookup(self, fn: Callable) -> tuple[CodeEntry, bytes]:
        """Return ``(entry, env_bytes)`` for a body, enforcing the capture rules."""
        if type(fn) is types.FunctionType:
            closure = fn.__closure__
            if closure is None:
                entry = self._zero.get(fn.__code__)
                if entry is not None and entry.defaults == fn.__defaults__:
                    return entry, b""
                return self._register(fn, ()), b""
            kinds = []
            for cell in closure:
                try:
                    value = cell.cell_contents
                except ValueError:
                    raise CaptureError(f"{fn.__name__} captures a variable that is not yet bound") from None
                kind = type(value)
                if kind not in _ENV_FORMAT:
                    raise CaptureError(
                        f"{fn.__name__} captures a {kind.__name__}; only int/float/bool/None may be "
                        "captured - pass other data through apply_with"
                    )
                kinds.append(kind)
            kinds = tuple(kinds)
            entry = self._keyed.get((fn.__code__, kinds))
            if entry is None or entry.defaults != fn.__defaults__:
                entry = self._register(fn, kinds)
            return entry, entry.pack_env(closure)
        if isinstance(fn, types.BuiltinFunctionType) and (
            fn.__self__ is None or isinstance(fn.__self__, types.ModuleType)
        ):
            entry = self._zero.get(fn)
            if entry is None:
                entry = self._register(fn, ())
            return entry, b""
        raise CaptureError(
            f"delegated bodies must be plain functions, not {type(fn).__name__} "
            "(bound methods and partials carry references)"
        )

    def _register(self, fn: Callable, kinds: tuple) -> CodeEntry:
        defaults = getattr(fn, "__defaults__", None)
        if defaults is not None and not is_pure_value(defaults):
            raise CaptureError(f"{fn.__name__} has mutable default arguments")
        kw = getattr(fn, "__kwdefaults__", None)
        if kw and not is_pure_value(tuple(kw.values())):
            raise CaptureError(f"{fn.__name__} has mutable keyword defaults")
        if len(kinds) > MAX_ENV_CELLS:
            raise CaptureError(f"{fn.__name__} captures more than {MAX_ENV_CELLS} values")
        with self._lock:
            entry = CodeEntry(len(self.entries), fn, kinds)
            self.entries.append(entry)
            if type(fn) is types.FunctionType:
                if kinds:
                    self._keyed[(fn.__code__, kinds)] = entry
                else:
                    self._zero[fn.__code__] = entry
            else:
                self._zero[fn] = entry
            return entry


REGISTRY = Registry()


def serialize_arg(value: Any) -> bytes:
    """Serialize an ``apply_with`` argument; only plain values are accepted."""
    try:
        return marshal.dumps(value)
    except ValueError as exc:
        raise SerializationError(f"{type(value).__name__} argument cannot cross the channel: {exc}") from None


def deserialize_arg(data: bytes) -> Any:
    return marshal.loads(data)
