"""Per-pair request/response slots with a ready-bit batch protocol.

Every ordered (client thread, trustee thread) couple owns one
:class:`ChannelPair`: a request slot written only by the client and a
response slot written only by the trustee. A batch is published by writing
all request bytes, then the request count, then flipping the request ready
byte. The trustee notices that the request ready byte differs from the
response ready byte, runs every request in order, writes all responses and
flips its own ready byte to match. No read-modify-write operation is ever
needed: each byte has exactly one writer.

Byte layout of one pair (offsets relative to the pair base; every pair base
is a multiple of 64 inside a page-aligned anonymous mapping)::

    0     request header   [0] ready  [1] count  [2] n_primary
    64    request primary block    (128 bytes)
    192   request overflow block   (1024 bytes)
    1216  response header  [0] ready  [1] flags (bit 0 = tagged)
                           [2] n_primary  [3] n_overflow  [4:8] spill_len u32
    1280  response primary block   (128 bytes)
    1408  response overflow block  (1024 bytes)
    2432  next pair

Encoded request (little endian)::

    u64 code id | u64 descriptor word | u64 property id | env bytes | [arg]

    descriptor word: bits 0-31 env length, 32-39 response shape,
                     40-47 request kind, bit 48 = argument present
    arg: u32 length, payload, zero padding to a multiple of 8.
         When bit 31 of the length is set the payload lives out of line in
         the pair's request spill buffer and the next u32 is its offset.

Responses are written without a length prefix when their shape is static
(``SHAPE_NONE``/``SHAPE_DISCARD`` 0 bytes, ``SHAPE_I64``/``SHAPE_F64`` 8,
``SHAPE_BOOL`` 1); ``SHAPE_VAR`` responses are a u32 length and a marshal
payload. If any response in a batch failed or did not match its declared
shape, the whole batch is written in *tagged* mode: each response is a u8
status (0 ok, 1 error), a u32 length and a payload.

Responses that do not fit in the two blocks continue in a per-pair spill
buffer owned by the trustee; the header records its length and the client
drops it after decoding.
"""

from __future__ import annotations

import marshal
import mmap
import pickle
import struct
import threading
from typing import Any, Callable, Iterable, NamedTuple

from .errors import BatchInFlight, ChannelPoisoned, RemoteError, SerializationError, WontFit

CACHE_LINE = 64
WORD = 8
PRIMARY_BLOCK = 128
OVERFLOW_BLOCK = 1024
SLOT_PAYLOAD = PRIMARY_BLOCK + OVERFLOW_BLOCK
MIN_REQUEST = 3 * WORD
MAX_BATCH = 255

REQ_HEADER = 0
REQ_PRIMARY = REQ_HEADER + CACHE_LINE
REQ_OVERFLOW = REQ_PRIMARY + PRIMARY_BLOCK
RESP_HEADER = REQ_OVERFLOW + OVERFLOW_BLOCK
RESP_PRIMARY = RESP_HEADER + CACHE_LINE
RESP_OVERFLOW = RESP_PRIMARY + PRIMARY_BLOCK
PAIR_SIZE = RESP_OVERFLOW + OVERFLOW_BLOCK

# request kinds
KIND_APPLY = 0
KIND_LAUNCH = 1
KIND_SYSTEM = 2

# response shapes
SHAPE_NONE = 0
SHAPE_I64 = 1
SHAPE_F64 = 2
SHAPE_BOOL = 3
SHAPE_VAR = 4
SHAPE_DISCARD = 5

_ENV_MASK = 0xFFFF_FFFF
_HAS_ARG = 1 << 48
_OUT_OF_LINE = 1 << 31
_TAGGED = 1

_HDR = struct.Struct("<QQQ")
_U32 = struct.Struct("<I")
_U32x2 = struct.Struct("<II")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_TAG = struct.Struct("<BI")
_RESP_HDR = struct.Struct("<BBBBI")

_I64_MIN = -(1 << 63)
_I64_MAX = (1 << 63) - 1


class Task(NamedTuple):
    """One request as seen by the client before encoding."""

    code: int
    prop: int
    kind: int = KIND_APPLY
    shape: int = SHAPE_VAR
    env: bytes = b""
    arg: bytes | None = None


class DecodedRequest(NamedTuple):
    code: int
    prop: int
    kind: int
    shape: int
    env: bytes
    arg: bytes | None


class Failure:
    """Stands in for the value of a response whose body raised."""

    __slots__ = ("error",)

    def __init__(self, error: BaseException):
        self.error = error

    def __repr__(self) -> str:
        return f"Failure({self.error!r})"


def _pad8(n: int) -> int:
    return (n + 7) & ~7


def arg_size(arg_len: int) -> int:
    """Bytes an inline argument of ``arg_len`` payload bytes occupies."""
    return _pad8(4 + arg_len)


def request_size(task: Task) -> int:
    """Size of the inline encoding of ``task``."""
    n = MIN_REQUEST + len(task.env)
    if task.arg is not None:
        n += _pad8(4 + len(task.arg))
    return n


def encode_request(task: Task, space: int = SLOT_PAYLOAD) -> bytes:
    """Encode ``task`` inline; raise :class:`WontFit` if it exceeds ``space``."""
    size = request_size(task)
    if size > space:
        raise WontFit(f"request needs {size} bytes, {space} available")
    return _encode(task, size)


def _encode(task: Task, size: int, spill_offset: int = -1) -> bytes:
    env = task.env
    word1 = len(env) | (task.shape << 32) | (task.kind << 40)
    arg = task.arg
    if arg is None:
        return _HDR.pack(task.code, word1, task.prop) + env
    word1 |= _HAS_ARG
    head = _HDR.pack(task.code, word1, task.prop) + env
    if spill_offset >= 0:
        return head + _U32x2.pack(len(arg) | _OUT_OF_LINE, spill_offset)
    body = _U32.pack(len(arg)) + arg
    return head + body + bytes(size - len(head) - len(body))


def _encode_value(shape: int, value: Any) -> bytes | None:
    """Untagged encoding of ``value``; None when it does not match ``shape``."""
    if shape == SHAPE_DISCARD:
        return b""
    if shape == SHAPE_I64:
        if type(value) is int and _I64_MIN <= value <= _I64_MAX:
            return _I64.pack(value)
        return None
    if shape == SHAPE_NONE:
        return b"" if value is None else None
    if shape == SHAPE_F64:
        return _F64.pack(value) if type(value) is float else None
    if shape == SHAPE_BOOL:
        if value is True:
            return b"\x01"
        return b"\x00" if value is False else None
    try:
        payload = marshal.dumps(value)
    except ValueError:
        return None
    return _U32.pack(len(payload)) + payload


def _encode_error(error: BaseException) -> bytes:
    try:
        payload = pickle.dumps(error)
        pickle.loads(payload)
    except Exception:
        payload = pickle.dumps(RemoteError(type(error).__name__, str(error)))
    return _TAG.pack(1, len(payload)) + payload


def _encode_tagged(shape: int, value: Any) -> bytes:
    if type(value) is Failure:
        return _encode_error(value.error)
    if shape == SHAPE_DISCARD:
        return _TAG.pack(0, 0)
    try:
        payload = marshal.dumps(value)
    except ValueError as exc:
        err = SerializationError(f"result of type {type(value).__name__} cannot cross the channel: {exc}")
        return _encode_error(err)
    return _TAG.pack(0, len(payload)) + payload


class ChannelPair:
    """Request and response slot for one (client, trustee) couple.

    ``buf`` is the shared mapping and ``base`` this pair's offset in it.
    Client-side bookkeeping (in-flight shapes, request spill) is touched
    only by the client thread; the response spill only by the trustee
    until it is handed over in a published batch.
    """

    def __init__(self, buf, base: int, client: int = 0, trustee: int = 0, debug: bool = False):
        self.buf = buf
        self.base = base
        self.client = client
        self.trustee = trustee
        self.debug = debug
        self.poisoned = False
        self.req_spill = bytearray()
        self.resp_spill: bytearray | None = None
        self._inflight: list[int] | None = None
        self._client_ident: int | None = None
        self._trustee_ident: int | None = None
        self.batches = 0
        self.requests = 0

    # debug-mode writer checks
    def _check(self, role: str) -> None:
        ident = threading.get_ident()
        attr = "_client_ident" if role == "client" else "_trustee_ident"
        owner = getattr(self, attr)
        if owner is None:
            setattr(self, attr, ident)
        elif owner != ident:
            raise AssertionError(f"{role} side of pair ({self.client}->{self.trustee}) written by a second thread")

    @property
    def in_flight(self) -> bool:
        """True while a submitted batch has not been collected by the client."""
        return self._inflight is not None

    def ready(self) -> bool:
        """True when the trustee has an unserved batch on this pair."""
        b = self.base
        return self.buf[b + REQ_HEADER] != self.buf[b + RESP_HEADER]

    def try_submit_batch(self, tasks: Iterable[Task]) -> int:
        """Write a maximal prefix of ``tasks`` and publish it.

        Returns the number of tasks written (0 for an empty list, in which
        case the ready flag is left alone). Raises :class:`BatchInFlight`
        if the previous batch has not been collected yet.
        """
        if self.debug:
            self._check("client")
        if self._inflight is not None:
            raise BatchInFlight(f"pair ({self.client}->{self.trustee}) has a batch in flight")
        buf = self.buf
        base = self.base
        pos = base + REQ_PRIMARY
        limit = pos + PRIMARY_BLOCK
        in_primary = True
        n_primary = 0
        shapes: list[int] = []
        spill = self.req_spill
        if spill:
            del spill[:]
        for task in tasks:
            if len(shapes) == MAX_BATCH:
                break
            size = request_size(task)
            spill_offset = -1
            if size > OVERFLOW_BLOCK:
                # argument travels out of line, 8 bytes stay in the slot
                size = MIN_REQUEST + len(task.env) + 8
                spill_offset = len(spill)
            if pos + size > limit:
                if not in_primary:
                    break
                in_primary = False
                pos = base + REQ_OVERFLOW
                limit = pos + OVERFLOW_BLOCK
                if pos + size > limit:
                    break
            if spill_offset >= 0:
                spill += task.arg
            data = _encode(task, size, spill_offset)
            buf[pos : pos + size] = data
            pos += size
            if in_primary:
                n_primary += 1
            shapes.append(task.shape)
        count = len(shapes)
        if count == 0:
            return 0
        buf[base + 1] = count
        buf[base + 2] = n_primary
        self._inflight = shapes
        self.batches += 1
        self.requests += count
        # publish: flag flip strictly after the payload
        buf[base] = buf[base] ^ 1
        return count

    def poll_serve(self, executor: Callable[[int, int, int, bytes, bytes | None], Any]) -> int:
        """Serve the pending batch, if any, and return how many requests ran.

        ``executor(kind, code, prop, env, arg)`` is called once per request,
        in order. An exception raised by it becomes an error response.
        """
        buf = self.buf
        base = self.base
        flag = buf[base]
        if flag == buf[base + RESP_HEADER]:
            return 0
        if self.poisoned:
            raise ChannelPoisoned(f"pair ({self.client}->{self.trustee}) is poisoned")
        if self.debug:
            self._check("trustee")
        count = buf[base + 1]
        n_primary = buf[base + 2]
        pos = base + REQ_PRIMARY
        limit = pos + PRIMARY_BLOCK
        unpack_hdr = _HDR.unpack_from
        results: list[Any] = []
        shapes: list[int] = []
        for i in range(count):
            if i == n_primary:
                pos = base + REQ_OVERFLOW
                limit = pos + OVERFLOW_BLOCK
            if pos + MIN_REQUEST > limit:
                self._poison(f"request {i} header overruns its block")
            code, word1, prop = unpack_hdr(buf, pos)
            pos += MIN_REQUEST
            env_len = word1 & _ENV_MASK
            if env_len:
                if pos + env_len > limit:
                    self._poison(f"request {i} environment overruns its block")
                env = buf[pos : pos + env_len]
                pos += env_len
            else:
                env = b""
            arg = None
            if word1 & _HAS_ARG:
                if pos + 4 > limit:
                    self._poison(f"request {i} argument prefix overruns its block")
                (alen,) = _U32.unpack_from(buf, pos)
                if alen & _OUT_OF_LINE:
                    alen &= ~_OUT_OF_LINE
                    (soff,) = _U32.unpack_from(buf, pos + 4)
                    if soff + alen > len(self.req_spill):
                        self._poison(f"request {i} spill reference out of range")
                    arg = bytes(self.req_spill[soff : soff + alen])
                    pos += 8
                else:
                    step = _pad8(4 + alen)
                    if pos + step > limit:
                        self._poison(f"request {i} argument length {alen} overruns its block")
                    arg = buf[pos + 4 : pos + 4 + alen]
                    pos += step
            shapes.append((word1 >> 32) & 0xFF)
            try:
                results.append(executor((word1 >> 40) & 0xFF, code, prop, env, arg))
            except Exception as exc:  # a trustee survives client bugs
                results.append(Failure(exc))
        self._write_responses(shapes, results)
        buf[base + RESP_HEADER] = flag
        return count

    def _poison(self, why: str) -> None:
        self.poisoned = True
        raise ChannelPoisoned(f"pair ({self.client}->{self.trustee}): {why}")

    def _write_responses(self, shapes: list[int], results: list[Any]) -> None:
        encoded = []
        tagged = False
        for shape, value in zip(shapes, results):
            if type(value) is Failure:
                tagged = True
                break
            data = _encode_value(shape, value)
            if data is None:
                tagged = True
                break
            encoded.append(data)
        if tagged:
            encoded = [_encode_tagged(s, v) for s, v in zip(shapes, results)]
        buf = self.buf
        base = self.base
        pos = base + RESP_PRIMARY
        limit = pos + PRIMARY_BLOCK
        n_primary = n_overflow = 0
        in_primary = True
        spill = None
        for data in encoded:
            size = len(data)
            if spill is None:
                if pos + size > limit and in_primary:
                    in_primary = False
                    pos = base + RESP_OVERFLOW
                    limit = pos + OVERFLOW_BLOCK
                if pos + size <= limit:
                    if size:
                        buf[pos : pos + size] = data
                        pos += size
                    if in_primary:
                        n_primary += 1
                    else:
                        n_overflow += 1
                    continue
                spill = bytearray()
            spill += data
        if spill is not None:
            self.resp_spill = spill
        _RESP_HDR.pack_into(
            buf,
            base + RESP_HEADER,
            buf[base + RESP_HEADER],
            _TAGGED if tagged else 0,
            n_primary,
            n_overflow,
            len(spill) if spill is not None else 0,
        )

    def poll_responses(self) -> list[Any] | None:
        """Collect the responses of the in-flight batch.

        Returns None while the batch is unserved. Otherwise returns one value
        per submitted request, in submission order; a response whose body
        raised is a :class:`Failure`.
        """
        shapes = self._inflight
        if shapes is None:
            return None
        buf = self.buf
        base = self.base
        if buf[base] != buf[base + RESP_HEADER]:
            return None
        _, flags, n_primary, n_overflow, spill_len = _RESP_HDR.unpack_from(buf, base + RESP_HEADER)
        out: list[Any] = []
        tagged = flags & _TAGGED
        pos = base + RESP_PRIMARY
        src = buf
        spill_from = n_primary + n_overflow
        for i, shape in enumerate(shapes):
            if i == n_primary:
                pos = base + RESP_OVERFLOW
            if i == spill_from:
                src = self.resp_spill
                if src is None or len(src) < spill_len:
                    self._poison("spill buffer missing")
                pos = 0
            if tagged:
                status, length = _TAG.unpack_from(src, pos)
                pos += 5
                payload = bytes(src[pos : pos + length])
                pos += length
                if status:
                    out.append(Failure(pickle.loads(payload)))
                else:
                    out.append(marshal.loads(payload) if length else None)
                continue
            if shape == SHAPE_I64:
                out.append(_I64.unpack_from(src, pos)[0])
                pos += 8
            elif shape == SHAPE_NONE or shape == SHAPE_DISCARD:
                out.append(None)
            elif shape == SHAPE_VAR:
                (length,) = _U32.unpack_from(src, pos)
                pos += 4
                out.append(marshal.loads(bytes(src[pos : pos + length])))
                pos += length
            elif shape == SHAPE_F64:
                out.append(_F64.unpack_from(src, pos)[0])
                pos += 8
            elif shape == SHAPE_BOOL:
                out.append(src[pos] == 1)
                pos += 1
            else:
                self._poison(f"unknown response shape {shape}")
        if spill_len:
            self.resp_spill = None
        self._inflight = None
        return out


class ChannelMatrix:
    """T x T grid of channel pairs, indexed ``(client, trustee)``."""

    def __init__(self, threads: int, debug: bool = False):
        if threads < 1:
            raise ValueError("need at least one thread")
        self.threads = threads
        self.buf = mmap.mmap(-1, max(PAIR_SIZE * threads * threads, mmap.PAGESIZE))
        self.pairs = [
            [ChannelPair(self.buf, (c * threads + t) * PAIR_SIZE, c, t, debug) for t in range(threads)]
            for c in range(threads)
        ]

    def pair(self, client: int, trustee: int) -> ChannelPair:
        return self.pairs[client][trustee]

    def close(self) -> None:
        self.pairs = []
        try:
            self.buf.close()
        except BufferError:
            pass
