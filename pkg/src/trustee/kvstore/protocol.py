"""Binary wire format of the key-value service (all integers little-endian).

Request::

    u64 request_id | u8 opcode | u32 key_len | key | [u32 value_len | value]

The value part is present for PUT only. Response::

    u64 request_id | u8 status | [u32 value_len | value]

The value part is present only for a GET that hit. Responses may arrive
in any order; the client pairs them with requests by id.
"""

from __future__ import annotations

import struct
from typing import Callable, NamedTuple

GET = 0
PUT = 1
OK = 0
MISS = 1

MAX_KEY = 1 << 16
MAX_VALUE = 1 << 24

_REQ = struct.Struct("<QBI")
_RESP = struct.Struct("<QB")
_LEN = struct.Struct("<I")


class ProtocolError(ValueError):
    """Malformed frame; the connection it came from must be closed."""


class Request(NamedTuple):
    rid: int
    op: int
    key: bytes
    value: bytes | None = None


class Response(NamedTuple):
    rid: int
    status: int
    value: bytes | None = None


def encode_request(rid: int, op: int, key: bytes, value: bytes | None = None) -> bytes:
    if not key:
        raise ProtocolError("empty key")
    if op == GET:
        return _REQ.pack(rid, GET, len(key)) + key
    if op == PUT:
        if value is None:
            raise ProtocolError("PUT without value")
        return _REQ.pack(rid, PUT, len(key)) + key + _LEN.pack(len(value)) + value
    raise ProtocolError(f"unknown opcode {op}")


def encode_response(rid: int, status: int, value: bytes | None = None) -> bytes:
    if value is None:
        return _RESP.pack(rid, status)
    return _RESP.pack(rid, status) + _LEN.pack(len(value)) + value


class RequestParser:
    """Incremental request decoder for one connection."""

    def __init__(self):
        self.buf = bytearray()

    def feed(self, data: bytes) -> list[Request]:
        buf = self.buf
        buf += data
        out: list[Request] = []
        pos = 0
        n = len(buf)
        while n - pos >= _REQ.size:
            rid, op, klen = _REQ.unpack_from(buf, pos)
            if op not in (GET, PUT):
                raise ProtocolError(f"unknown opcode {op}")
            if klen == 0 or klen > MAX_KEY:
                raise ProtocolError(f"bad key length {klen}")
            kstart = pos + _REQ.size
            kend = kstart + klen
            if op == GET:
                if kend > n:
                    break
                out.append(Request(rid, GET, bytes(buf[kstart:kend])))
                pos = kend
                continue
            if kend + 4 > n:
                break
            (vlen,) = _LEN.unpack_from(buf, kend)
            if vlen > MAX_VALUE:
                raise ProtocolError(f"bad value length {vlen}")
            vend = kend + 4 + vlen
            if vend > n:
                break
            out.append(Request(rid, PUT, bytes(buf[kstart:kend]), bytes(buf[kend + 4 : vend])))
            pos = vend
        if pos:
            del buf[:pos]
        return out


class ResponseParser:
    """Incremental response decoder.

    ``op_of(rid)`` returns the opcode of an outstanding request, or None if
    the id is unknown, which is a protocol violation by the server.
    """

    def __init__(self, op_of: Callable[[int], int | None]):
        self.buf = bytearray()
        self.op_of = op_of

    def feed(self, data: bytes) -> list[Response]:
        buf = self.buf
        buf += data
        out: list[Response] = []
        pos = 0
        n = len(buf)
        while n - pos >= _RESP.size:
            rid, status = _RESP.unpack_from(buf, pos)
            op = self.op_of(rid)
            if op is None:
                raise ProtocolError(f"response for unknown request id {rid}")
            if status not in (OK, MISS):
                raise ProtocolError(f"bad status {status}")
            if op == GET and status == OK:
                vstart = pos + _RESP.size + 4
                if vstart > n:
                    break
                (vlen,) = _LEN.unpack_from(buf, pos + _RESP.size)
                if vstart + vlen > n:
                    break
                out.append(Response(rid, OK, bytes(buf[vstart : vstart + vlen])))
                pos = vstart + vlen
            else:
                out.append(Response(rid, status))
                pos += _RESP.size
        if pos:
            del buf[:pos]
        return out
