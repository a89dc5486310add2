"""Sharded key-value store served over TCP, plus a verifying load client."""

from .checker import Op, check_history, check_register
from .client import ClientConfig, KVStats, KeyStream, load_client, prefill
from .protocol import GET, MISS, OK, PUT, ProtocolError, Request, RequestParser, Response, ResponseParser
from .server import KVServer, ServerConfig, serve
from .shards import ShardMap, fnv1a64

__all__ = [
    "GET",
    "MISS",
    "OK",
    "PUT",
    "ClientConfig",
    "KVServer",
    "KVStats",
    "KeyStream",
    "Op",
    "ProtocolError",
    "Request",
    "RequestParser",
    "Response",
    "ResponseParser",
    "ServerConfig",
    "ShardMap",
    "check_history",
    "check_register",
    "fnv1a64",
    "load_client",
    "prefill",
    "serve",
]
