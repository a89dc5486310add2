import itertools
import signal
import socket
import struct
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustee.bench.zipf import expected_top_fraction
from trustee.kvstore.checker import Op, check_history, check_register
from trustee.kvstore.client import ClientConfig, KeyStream, load_client
from trustee.kvstore.protocol import (
    GET,
    MISS,
    OK,
    PUT,
    ProtocolError,
    Request,
    RequestParser,
    Response,
    ResponseParser,
    encode_request,
    encode_response,
)
from trustee.kvstore.server import KVServer, ServerConfig
from trustee.kvstore.shards import ShardMap, fnv1a64

# -- wire format ------------------------------------------------------------------

keys = st.binary(min_size=1, max_size=80)
requests = st.builds(
    lambda rid, put, k, v: Request(rid, PUT, k, v) if put else Request(rid, GET, k),
    st.integers(0, 2**64 - 1),
    st.booleans(),
    keys,
    st.binary(max_size=300),
)


@given(st.lists(requests, max_size=20), st.integers(1, 50))
def test_requests_survive_any_fragmentation(reqs, chunk):
    wire = b"".join(encode_request(*r) for r in reqs)
    p = RequestParser()
    got = []
    for i in range(0, len(wire), chunk):
        got += p.feed(wire[i : i + chunk])
    assert got == reqs
    assert not p.buf


@given(st.lists(st.tuples(st.booleans(), st.one_of(st.none(), st.binary(max_size=200))), max_size=20), st.integers(1, 40))
def test_responses_survive_any_fragmentation(items, chunk):
    ops = {}
    want = []
    for rid, (is_get, val) in enumerate(items):
        ops[rid] = GET if is_get else PUT
        if is_get and val is not None:
            want.append(Response(rid, OK, val))
        else:
            want.append(Response(rid, MISS if is_get else OK))
    wire = b"".join(encode_response(r.rid, r.status, r.value) for r in want)
    p = ResponseParser(ops.get)
    got = []
    for i in range(0, len(wire), chunk):
        got += p.feed(wire[i : i + chunk])
    assert got == want


def test_frame_layout_is_little_endian():
    assert encode_request(1, GET, b"k") == struct.pack("<QBI", 1, 0, 1) + b"k"
    assert encode_request(2, PUT, b"k", b"vv") == struct.pack("<QBI", 2, 1, 1) + b"k" + struct.pack("<I", 2) + b"vv"
    assert encode_response(3, MISS) == struct.pack("<QB", 3, 1)


@pytest.mark.parametrize(
    "frame",
    [
        struct.pack("<QBI", 1, 9, 1) + b"k",  # unknown opcode
        struct.pack("<QBI", 1, 0, 0),  # empty key
        struct.pack("<QBI", 1, 0, (1 << 16) + 1),  # key too long
        struct.pack("<QBI", 1, 1, 1) + b"k" + struct.pack("<I", (1 << 24) + 1),  # value too long
    ],
)
def test_malformed_requests_are_rejected(frame):
    with pytest.raises(ProtocolError):
        RequestParser().feed(frame)


def test_response_for_unknown_id_is_rejected():
    with pytest.raises(ProtocolError):
        ResponseParser(lambda rid: None).feed(encode_response(5, OK))


# -- sharding ---------------------------------------------------------------------


def test_fnv1a_reference_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_shard_map_spreads_keys_and_shards():
    m = ShardMap(8, 3)
    counts = [0] * 8
    for i in range(8000):
        counts[m.shard_of(i.to_bytes(8, "little"))] += 1
    assert min(counts) > 800
    assert [m.trustee_of(s) for s in range(8)] == [0, 1, 2, 0, 1, 2, 0, 1]
    with pytest.raises(ValueError):
        ShardMap(0)


# -- linearizability checker against brute force ----------------------------------


def brute_force_linearizable(ops, initial=None):
    """Try every total order that respects real time."""
    n = len(ops)
    for order in itertools.permutations(range(n)):
        pos = {op: k for k, op in enumerate(order)}
        if any(ops[a].answered < ops[b].invoked and pos[a] > pos[b] for a in range(n) for b in range(n)):
            continue
        cur = initial
        ok = True
        for i in order:
            if ops[i].kind == "w":
                cur = ops[i].value
            elif ops[i].value != cur:
                ok = False
                break
        if ok:
            return True
    return False


@st.composite
def histories(draw):
    n = draw(st.integers(1, 6))
    nw = draw(st.integers(0, n))
    ops = []
    for k in range(n):
        a = draw(st.integers(0, 20))
        b = a + draw(st.integers(1, 8))
        if k < nw:
            ops.append(Op("w", f"v{k}", float(a), float(b)))
        else:
            val = draw(st.sampled_from([None] + [f"v{j}" for j in range(nw)]))
            ops.append(Op("r", val, float(a), float(b)))
    return ops


@settings(max_examples=600, deadline=None)
@given(histories())
def test_checker_agrees_with_brute_force(ops):
    assert (check_register(ops) == []) == brute_force_linearizable(ops)


def test_checker_flags_a_stale_read():
    ops = [Op("w", 1, 0, 1), Op("w", 2, 2, 3), Op("r", 1, 4, 5)]
    assert check_register(ops)
    assert check_history({b"k": ops}) and not check_history({b"k": ops[:2]})


# -- server -----------------------------------------------------------------------


def roundtrip(sock, frames, ops):
    sock.sendall(b"".join(frames))
    p = ResponseParser(ops.get)
    out = {}
    while len(out) < len(ops):
        data = sock.recv(1 << 16)
        assert data, "server closed the connection"
        for r in p.feed(data):
            assert r.rid not in out
            out[r.rid] = r
    return out


@pytest.fixture(params=["trust", "locks"])
def server(request):
    srv = KVServer(ServerConfig(port=0, workers=2, trustees=2, shards=4, mode=request.param))
    srv.start()
    yield srv
    srv.stop()


def connect(srv):
    s = socket.create_connection(srv.address, timeout=10)
    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return s


def test_put_get_and_miss(server):
    with connect(server) as s:
        out = roundtrip(s, [encode_request(1, PUT, b"a", b"x")], {1: PUT})
        assert out[1] == Response(1, OK)
        out = roundtrip(s, [encode_request(2, GET, b"a"), encode_request(3, GET, b"b")], {2: GET, 3: GET})
        assert out[2] == Response(2, OK, b"x") and out[3] == Response(3, MISS)


def test_pipelined_requests_are_matched_by_id(server):
    with connect(server) as s:
        frames, ops = [], {}
        for i in range(200):
            frames.append(encode_request(1000 + i, PUT, i.to_bytes(4, "little"), bytes([i % 256]) * (i + 1)))
            ops[1000 + i] = PUT
        out = roundtrip(s, frames, ops)
        assert set(out) == set(ops) and all(r.status == OK for r in out.values())
        frames = [encode_request(i, GET, i.to_bytes(4, "little")) for i in range(200)]
        out = roundtrip(s, frames, {i: GET for i in range(200)})
        assert all(out[i].value == bytes([i % 256]) * (i + 1) for i in range(200))


def test_stored_values_are_copies(server):
    with connect(server) as s:
        buf = bytearray(b"first")
        roundtrip(s, [encode_request(1, PUT, b"k", bytes(buf))], {1: PUT})
        buf[:] = b"other"
        assert roundtrip(s, [encode_request(2, GET, b"k")], {2: GET})[2].value == b"first"
        roundtrip(s, [encode_request(3, PUT, b"k", b"second")], {3: PUT})
        assert roundtrip(s, [encode_request(4, GET, b"k")], {4: GET})[4].value == b"second"


def test_malformed_frame_closes_only_that_connection(server):
    with connect(server) as good, connect(server) as bad:
        roundtrip(good, [encode_request(1, PUT, b"k", b"v")], {1: PUT})
        bad.sendall(struct.pack("<QBI", 1, 7, 1) + b"k")
        assert bad.recv(100) == b""
        assert roundtrip(good, [encode_request(2, GET, b"k")], {2: GET})[2].value == b"v"
    with connect(server) as again:
        assert roundtrip(again, [encode_request(3, GET, b"k")], {3: GET})[3].value == b"v"
    assert server.protocol_errors == 1


def test_many_connections_at_once(server):
    socks = [connect(server) for _ in range(12)]
    try:
        for i, s in enumerate(socks):
            s.sendall(encode_request(i, PUT, b"shared", bytes([i])))
        for i, s in enumerate(socks):
            p = ResponseParser({i: PUT}.get)
            assert p.feed(s.recv(100)) == [Response(i, OK)]
    finally:
        for s in socks:
            s.close()


# -- load client ------------------------------------------------------------------


def client_cfg(srv, **kw):
    host, port = srv.address
    return ClientConfig(host=host, port=port, **kw)


def test_pipeline_depth_one_is_serial(server):
    stats = load_client(client_cfg(server, threads=2, pipeline=1, keys=50, seconds=0.3))
    assert stats.max_outstanding == 1
    assert stats.ok and stats.total_ops > 0


def test_load_with_writes_is_linearizable(server):
    stats = load_client(client_cfg(server, threads=3, pipeline=16, keys=200, write_ratio=0.05, seconds=1.0))
    assert stats.verified and stats.ok, (stats.errors, list(stats.violations.items())[:3])
    assert stats.puts > 0 and stats.gets > stats.puts
    assert stats.misses == 0  # every key was prefilled


def test_without_prefill_reads_miss_until_written(server):
    stats = load_client(client_cfg(server, threads=1, pipeline=4, keys=10**6, seconds=0.3, prefill=False))
    assert stats.ok and stats.misses > 0


def test_max_ops_bounds_the_run(server):
    stats = load_client(client_cfg(server, threads=2, pipeline=8, keys=100, seconds=30, max_ops=500))
    assert stats.per_thread == [500, 500] and stats.ok


def test_key_stream_top_key_frequency():
    cfg = ClientConfig(keys=10**7, distribution="zipf", alpha=1.0, seed=2)
    draws = KeyStream(cfg, 0, chunk=1 << 20).take(2_000_000)
    p1 = expected_top_fraction(10**7, 1.0)
    freq = float((draws == 0).mean())
    assert abs(freq - p1) / p1 < 0.01


def test_key_stream_is_deterministic():
    cfg = ClientConfig(keys=1000, distribution="zipf", seed=4)
    assert (KeyStream(cfg, 3).take(500) == KeyStream(cfg, 3).take(500)).all()


# -- cli --------------------------------------------------------------------------


def test_serve_and_bench_commands():
    srv = subprocess.Popen(
        [sys.executable, "-m", "trustee.kvstore", "serve", "--addr", "127.0.0.1:0", "--workers", "1", "--trustees", "1"],
        stdout=subprocess.PIPE,
        text=True,
    )
    try:
        line = srv.stdout.readline()
        assert "listening on" in line
        addr = line.rsplit(" ", 1)[1].strip()
        out = subprocess.run(
            [sys.executable, "-m", "trustee.kvstore", "bench", "--addr", addr, "--threads", "2",
             "--pipeline", "8", "--keys", "100", "--seconds", "0.5", "--verify"],
            capture_output=True,
            text=True,
            timeout=120,
        )
        assert out.returncode == 0, out.stderr
        assert "verified=ok" in out.stdout
    finally:
        srv.send_signal(signal.SIGTERM)
        srv.wait(30)
    assert srv.returncode == 0
