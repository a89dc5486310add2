import threading
import time
from collections import Counter

import pytest

from tracking import Tracked, destroyed
from trustee import (
    Latch,
    Ref,
    Runtime,
    RuntimeConfig,
    RuntimeStateError,
    ShutdownError,
    local_trustee,
    spawn,
    start_runtime,
    trustee_at,
    yield_now,
)
from trustee.runtime import Worker


def incr(c: Ref) -> None:
    c.value += 1


def read(c: Ref):
    return c.value


# -- configuration ------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"worker_threads": 0},
        {"worker_threads": 2, "dedicated_trustees": 2},
        {"worker_threads": 2, "dedicated_trustees": -1},
        {"high_water": 0},
    ],
)
def test_bad_configs_are_rejected(kw):
    with pytest.raises(ValueError):
        RuntimeConfig(**kw)


def test_config_from_environment():
    env = {"TRUSTEE_THREADS": "6", "TRUSTEE_DEDICATED": "2", "TRUSTEE_HIGH_WATER": "64"}
    cfg = RuntimeConfig.from_env(env)
    assert (cfg.worker_threads, cfg.dedicated_trustees, cfg.high_water) == (6, 2, 64)
    assert RuntimeConfig.from_env(env, worker_threads=3).worker_threads == 3
    assert RuntimeConfig.from_env({}).worker_threads == 1


def test_start_twice_is_refused():
    rt = start_runtime(worker_threads=1)
    try:
        with pytest.raises(RuntimeStateError):
            rt.start()
    finally:
        rt.shutdown()


def test_trustee_index_out_of_range(rt2):
    with pytest.raises(IndexError):
        rt2.trustee_at(2)
    with pytest.raises(IndexError):
        rt2.run(lambda: trustee_at(5))


def test_spawn_before_start_is_refused():
    rt = Runtime(worker_threads=1)
    with pytest.raises(RuntimeStateError):
        rt.spawn(lambda: None)
    rt.shutdown()  # never started: nothing to do
    assert rt.state == "stopped"


def test_context_manager_lifecycle():
    with Runtime(worker_threads=2) as rt:
        assert rt.run(lambda: trustee_at(1).entrust(4).apply(read)) == 4
    assert rt.state == "stopped"
    assert not any(th.is_alive() for th in rt.threads)


# -- placement ------------------------------------------------------------------


@pytest.mark.parametrize("threads", [1, 3, 4])
def test_round_robin_placement_is_even(runtime_factory, threads):
    rt = runtime_factory(worker_threads=threads)

    def main():
        return [rt.next_trustee().index for _ in range(512)]

    got = Counter(rt.run(main))
    oracle = Counter(i % threads for i in range(512))
    assert got == oracle
    assert max(got.values()) - min(got.values()) <= 1


def test_dedicated_threads_run_no_client_fibers(runtime_factory):
    rt = runtime_factory(worker_threads=4, dedicated_trustees=2)
    assert rt.trustee_pool() == [0, 1]
    assert rt.client_threads() == [2, 3]
    with pytest.raises(ValueError):
        rt.run(lambda: None, thread=0)

    where = []

    def client(k):
        where.append(threading.current_thread().name)
        t = rt.next_trustee().entrust(0)
        for _ in range(100):
            t.apply(incr)
        return t.apply(read)

    hs = [rt.spawn(client, k, thread=th) for k, th in enumerate((2, 3, 2, 3))]
    assert [h.join() for h in hs] == [100] * 4
    assert set(where) == {"trustee-2", "trustee-3"}
    assert rt.workers[0].scheduler.spawned == 0 and rt.workers[1].scheduler.spawned == 0
    served = [rt.workers[i].c.served for i in range(4)]
    assert served[0] > 0 and served[1] > 0 and served[2] == served[3] == 0


def test_launch_runs_on_a_dedicated_trustee(runtime_factory):
    rt = runtime_factory(worker_threads=2, dedicated_trustees=1)
    assert rt.run(lambda: trustee_at(0).entrust(Latch(3)).launch(lambda l: l.value + 1)) == 4


# -- counters and ordering ----------------------------------------------------


def test_counters_balance_after_traffic(rt4):
    def client():
        ts = [trustee_at(k).entrust(0) for k in range(4)]
        for i in range(400):
            t = ts[i % 4]
            if i % 3:
                t.apply_then(incr)
            else:
                t.apply(incr)
        return [t.apply(read) for t in ts]

    hs = [rt4.spawn(client, thread=k) for k in range(4)]
    assert [h.join() for h in hs] == [[100] * 4] * 4
    assert rt4.wait_idle()
    c = rt4.counters()
    assert c["issued"] == c["submitted"] == c["served"] == c["delivered"]
    assert c["pending"] == 0


def test_requests_from_one_client_are_served_in_order(rt4):
    def client(t, tag):
        for i in range(300):
            t.apply_with_then(lambda c, x: c.value.append(x), (tag, i))
        t.apply(read)

    def main():
        log = trustee_at(3).entrust([])
        hs = [spawn(client, log.clone(), tag, thread=tag) for tag in range(3)]
        for h in hs:
            h.join()
        return log.apply(read)

    out = rt4.run(main)
    assert len(out) == 900
    for tag in range(3):
        assert [i for t, i in out if t == tag] == list(range(300))


def test_pending_queue_respects_high_water(runtime_factory):
    rt = runtime_factory(worker_threads=2, high_water=8)

    def main():
        t = trustee_at(1).entrust(0)
        for _ in range(2000):
            t.apply_then(incr)
        return t.apply(read)

    assert rt.run(main, thread=0) == 2000
    assert 1 <= rt.counters()["max_pending"] <= 8


# -- shutdown -------------------------------------------------------------------


class Sink:
    """Records its final count when destroyed."""

    finals: list = []

    def __init__(self):
        self.n = 0

    def __del__(self):
        Sink.finals.append((self.n, threading.current_thread().name))


def bump(c: Ref) -> None:
    c.value.n += 1


def test_shutdown_applies_everything_already_queued():
    Sink.finals.clear()
    rt = start_runtime(worker_threads=2)

    def main():
        t = trustee_at(1).entrust(Sink())
        for _ in range(10_000):
            t.apply_then(bump)
        # return at once; most requests are still queued

    rt.run(main, thread=0)
    t0 = time.monotonic()
    rt.shutdown()
    assert time.monotonic() - t0 < 10
    assert Sink.finals == [(10_000, "trustee-1")]


def test_shutdown_is_idempotent_and_stops_threads():
    rt = start_runtime(worker_threads=3)
    rt.run(lambda: trustee_at(2).entrust(1).apply(read))
    rt.shutdown()
    rt.shutdown()
    assert rt.state == "stopped"
    assert not any(th.is_alive() for th in rt.threads)
    with pytest.raises(RuntimeStateError):
        rt.spawn(lambda: None)


def test_shutdown_destroys_each_live_property_once():
    rt = start_runtime(worker_threads=3)
    objs = [Tracked() for _ in range(9)]
    ids = [o.id for o in objs]
    handles = [rt.entrust(o, trustee=i % 3) for i, o in enumerate(objs)]
    del objs
    rt.shutdown()
    assert [destroyed[i] for i in ids] == [[f"trustee-{i % 3}"] for i in range(9)]
    del handles  # posting after stop is a no-op


def test_shutdown_from_inside_is_refused(rt1):
    def main():
        with pytest.raises(RuntimeStateError):
            rt1.shutdown()
        return True

    assert rt1.run(main)


def test_stuck_fiber_makes_shutdown_fail():
    rt = start_runtime(worker_threads=1)
    stop = threading.Event()

    def spinner():
        while not stop.is_set():
            yield_now()

    rt.spawn(spinner)
    with pytest.raises(ShutdownError) as info:
        rt.shutdown(timeout=0.3)
    assert info.value.stuck == [(0, 1)]
    stop.set()


def test_entrust_is_refused_once_shutdown_closes_the_gate(rt2):
    # shutdown closes this gate after the drain and before destroying properties
    for w in rt2.workers:
        rt2.call_on(w.index, lambda w: setattr(w, "accepting_entrusts", False)).result(5)

    def main():
        out = []
        for make in (lambda: local_trustee().entrust(1), lambda: trustee_at(1).entrust(1)):
            try:
                make()
            except RuntimeStateError:
                out.append("refused")
        return out

    assert rt2.run(main, thread=0) == ["refused", "refused"]
    with pytest.raises(RuntimeStateError):
        rt2.entrust(1, trustee=1)
    for w in rt2.workers:
        w.accepting_entrusts = True


def test_call_on_runs_in_the_service_context(rt2):
    fut = rt2.call_on(1, lambda w: (w.index, w.scheduler.current.is_service))
    assert fut.result(5) == (1, True)
    assert isinstance(rt2.workers[0], Worker)
