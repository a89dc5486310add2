import pytest

from trustee.errors import DelegatedContextViolation
from trustee.fibers import FiberState, ThreadScheduler


def run_standalone(*entries):
    s = ThreadScheduler()
    fibers = [s.spawn(e) for e in entries]
    s.drain()
    return s, fibers


def test_result_is_recorded():
    s, (f,) = run_standalone(lambda: 42)
    assert f.state is FiberState.DONE and f.result == 42


def test_fifo_start_order():
    out = []
    run_standalone(lambda: out.append("A"), lambda: out.append("B"))
    assert out == ["A", "B"]


def test_strict_interleaving_with_yields():
    out = []
    s = ThreadScheduler()

    def worker(name):
        for _ in range(3):
            out.append(name)
            s.yield_now()

    s.spawn(worker, "A")
    s.spawn(worker, "B")
    s.drain()
    assert out == ["A", "B"] * 3


def test_ten_thousand_fibers_two_yields_each():
    s = ThreadScheduler()
    yields = [0]

    def worker():
        for _ in range(2):
            yields[0] += 1
            s.yield_now()

    for _ in range(10_000):
        s.spawn(worker)
    s.drain()
    assert yields[0] == 20_000
    assert s.completed == 10_000 and s.live == 0


def test_sole_fiber_yield_resumes_immediately():
    s = ThreadScheduler()
    seen = []

    def f():
        s.yield_now()
        seen.append(1)

    s.spawn(f)
    s.drain()
    assert seen == [1]


def test_suspend_and_resume_from_another_fiber():
    s = ThreadScheduler()
    tokens = []
    out = []

    def sleeper():
        out.append(s.suspend(tokens.append))

    def waker():
        tokens.pop().resume("hello")

    s.spawn(sleeper)
    s.spawn(waker)
    s.drain()
    assert out == ["hello"]


def test_wake_tokens_are_single_use():
    s = ThreadScheduler()
    tokens = []
    s.spawn(lambda: s.suspend(tokens.append))
    s.spawn(lambda: (tokens[0].resume(), pytest.raises(RuntimeError, tokens[0].resume)))
    s.drain()


def test_resume_with_error_raises_in_fiber():
    s = ThreadScheduler()
    tokens = []
    caught = []

    def sleeper():
        try:
            s.suspend(tokens.append)
        except ValueError as exc:
            caught.append(exc)

    s.spawn(sleeper)
    s.spawn(lambda: tokens[0].resume(error=ValueError("x")))
    s.drain()
    assert len(caught) == 1


def test_suspend_in_delegated_context_is_a_violation():
    s = ThreadScheduler()
    errors = []

    def body():
        s.current.depth += 1
        try:
            s.suspend()
        except DelegatedContextViolation as exc:
            errors.append(exc)
        finally:
            s.current.depth -= 1

    s.spawn(body)
    s.drain()
    assert len(errors) == 1
    assert isinstance(errors[0], AssertionError)


def test_launch_fiber_may_suspend():
    s = ThreadScheduler()
    tokens = []
    out = []
    s.spawn(lambda: out.append(s.suspend(tokens.append)), launch=True)
    s.spawn(lambda: tokens[0].resume(7))
    s.drain()
    assert out == [7]


def test_service_context_cannot_suspend_or_yield():
    s = ThreadScheduler()
    s._bind()
    with pytest.raises(DelegatedContextViolation):
        s.suspend()
    with pytest.raises(DelegatedContextViolation):
        s.yield_now()


def test_fiber_errors_do_not_kill_the_scheduler():
    s = ThreadScheduler()

    def bad():
        raise ZeroDivisionError

    f1 = s.spawn(bad)
    f2 = s.spawn(lambda: "fine")
    s.drain()
    assert isinstance(f1.error, ZeroDivisionError)
    assert f2.result == "fine"


def test_fibers_are_pooled():
    s = ThreadScheduler(pool_size=4)
    for _ in range(3):
        for _ in range(4):
            s.spawn(lambda: None)
        s.drain()
    assert len(s._pool) == 4
    assert s.spawned == 12


def test_dedicated_thread_refuses_client_fibers():
    s = ThreadScheduler(allow_app_fibers=False)
    with pytest.raises(ValueError):
        s.spawn(lambda: None)
    s.spawn(lambda: None, launch=True)
    s.drain()


def test_no_fibers_and_exit_signal_returns_immediately():
    passes = []
    s = ThreadScheduler(service=lambda: passes.append(1) or False, should_exit=lambda: True)
    s.run()
    assert passes == [1]


def test_service_runs_once_per_rotation():
    s = ThreadScheduler()
    log = []
    s.service = lambda: log.append("svc") or False
    stop = [False]
    s.should_exit = lambda: stop[0]

    def f(name, n):
        for _ in range(n):
            log.append(name)
            s.yield_now()
        if name == "B":
            stop[0] = True

    s.spawn(f, "A", 2)
    s.spawn(f, "B", 2)
    s.run()
    assert log[:6] == ["A", "B", "svc", "A", "B", "svc"]
