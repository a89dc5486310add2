"""Entrust a counter, share it between threads, and increment it both ways."""

from trustee import Ref, Runtime, local_trustee, spawn, trustee_at, yield_now


def incr(c: Ref) -> int:
    c.value += 1
    return c.value


def main() -> None:
    with Runtime(worker_threads=2) as rt:

        def body():
            ct = local_trustee().entrust(17)
            print("local apply ->", ct.apply(incr))

            other = trustee_at(1).entrust(0)
            helper = spawn(lambda t: [t.apply(incr) for _ in range(1000)], other.clone(), thread=1)
            for _ in range(1000):
                other.apply(incr)
            helper.join()
            print("two threads, 2000 increments ->", other.apply(lambda c: c.value))

            seen = []
            for _ in range(5):
                other.apply_then(incr, seen.append)
            while len(seen) < 5:
                yield_now()
            print("apply_then callbacks saw", seen)

        rt.run(body)
        print("counters:", {k: v for k, v in rt.counters().items() if k in ("issued", "served", "batches")})


if __name__ == "__main__":
    main()
