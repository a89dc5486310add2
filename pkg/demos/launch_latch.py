"""A body that must block goes through launch() on a Latch-wrapped property."""

from trustee import DelegatedContextViolation, Latch, Runtime, trustee_at

registry: dict = {}


def lookup_then_store(l: Latch) -> int:
    # blocking call to another trustee: fine inside launch, forbidden in apply
    n = registry["config"].apply(lambda c: c.value["limit"])
    l.value.append(n)
    return len(l.value)


def main() -> None:
    with Runtime(worker_threads=3) as rt:

        def body():
            registry["config"] = trustee_at(2).entrust({"limit": 10})
            plain = trustee_at(1).entrust([])
            try:
                plain.apply(lookup_then_store)
            except DelegatedContextViolation as exc:
                print("apply refused:", exc)
            log = trustee_at(1).entrust(Latch([]))
            for _ in range(3):
                print("launch ->", log.launch(lookup_then_store))

        rt.run(body, thread=0)


if __name__ == "__main__":
    main()
