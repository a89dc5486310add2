"""Randomized channel round trips shared by the unit and acceptance suites."""

import random

from trustee.channel import KIND_APPLY, KIND_SYSTEM, SHAPE_VAR, SLOT_PAYLOAD, ChannelMatrix, Task, request_size


def _random_task(rng: random.Random) -> Task:
    env = rng.randbytes(8 * rng.randrange(0, 6))
    arg = None
    if rng.random() < 0.5:
        arg = rng.randbytes(rng.choice([0, 1, 7, 8, 30, 100, 700]))
    kind = rng.choice([KIND_APPLY, KIND_SYSTEM])
    return Task(rng.randrange(1, 2**63), rng.randrange(0, 2**63), kind, SHAPE_VAR, env, arg)


def fuzz_round_trips(iterations: int, seed: int = 1) -> tuple[int, int]:
    """Random batches through submit/serve(echo)/poll; returns (batches, mismatches)."""
    rng = random.Random(seed)
    m = ChannelMatrix(1)
    pair = m.pair(0, 0)
    mismatches = 0
    batches = 0
    seen_sizes = []

    def ex(kind, code, prop, env, arg):
        return (kind, code, prop, bytes(env), None if arg is None else bytes(arg))

    for _ in range(iterations):
        tasks = [_random_task(rng) for _ in range(rng.randrange(1, 20))]
        while tasks:
            n = pair.try_submit_batch(tasks)
            batches += 1
            used = sum(request_size(t) for t in tasks[:n])
            seen_sizes.append(used)
            pair.poll_serve(ex)
            out = pair.poll_responses()
            want = [(t.kind, t.code, t.prop, t.env, t.arg) for t in tasks[:n]]
            if out != want or used > SLOT_PAYLOAD or n == 0:
                mismatches += 1
                break
            del tasks[:n]
    m.close()
    return batches, mismatches
