"""Per-key linearizability check for a register with unique written values.

Each operation is ``(kind, value, invoked, answered)`` with ``kind`` one of
``"w"``/``"r"``. Every write of a key must store a distinct value. A value
together with the reads that returned it forms a cluster. With ``f`` the
earliest answer and ``s`` the latest invocation in a cluster, the cluster
has a forward zone ``(f, s)`` when ``f < s`` and a backward zone ``(s, f)``
otherwise. A history is linearizable exactly when forward zones are
pairwise disjoint and no backward zone lies inside another cluster's
forward zone (Gibbons and Korach, 1997).
"""

from __future__ import annotations

import bisect
from collections import defaultdict
from typing import Any, Hashable, Iterable, NamedTuple

INITIAL_TIME = float("-inf")


class Op(NamedTuple):
    kind: str  # "w" or "r"
    value: Hashable
    invoked: float
    answered: float


def check_register(ops: Iterable[Op], initial: Hashable = None) -> list[str]:
    """Return a list of violations (empty when the history is linearizable).

    ``initial`` is the value observed before any write; it behaves like a
    write that finished before time began.
    """
    clusters: dict[Any, list[tuple[float, float]]] = defaultdict(list)
    writes: dict[Any, Op] = {}
    reads: list[Op] = []
    problems: list[str] = []
    for op in ops:
        if op.answered < op.invoked:
            problems.append(f"operation answered before it was invoked: {op}")
        if op.kind == "w":
            if op.value in writes or op.value == initial:
                problems.append(f"value written twice: {op.value!r}")
            writes[op.value] = op
            clusters[op.value].append((op.invoked, op.answered))
        else:
            reads.append(op)
    clusters[initial].append((INITIAL_TIME, INITIAL_TIME))
    for r in reads:
        if r.value != initial and r.value not in writes:
            problems.append(f"read returned a value that was never written: {r.value!r}")
            continue
        w = writes.get(r.value)
        if w is not None and r.answered < w.invoked:
            problems.append(f"read {r} returned the value of a later write {w}")
        clusters[r.value].append((r.invoked, r.answered))
    if problems:
        return problems

    forward: list[tuple[float, float, Any]] = []
    backward: list[tuple[float, float, Any]] = []
    for value, ivs in clusters.items():
        f = min(a for _, a in ivs)
        s = max(i for i, _ in ivs)
        (forward if f < s else backward).append((f, s, value) if f < s else (s, f, value))
    forward.sort(key=lambda z: z[0])
    for a, b in zip(forward, forward[1:]):
        if b[0] < a[1]:
            problems.append(f"values {a[2]!r} and {b[2]!r} were both current over an overlapping span")
    starts = [z[0] for z in forward]
    for lo, hi, value in backward:
        k = bisect.bisect_left(starts, lo) - 1
        if k >= 0 and forward[k][1] > hi:
            problems.append(f"write of {value!r} is hidden inside the reads of {forward[k][2]!r}")
    return problems


def check_history(history: dict[Hashable, list[Op]], initial: dict | None = None) -> dict[Hashable, list[str]]:
    """Check every key; returns only the keys with violations."""
    initial = initial or {}
    bad = {}
    for key, ops in history.items():
        p = check_register(ops, initial.get(key))
        if p:
            bad[key] = p
    return bad
