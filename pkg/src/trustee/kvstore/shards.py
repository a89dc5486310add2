"""Key to shard to trustee mapping."""

from __future__ import annotations

from dataclasses import dataclass

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


@dataclass(frozen=True)
class ShardMap:
    shard_count: int
    trustee_count: int = 1

    def __post_init__(self):
        if self.shard_count < 1 or self.trustee_count < 1:
            raise ValueError("shard and trustee counts must be >= 1")

    def shard_of(self, key: bytes) -> int:
        return fnv1a64(key) % self.shard_count

    def trustee_of(self, shard: int) -> int:
        return shard % self.trustee_count
