"""Fixed-capacity open-addressing map from call-site key to patch entry."""

from __future__ import annotations

import math
from typing import Any

KNUTH = 2654435761
LOAD_FACTOR = 0.7


class MapFull(Exception):
    pass


def capacity_for(max_entries: int) -> int:
    """Smallest power of two keeping max_entries at or under the load factor."""
    need = max(1, math.ceil(max_entries / LOAD_FACTOR))
    return 1 << (need - 1).bit_length()


class RuntimePatchMap:
    """Multiplicative hashing (top bits) with linear probing.

    Slots are allocated once; entries are never moved or deleted. Inserting an
    existing key replaces its value in place.
    """

    def __init__(self, max_entries: int = 32):
        if max_entries <= 0:
            raise ValueError("max_entries must be positive")
        self.max_entries = max_entries
        self.capacity = capacity_for(max_entries)
        self.bits = self.capacity.bit_length() - 1
        self.keys: list[int | None] = [None] * self.capacity
        self.values: list[Any] = [None] * self.capacity
        self.count = 0
        self.max_probes = 0

    def home(self, key: int) -> int:
        if self.bits == 0:
            return 0
        return ((key * KNUTH) & 0xFFFFFFFF) >> (32 - self.bits)

    def _find(self, key: int) -> tuple[int, int, bool]:
        """(slot, probes, found); slot is the empty slot to use if not found."""
        idx = self.home(key)
        for probes in range(1, self.capacity + 1):
            k = self.keys[idx]
            if k is None:
                return idx, probes, False
            if k == key:
                return idx, probes, True
            idx = (idx + 1) & (self.capacity - 1)
        return -1, self.capacity, False

    def insert(self, key: int, value) -> bool:
        """Insert or replace. Returns True if an existing key was replaced."""
        if not 0 <= key <= 0xFFFFFFFF:
            raise ValueError("key must be a 32-bit value")
        idx, probes, found = self._find(key)
        if found:
            self.values[idx] = value
            return True
        if self.count >= self.max_entries or idx < 0:
            raise MapFull(f"map holds {self.count} entries (limit {self.max_entries})")
        self.keys[idx] = key
        self.values[idx] = value
        self.count += 1
        self.max_probes = max(self.max_probes, probes)
        return False

    def lookup(self, key: int) -> tuple[Any, int]:
        """(value or None, number of slots probed)."""
        idx, probes, found = self._find(key)
        return (self.values[idx] if found else None), probes

    def get(self, key: int):
        return self.lookup(key)[0]

    def items(self):
        for k, v in zip(self.keys, self.values):
            if k is not None:
                yield k, v

    def __len__(self):
        return self.count

    def __contains__(self, key: int):
        return self._find(key)[2]
