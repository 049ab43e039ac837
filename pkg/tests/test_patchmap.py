import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hotpatch_sim.patchmap import KNUTH, MapFull, RuntimePatchMap, capacity_for


def test_capacity():
    assert capacity_for(32) == 64
    assert capacity_for(1) == 2
    assert RuntimePatchMap(32).capacity == 64


def test_home_uses_top_bits():
    m = RuntimePatchMap(32)
    key = 0x08000C05
    assert m.home(key) == ((key * KNUTH) & 0xFFFFFFFF) >> 26


def test_insert_lookup_replace():
    m = RuntimePatchMap(4)
    assert m.insert(10, "a") is False
    assert m.insert(10, "b") is True
    assert m.get(10) == "b" and len(m) == 1
    value, probes = m.lookup(11)
    assert value is None and probes >= 1


def test_full():
    m = RuntimePatchMap(2)
    m.insert(1, 1)
    m.insert(2, 2)
    m.insert(2, 3)  # replacement is fine
    with pytest.raises(MapFull):
        m.insert(3, 3)


def test_bad_key():
    with pytest.raises(ValueError):
        RuntimePatchMap().insert(-1, 0)


def test_arrays_never_grow():
    m = RuntimePatchMap(32)
    before = (len(m.keys), len(m.values))
    for k in range(32):
        m.insert(0x08000C05 + 4 * k, k)
    assert (len(m.keys), len(m.values)) == before


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers()), max_size=32),
       st.lists(st.integers(0, 2**32 - 1), max_size=20))
def test_matches_linear_scan(ops, probes):
    m = RuntimePatchMap(32)
    oracle: list[list] = []
    for key, value in ops:
        for entry in oracle:
            if entry[0] == key:
                entry[1] = value
                break
        else:
            oracle.append([key, value])
        m.insert(key, value)
    for key in [k for k, _ in ops] + probes:
        expect = next((v for k, v in oracle if k == key), None)
        got, n = m.lookup(key)
        assert got == expect
        assert 1 <= n <= m.capacity


def test_aligned_keys_probe_counts_bounded():
    rng = random.Random(7)
    worst = 0
    for _ in range(200):
        m = RuntimePatchMap(32)
        for k in rng.sample(range(1 << 20), 32):
            m.insert(0x08000C05 + 4 * k, k)
        worst = max(worst, m.max_probes)
    assert worst <= m.capacity
