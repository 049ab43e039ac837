"""Acceptance criteria A1-A7, one test each, each reporting a PASS/FAIL line."""

import os
import random
import time

import pytest

from hotpatch_sim.patchmap import RuntimePatchMap
from hotpatch_sim.program import assemble
from hotpatch_sim.runtime import PROFILES, RuntimeState
from hotpatch_sim.scenario import SITE_BASE, ScenarioConfig, bundled, bundled_names, compile_patch
from hotpatch_sim.sim import World, simulate, task_projection
from hotpatch_sim.store import PatchInfo
from hotpatch_sim.sweep import load_points, sweep
from hotpatch_sim.trace import dumps

JOBS = max(1, min(8, os.cpu_count() or 1))
EINVAL = 0xFFFFFFEA
# worst probe count (hits and misses) over the seeded A7 key sets; a regression bound
FROZEN_MAX_PROBES = 20

_traces: dict[str, str] = {}


def _run(name: str):
    start = time.perf_counter()
    world = simulate(bundled(name))
    elapsed = time.perf_counter() - start
    _traces.setdefault(name, dumps(world.trace))
    return world, elapsed


# -- A1 ---------------------------------------------------------------------

def test_a1_real_time_preservation(criterion):
    good, t_good = _run("brake_append_only")
    bad, t_bad = _run("brake_conventional_erase")
    assert good.cfg.duration_us >= 10_000_000 and bad.cfg.duration_us >= 10_000_000
    assert good.cfg.task("brake").deadline_us == 500
    miss_good = good.verdict().counts.get("DEADLINE_MISS", 0)
    miss_bad = bad.verdict().counts.get("DEADLINE_MISS", 0)
    # the patch is for an unrelated lower-priority task
    (patch,) = good.cfg.patches
    assert "brake" not in patch.tasks
    assert good.deliveries_done == 1 and bad.deliveries_done == 1
    ok = miss_good == 0 and miss_bad >= 1 and t_good < 10 and t_bad < 10
    criterion("A1", ok, f"append-only misses={miss_good}, conventional misses={miss_bad}, "
                        f"wall={t_good:.2f}s/{t_bad:.2f}s (limit 10s each)")
    assert ok


# -- A2 ---------------------------------------------------------------------

def _torn_write_sectors(cfg, points):
    """Per point, the sectors holding a partially written code block or record."""
    world = World(cfg, faults=[])
    world.run(stop=lambda w: w.deliveries_done > 0)
    g = cfg.flash.geometry()
    units = [op.target for op in world.device.ops if op.kind == "program"]
    table_end = g.first_unit(g.table_sectors[1])
    # group 0 is the code block, group 1 the record; each is one write
    group = [0 if u >= table_end else 1 for u in units]
    out = []
    for f in points:
        if f.kind == "mid_program":
            partial = {group[f.n - 1]}
        else:
            done = group[:f.n]
            partial = {x for x in set(done) if done.count(x) < group.count(x)}
        out.append({g.sector_of_unit(u) for u, x in zip(units, group) if x in partial})
    return out


def test_a2_power_loss_commit_atomicity(criterion):
    cfg = bundled("recovery_torture")
    (delivery,) = cfg.deliveries
    assert len(compile_patch(cfg, cfg.patch(delivery.patch)).code) == 172
    results = sweep(cfg, "load", JOBS)
    assert len(results) == len(load_points(cfg))
    converged = sum(r.status == "clean" for r in results)
    committed = sum(r.committed_ok for r in results)
    atomic = sum(r.inflight in ("absent", "present") for r in results)
    single = sum(len(r.flagged) <= 1 for r in results)
    n = len(results)
    # supplementary: sectors holding the interrupted write itself
    torn_spans = max(len(s) for s in _torn_write_sectors(cfg, load_points(cfg)))
    ok = converged == committed == atomic == single == n
    criterion("A2", ok, f"{n} points: converged={converged}, committed preserved={committed}, "
                        f"in-flight absent-or-present={atomic}, at most one sector flagged={single} "
                        f"(sectors holding a torn write per point: max {torn_spans})")
    if not ok:
        two = [r.plan for r in results if len(r.flagged) > 1]
        print("A2 points flagging more than one sector: " + ", ".join(two))
    assert ok


# -- A3 ---------------------------------------------------------------------

def test_a3_recovery_resumability(criterion):
    cfg = bundled("recovery_torture")
    results = sweep(cfg, "recover", JOBS)
    n = len(results)
    converged = sum(r.status == "clean" for r in results)
    bounded = sum(r.boots <= r.losses + 1 for r in results)
    committed = sum(r.committed_ok for r in results)
    partial = sum(r.inflight == "partial" for r in results)
    ok = n > 0 and converged == bounded == committed == n and partial == 0
    criterion("A3", ok, f"{n} points: converged={converged}, within losses+1 boots={bounded}, "
                        f"committed preserved={committed}, max boots={max(r.boots for r in results)}")
    assert ok


# -- A4 ---------------------------------------------------------------------

def _timing_cfg(buffer_us: int, wcet_us: int | None, site: str) -> ScenarioConfig:
    patches = []
    if wcet_us is not None:
        patches = [{"name": "p", "site": site, "tasks": ["ctl"], "install": "factory",
                    "wcet_us": wcet_us, "program": "SET_VAR x 1\nSET_STATUS NORMAL"}]
    return ScenarioConfig.from_dict({
        "name": "timing", "duration_us": 10_000, "variables": ["x"],
        "sites": [{"name": "f", "body_us": 7}],
        "tasks": [
            {"name": "ctl", "priority": 3, "period_us": 1000, "iterations": 5,
             "entry": {"body_us": 3, "buffer_us": buffer_us},
             "periodic": {"body_us": 40, "buffer_us": buffer_us, "calls": [{"site": "f"}]},
             "exit": {"body_us": 2, "buffer_us": buffer_us}},
            {"name": "bg", "priority": 2, "period_us": 5000, "periodic": {"body_us": 300}},
            {"name": "rx", "priority": 1, "receiver": True},
        ],
        "patches": patches,
    })


def _sections(world):
    ends = [e for e in world.trace if e.kind == "SECTION_END" and e.task == "ctl"]
    demand = [(e.get("phase"), e.int("cpu_ns") - e.int("placeholder_ns")) for e in ends]
    total = [e.int("cpu_ns") for e in ends]
    return demand, total


def test_a4_timing_invariance(criterion):
    p = PROFILES["freertos"]
    delta = p.dispatch_ns - p.placeholder_ns
    checked = 0
    mismatches = []
    for buffer_us in (10, 15):
        base_demand, base_total = _sections(simulate(_timing_cfg(buffer_us, None, "f")))
        for site in ("f", "ctl.periodic"):
            for w in range(buffer_us + 1):
                world = simulate(_timing_cfg(buffer_us, w, site))
                assert world.verdict().ok
                demand, total = _sections(world)
                checked += 1
                if demand != base_demand:
                    mismatches.append((buffer_us, site, w))
                # every placeholder of ctl takes the dispatch path once the bit is set
                per_section = {"entry": 1, "periodic": 2, "exit": 1}
                expect = [b + delta * per_section[ph] for b, (ph, _) in zip(base_total, demand)]
                if total != expect:
                    mismatches.append((buffer_us, site, w, "total"))
    ok = not mismatches
    criterion("A4", ok, f"{checked} (B, w, site) runs: section demand equal to the patch-free run "
                        f"to the ns in {checked - len(mismatches)}")
    assert ok, mismatches


# -- A5 ---------------------------------------------------------------------

def _guard(limit_ok, bad_result):
    def oracle(v):
        return ("NORMAL", None) if limit_ok(v) else ("SKIP|OVERWRITE_RESULT", bad_result)
    return oracle


ORACLES = {
    "cve_2021_32020": ("req_len", _guard(lambda v: v <= 512, EINVAL)),
    "cve_2021_31571": ("n_items", _guard(lambda v: v < 0x3FFFFFFF, 0)),
    "cve_2021_31572": ("size", _guard(lambda v: v < 0xFFFFFFF0, 0)),
    "cve_2020_10023": ("arg_len", _guard(lambda v: v < 256, EINVAL)),
    "cve_2020_10024": ("call_id", _guard(lambda v: v < 0x80000000, EINVAL)),
    "cve_2020_10067": ("copy_size", _guard(lambda v: v <= 0xFFFF0000, EINVAL)),
    "cve_2023_3725": ("frame_len", _guard(lambda v: v <= 64, EINVAL)),
}


def _returns(world, task):
    return [(e.get("status"), int(e.get("result"))) for e in world.trace
            if e.kind == "CALL_RETURN" and e.task == task]


def test_a5_task_isolation(criterion):
    names = [n for n in bundled_names() if n.startswith("cve_")]
    assert sorted(names) == sorted(ORACLES)
    bad = []
    for name in names:
        cfg = bundled(name)
        patched = simulate(cfg)
        plain = simulate(cfg.without_patches())
        assert patched.verdict().ok and plain.verdict().ok
        (spec,) = cfg.patches
        for t in cfg.tasks:
            if t.name in spec.tasks:
                continue
            if task_projection(patched.trace, t.name) != task_projection(plain.trace, t.name):
                bad.append(f"{name}:{t.name} trace differs")
        (target,) = spec.tasks
        var, oracle = ORACLES[name]
        (call,) = cfg.task(target).periodic.calls
        values = call.inputs[var]
        original = _returns(plain, target)
        got = _returns(patched, target)
        assert len(got) == len(original) > 0
        for job, ((status, result), (_, orig_result)) in enumerate(zip(got, original)):
            exp_status, exp_result = oracle(values[job % len(values)])
            exp_result = orig_result if exp_result is None else exp_result
            if (status, result) != (exp_status, exp_result):
                bad.append(f"{name}:{target} job {job}")
                break
        if not any(s != "NORMAL" for s, _ in got):
            bad.append(f"{name}: the guard never fired")
    ok = not bad
    criterion("A5", ok, f"{len(names)} CVE scenarios: non-targeted traces identical, targeted results "
                        f"match the program oracle" + ("" if ok else f"; failures: {bad}"))
    assert ok


# -- A6 ---------------------------------------------------------------------

def test_a6_static_memory_and_determinism(criterion):
    rt = RuntimeState(32, ["x"])
    before = rt.footprint()
    code = assemble("SET_RESULT 1", ["x"])
    for k in range(32):
        rt.register_patch(PatchInfo(1 << (k % 31), SITE_BASE + 4 * k + 1, 0, 0), code)
    after = rt.footprint()
    assert len(rt.map) == 32
    differing = []
    for name in bundled_names():
        first = _traces.get(name)
        if first is None:
            first = dumps(simulate(bundled(name)).trace)
        second = dumps(simulate(bundled(name)).trace)
        if first != second:
            differing.append(name)
    ok = before == after and not differing
    criterion("A6", ok, f"footprint unchanged after 32 registrations={before == after} "
                        f"(map capacity {after['map_capacity']}); byte-identical reruns of "
                        f"{len(bundled_names()) - len(differing)}/{len(bundled_names())} bundled scenarios")
    assert ok


# -- A7 ---------------------------------------------------------------------

def test_a7_lookup_properties(criterion):
    rng = random.Random(2024)
    worst = 0
    mismatches = 0
    for _ in range(1000):
        m = RuntimePatchMap(32)
        keys = [SITE_BASE + 4 * k + 1 for k in rng.sample(range(1 << 16), 32)]
        oracle = []
        for i, key in enumerate(keys):
            m.insert(key, i)
            oracle.append((key, i))
        assert m.capacity == 64 and len(m) == 32
        absent = [SITE_BASE + 4 * rng.randrange(1 << 16) + 1 for _ in range(32)]
        for key in keys + absent:
            expect = next((v for k, v in oracle if k == key), None)
            got, probes = m.lookup(key)
            mismatches += got != expect
            assert probes <= m.capacity
            worst = max(worst, probes)
    ok = mismatches == 0 and worst <= FROZEN_MAX_PROBES
    criterion("A7", ok, f"1000 key sets at 32/64: oracle mismatches={mismatches}, "
                        f"max probes={worst} (bound {FROZEN_MAX_PROBES}, capacity 64)")
    assert ok
