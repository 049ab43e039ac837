import dataclasses

from hotpatch_sim.report import max_flash_blocking_ns, max_probes, report
from hotpatch_sim.scenario import ScenarioConfig, bundled
from hotpatch_sim.sim import simulate
from hotpatch_sim.trace import Event


def test_empty_report_is_all_zero():
    text = report([])
    assert "(all)  0     0    0    0" in text
    assert "inline    0        0" in text
    assert "dispatch  0        0" in text
    assert "(max)  0      0" in text
    assert "verdict: PASS" in text


def test_brake_report_blocking():
    cfg = dataclasses.replace(bundled("brake_append_only"), duration_us=1_200_000)
    events = simulate(cfg).trace
    assert max_flash_blocking_ns(events) == 68_660
    text = report(events)
    assert "(max)    26     68.66" in text
    assert "dispatch  3.9" in text and "inline    2.1" in text


def test_probe_maxima_with_full_map():
    # 32 patches on 32 distinct sites, all targeting one task
    sites = [{"name": f"s{i}", "body_us": 1} for i in range(30)]
    calls = [{"site": f"s{i}"} for i in range(30)]
    patches = [{"name": f"p{i}", "site": f"s{i}", "tasks": ["t"], "install": "factory",
                "program": "SET_STATUS NORMAL"} for i in range(30)]
    patches += [{"name": f"q{ph}", "site": f"t.{ph}", "tasks": ["t"], "install": "factory",
                 "program": "SET_STATUS NORMAL"} for ph in ("entry", "periodic")]
    cfg = ScenarioConfig.from_dict({
        "name": "full", "duration_us": 5000, "sites": sites,
        "tasks": [{"name": "t", "priority": 2, "period_us": 1000,
                   "periodic": {"body_us": 10, "buffer_us": 5, "calls": calls}},
                  {"name": "rx", "priority": 1, "receiver": True}],
        "patches": patches,
    })
    world = simulate(cfg)
    assert len(world.runtime.map) == 32
    assert 1 <= max_probes(world.trace) <= world.runtime.map.max_probes
    assert "lookup probes" in report(world.trace)


def test_multiple_tasks_rows():
    events = [Event(0, "a", "JOB_END", (("response_ns", "1000"),)),
              Event(5, "b", "JOB_END", (("response_ns", "3000"),)),
              Event(6, "b", "DEADLINE_MISS", (("response_ns", "3000"),))]
    text = report(events)
    assert "a      1     1    1    0" in text
    assert "(all)  2     1    3    1" in text
