import pytest

from hotpatch_sim.scenario import FaultSpec, ScenarioConfig
from hotpatch_sim.sweep import (
    HEADER, SweepError, load_points, run_load_point, sweep, summarize, write_results,
)


def scenario(deliveries=True) -> ScenarioConfig:
    return ScenarioConfig.from_dict({
        "name": "mini",
        "duration_us": 30_000,
        "variables": ["n"],
        "sites": [{"name": "f", "body_us": 5}],
        "tasks": [
            {"name": "a", "priority": 2, "period_us": 1000,
             "periodic": {"body_us": 20, "buffer_us": 5, "calls": [{"site": "f", "inputs": {"n": [1]}}]}},
            {"name": "rx", "priority": 1, "receiver": True},
        ],
        "patches": [
            {"name": "old", "site": "f", "tasks": ["a"], "install": "factory", "size": 24,
             "program": "SET_STATUS NORMAL"},
            {"name": "new", "site": "a.periodic", "tasks": ["a"], "size": 40, "program": "SET_STATUS NORMAL"},
        ],
        "deliveries": [{"patch": "new", "at_us": 2000}] if deliveries else [],
    })


def test_needs_exactly_one_delivery():
    with pytest.raises(SweepError):
        sweep(scenario(deliveries=False), "load")


def test_unknown_phase():
    with pytest.raises(SweepError):
        sweep(scenario(), "nap")


def test_point_enumeration():
    pts = load_points(scenario())
    # 40 bytes of code (5 units) + 32-byte record (4 units) = 9 programs, no erases
    assert [p.kind for p in pts].count("after_op") == 10
    assert [p.kind for p in pts].count("mid_program") == 9
    assert [p.kind for p in pts].count("mid_erase") == 0


def test_single_points():
    cfg = scenario()
    before = run_load_point(cfg, 0, FaultSpec("after_op", 0))
    assert before.ok and before.inflight == "absent" and before.flagged == []
    done = run_load_point(cfg, 9, FaultSpec("after_op", 9))
    assert done.ok and done.inflight == "present"
    torn = run_load_point(cfg, 3, FaultSpec("mid_program", 3))
    assert torn.ok and torn.inflight == "absent" and torn.flagged == [1]


def test_load_sweep_converges_everywhere(tmp_path):
    cfg = scenario()
    results = sweep(cfg, "load")
    assert [r.index for r in results] == list(range(len(results)))
    for r in results:
        assert r.status == "clean" and r.committed_ok and r.inflight in ("absent", "present")
        assert r.boots <= r.losses + 1
    # a record torn after its code was complete leaves orphan code behind it,
    # so the boot recovers the table sector and then the code sector
    torn = [r for r in results if not r.ok]
    assert {r.detail for r in torn} == {"2 sectors flagged"}
    assert all(r.flagged == [0, 1] for r in torn)
    summary = write_results(results, tmp_path, "load", cfg.name)
    assert f"points_flagging_over_one_sector: {len(torn)}" in summary
    rows = (tmp_path / "load_points.tsv").read_text().splitlines()
    assert rows[0] == HEADER and len(rows) == len(results) + 1
    assert (tmp_path / "load_summary.txt").read_text() == summary


def test_recover_sweep_all_ok():
    cfg = scenario()
    results = sweep(cfg, "recover")
    assert results and all(r.ok for r in results)
    assert max(r.boots for r in results) <= 2
    assert all(r.boots <= r.losses + 1 for r in results)


def test_parallel_matches_serial():
    cfg = scenario()
    serial = [r.line() for r in sweep(cfg, "load", jobs=1)]
    parallel = [r.line() for r in sweep(cfg, "load", jobs=2)]
    assert serial == parallel


def test_summary_lists_failures():
    cfg = scenario()
    results = sweep(cfg, "load")
    results[0].ok = False
    results[0].detail = "boom"
    text = summarize(results, "load", "mini")
    assert "result: FAIL" in text and "boom" in text
