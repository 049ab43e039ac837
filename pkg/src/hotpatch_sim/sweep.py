"""Exhaustive power-loss sweeps over patch loading and boot-time recovery.

Load phase: for the scenario's single delivery, cut power after every flash
operation boundary (including before the first) and in the middle of every
program and erase. Each point reboots, recovers and is checked.

Recover phase: for every load-phase point whose reboot had to recover a
sector, replay that recovery from the post-loss image with a second cut at
every boundary and mid-op point of the recovery itself.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .flash import FlashDevice
from .scenario import FaultSpec, ScenarioConfig, compile_patch
from .sim import World

PHASES = ("load", "recover")


class SweepError(ValueError):
    pass


@dataclass
class PointResult:
    index: int
    phase: str
    plan: str
    parent: int | None = None  # load-phase point this recover point starts from
    losses: int = 0
    boots: int = 0  # boots after the first loss, including the converging one
    status: str = ""
    flagged: list[int] = field(default_factory=list)
    inflight: str = ""  # absent | present | partial
    committed_ok: bool = False
    ok: bool = False
    detail: str = ""

    def line(self) -> str:
        flagged = ",".join(map(str, self.flagged)) or "-"
        parent = "-" if self.parent is None else str(self.parent)
        return "\t".join([str(self.index), self.phase, parent, self.plan, str(self.losses), str(self.boots),
                          self.status, flagged, self.inflight, "1" if self.committed_ok else "0",
                          "ok" if self.ok else "FAIL", self.detail or "-"])


HEADER = "index\tphase\tparent\tplan\tlosses\tboots\tstatus\tflagged\tinflight\tcommitted\tverdict\tdetail"


def _only_delivery(cfg: ScenarioConfig):
    if len(cfg.deliveries) != 1:
        raise SweepError(f"sweep needs exactly one patch delivery, scenario has {len(cfg.deliveries)}")
    return compile_patch(cfg, cfg.patch(cfg.deliveries[0].patch))


def _factory(cfg: ScenarioConfig):
    return [compile_patch(cfg, p) for p in cfg.patches if p.install == "factory"]


def _points(programs: int, erases: int, total: int) -> list[FaultSpec]:
    pts = [FaultSpec("after_op", n) for n in range(total + 1)]
    pts += [FaultSpec("mid_program", n) for n in range(1, programs + 1)]
    pts += [FaultSpec("mid_erase", n) for n in range(1, erases + 1)]
    return pts


def _plan_text(f: FaultSpec) -> str:
    return f"{f.kind}({f.n})"


def _load_stop(world: World) -> bool:
    return world.deliveries_done > 0 or world.losses > 0


def _count(ops) -> tuple[int, int]:
    return sum(o.kind == "program" for o in ops), sum(o.kind == "erase" for o in ops)


def _check(world: World, cfg: ScenarioConfig, inflight_patch, res: PointResult, losses: int,
           limit_flagged: bool = True):
    """Fill in the verdict fields of res from a world that has finished booting."""
    store = world.store
    res.losses = losses
    res.flagged = sorted(world.recovery_sectors)
    problems = []
    if world.halted or store is None or not store.ready:
        res.status = "not_converged"
        problems.append("store not clean")
        res.ok = False
        res.detail = "; ".join(problems)
        return
    res.status = "clean"
    stored = {info.key: (info, store.read_code(info)) for _, info in store.patches()}
    rt = world.runtime
    res.committed_ok = True
    for p in _factory(cfg):
        got = stored.get(p.key)
        entry = rt.map.get(p.key)
        if got is None or got[1] != p.code or got[0].tasks != p.tasks or entry is None:
            res.committed_ok = False
            problems.append(f"committed patch {p.name} lost")
    if inflight_patch is not None:
        got = stored.get(inflight_patch.key)
        active = rt.map.get(inflight_patch.key) is not None
        if got is None and not active:
            res.inflight = "absent"
        elif got is not None and got[1] == inflight_patch.code and active:
            res.inflight = "present"
        else:
            res.inflight = "partial"
            problems.append("in-flight patch partially visible")
    if limit_flagged and len(res.flagged) > 1:
        problems.append(f"{len(res.flagged)} sectors flagged")
    if res.boots > losses + 1:
        problems.append(f"{res.boots} boots for {losses} losses")
    res.ok = not problems
    res.detail = "; ".join(problems)


def _reference_load(cfg: ScenarioConfig) -> tuple[int, int, int]:
    world = World(cfg, faults=[])
    world.run(stop=lambda w: w.deliveries_done > 0)
    if world.deliveries_done == 0:
        raise SweepError("the delivery does not complete within the scenario duration")
    ops = [o for o in world.device.ops if o.kind in ("program", "erase")]
    p, e = _count(ops)
    return p, e, p + e


def run_load_point(cfg: ScenarioConfig, index: int, fault: FaultSpec) -> PointResult:
    inflight = _only_delivery(cfg)
    f = FaultSpec(fault.kind, fault.n, "load", 0)
    world = World(cfg, faults=[f])
    world.run(stop=_load_stop)
    res = PointResult(index, "load", _plan_text(f))
    res.boots = world.boots - 1
    _check(world, cfg, inflight, res, world.losses)
    return res


def _post_loss_image(cfg: ScenarioConfig, fault: FaultSpec) -> tuple[bytes, bytes] | None:
    world = World(cfg, faults=[FaultSpec(fault.kind, fault.n, "load", 0)])
    world.run(stop=lambda w: w.deliveries_done > 0, reboot_on_loss=False)
    if world.losses == 0:
        return None
    return world.device.snapshot()


def _boot_from(cfg: ScenarioConfig, image, faults) -> World:
    dev = FlashDevice(cfg.flash.geometry(), cfg.flash.timings())
    dev.restore(image)
    world = World(cfg, device=dev, faults=faults)
    world.boot()
    return world


def run_recover_point(cfg: ScenarioConfig, index: int, parent: int, load_fault: FaultSpec,
                      fault: FaultSpec, image=None) -> PointResult:
    inflight = _only_delivery(cfg)
    if image is None:
        image = _post_loss_image(cfg, load_fault)
    f = FaultSpec(fault.kind, fault.n, "boot", 0)
    world = _boot_from(cfg, image, [f])
    res = PointResult(index, "recover", f"{_plan_text(load_fault)}+{_plan_text(f)}", parent)
    res.boots = world.boots
    # the single-sector limit is a property of one loss; here there are two
    _check(world, cfg, inflight, res, 1 + world.losses, limit_flagged=False)
    return res


def _load_task(args):
    return run_load_point(*args)


def _recover_task(args):
    return run_recover_point(*args)


def _map(fn, tasks, jobs: int):
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=8))


def load_points(cfg: ScenarioConfig) -> list[FaultSpec]:
    _only_delivery(cfg)
    return _points(*_reference_load(cfg))


def sweep_load(cfg: ScenarioConfig, jobs: int = 1) -> list[PointResult]:
    pts = load_points(cfg)
    results = _map(_load_task, [(cfg, i, f) for i, f in enumerate(pts)], jobs)
    return sorted(results, key=lambda r: r.index)


def sweep_recover(cfg: ScenarioConfig, jobs: int = 1) -> list[PointResult]:
    """Second loss at every point of every recovery the load sweep provokes."""
    tasks = []
    index = 0
    for parent, lf in enumerate(load_points(cfg)):
        image = _post_loss_image(cfg, lf)
        if image is None:
            continue
        ref = _boot_from(cfg, image, [])
        ops = [o for o in ref.device.ops if o.kind in ("program", "erase")]
        if not ref.recovery_sectors and not ops:
            continue
        p, e = _count(ops)
        for f in _points(p, e, p + e):
            tasks.append((cfg, index, parent, lf, f, image))
            index += 1
    results = _map(_recover_task, tasks, jobs)
    return sorted(results, key=lambda r: r.index)


def summarize(results: list[PointResult], phase: str, scenario: str) -> str:
    failed = [r for r in results if not r.ok]
    lines = [
        f"scenario: {scenario}",
        f"phase: {phase}",
        f"points: {len(results)}",
        f"converged: {sum(r.status == 'clean' for r in results)}",
        f"committed_preserved: {sum(r.committed_ok for r in results)}",
        f"inflight_absent: {sum(r.inflight == 'absent' for r in results)}",
        f"inflight_present: {sum(r.inflight == 'present' for r in results)}",
        f"inflight_partial: {sum(r.inflight == 'partial' for r in results)}",
        f"max_flagged_sectors: {max((len(r.flagged) for r in results), default=0)}",
        f"points_flagging_over_one_sector: {sum(len(r.flagged) > 1 for r in results)}",
        f"max_boots: {max((r.boots for r in results), default=0)}",
        f"failed: {len(failed)}",
        f"result: {'PASS' if not failed else 'FAIL'}",
    ]
    for r in failed:
        lines.append(f"  point {r.index} {r.plan}: {r.detail}")
    return "\n".join(lines) + "\n"


def write_results(results: list[PointResult], out_dir, phase: str, scenario: str) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{phase}_points.tsv").write_text(HEADER + "\n" + "".join(r.line() + "\n" for r in results))
    summary = summarize(results, phase, scenario)
    (out / f"{phase}_summary.txt").write_text(summary)
    return summary


def sweep(cfg: ScenarioConfig, phase: str, jobs: int = 1) -> list[PointResult]:
    if phase == "load":
        return sweep_load(cfg, jobs)
    if phase == "recover":
        return sweep_recover(cfg, jobs)
    raise SweepError(f"unknown phase {phase!r}")
