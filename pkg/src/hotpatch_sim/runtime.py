"""RAM-side patch runtime: readiness mask, patch map, dispatcher, placeholders."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import program
from .patchmap import RuntimePatchMap
from .program import NORMAL, Base, CorruptProgram, DispatchStatus
from .store import PatchInfo
from .timing import MAX_TASKS, TimingState, delay
from .work import Cpu


@dataclass(frozen=True)
class CostProfile:
    name: str
    placeholder_ns: int  # readiness bit clear
    dispatch_ns: int  # readiness bit set: check + dispatcher call
    delay_ns: int  # fixed cost of the delay call


PROFILES = {
    "freertos": CostProfile("freertos", 2_100, 3_900, 2_000),
    "zephyr": CostProfile("zephyr", 1_500, 3_300, 1_200),
}


class Phase(enum.Enum):
    ENTRY = "entry"
    PERIODIC = "periodic"
    EXIT = "exit"


@dataclass
class PatchEntry:
    info: PatchInfo
    code: bytes
    decoded: list | None = None
    error: str | None = None


@dataclass
class DispatchResult:
    status: DispatchStatus
    result: int = 0
    wcet_ns: int = 0
    probes: int = 0
    matched: bool = False


@dataclass
class CallOutcome:
    status: DispatchStatus
    result: int


@dataclass
class PhaseOutcome:
    status: DispatchStatus
    broke: bool


class RuntimeState:
    def __init__(self, max_patches: int = 32, var_names=(), n_vars: int | None = None,
                 profile: CostProfile = PROFILES["freertos"]):
        self.var_names = list(var_names)
        n = len(self.var_names) if n_vars is None else n_vars
        if n < len(self.var_names):
            raise ValueError("n_vars smaller than the number of named variables")
        self.shared_vars = [0] * n
        self.readiness = 0
        self.map = RuntimePatchMap(max_patches)
        self.timing = TimingState()
        self.profile = profile

    def footprint(self) -> dict:
        """Sizes of every fixed allocation (for static-memory checks)."""
        return {
            "map_capacity": self.map.capacity,
            "map_keys": len(self.map.keys),
            "map_values": len(self.map.values),
            "shared_vars": len(self.shared_vars),
            "timing_buffers": len(self.timing.active_ns),
            "readiness_bits": MAX_TASKS,
        }

    def register_patch(self, info: PatchInfo, code: bytes) -> bool:
        """Add or replace (same key) a patch; returns True on replacement."""
        entry = PatchEntry(info, bytes(code))
        try:
            entry.decoded = program.decode(entry.code, len(self.shared_vars))
        except CorruptProgram as exc:
            entry.error = str(exc)
        replaced = self.map.insert(info.key, entry)
        if replaced:
            self.readiness = 0
            for _, e in self.map.items():
                self.readiness |= e.info.tasks
        else:
            self.readiness |= info.tasks
        self.readiness &= 0xFFFFFFFF
        return replaced

    def lookup(self, key: int) -> tuple[PatchEntry | None, int]:
        return self.map.lookup(key)

    def dispatch(self, pid: int, site: int, emit=None) -> DispatchResult:
        """Find and run the patch for (site, pid); updates the timing buffer."""
        emit = emit or (lambda kind, **d: None)
        entry, probes = self.map.lookup(site)
        if entry is None or not (entry.info.tasks >> pid) & 1:
            emit("DISPATCH", site=f"0x{site:08x}", hit=0, probes=probes, status=str(NORMAL))
            return DispatchResult(NORMAL, probes=probes)
        if entry.decoded is None:
            emit("FAULT", reason="corrupt_program", site=f"0x{site:08x}", detail=entry.error)
            emit("DISPATCH", site=f"0x{site:08x}", hit=1, probes=probes, status=str(NORMAL))
            return DispatchResult(NORMAL, probes=probes, matched=True)
        run = program.execute(entry.decoded, self.shared_vars)
        wcet = entry.info.wcet_ns
        remaining, exhausted = self.timing.deduct(pid, wcet)
        emit("DISPATCH", site=f"0x{site:08x}", hit=1, probes=probes, status=str(run.status),
             wcet_ns=wcet, buffer_left_ns=remaining)
        if exhausted:
            emit("BUFFER_EXHAUSTED", site=f"0x{site:08x}", wcet_ns=wcet)
        return DispatchResult(run.status, run.result, wcet, probes, True)

    def _decide(self, ctx, site: int) -> tuple[DispatchResult, list]:
        """Readiness check and dispatch; returns the result and the CPU segments to charge."""
        if (self.readiness >> ctx.pid) & 1:
            ctx.emit("PLACEHOLDER", site=f"0x{site:08x}", path="dispatch", cost_ns=self.profile.dispatch_ns)
            res = self.dispatch(ctx.pid, site, ctx.emit)
            segs = [Cpu(self.profile.dispatch_ns, "dispatch")]
            if res.wcet_ns:
                segs.append(Cpu(res.wcet_ns, "patch"))
            return res, segs
        ctx.emit("PLACEHOLDER", site=f"0x{site:08x}", path="inline", cost_ns=self.profile.placeholder_ns)
        return DispatchResult(NORMAL), [Cpu(self.profile.placeholder_ns, "placeholder")]

    def placeholder_general(self, ctx, site: int, original=None, result_slot: bool = True):
        """Placeholder at the top of a general function.

        `original` is a generator function for the function body returning its
        result. Its logic up to the first yielded segment runs at the same
        instant as the dispatch, so arguments cannot be disturbed by a
        preempting task in between. Returns a CallOutcome.
        """
        res, segs = self._decide(ctx, site)
        status = res.status
        if status.base in (Base.SKIP_AND_CONTINUE, Base.SKIP_AND_BREAK):
            ctx.emit("FAULT", reason="contract_violation", site=f"0x{site:08x}", status=str(status))
            status = DispatchStatus(Base.SKIP, status.overwrite_result)
        if status.overwrite_result and not result_slot:
            ctx.emit("FAULT", reason="contract_violation", site=f"0x{site:08x}", status=str(status))
            status = DispatchStatus(status.base, False)
        result = 0
        body = None
        if status.base is Base.NORMAL and original is not None:
            body = original()
            try:
                first = next(body)
            except StopIteration as stop:
                result = stop.value or 0
                body = None
        for seg in segs:
            yield seg
        if body is not None:
            yield first
            while True:
                try:
                    seg = next(body)
                except StopIteration as stop:
                    result = stop.value or 0
                    break
                yield seg
        if status.overwrite_result:
            result = res.result
        return CallOutcome(status, result)

    def placeholder_task_phase(self, ctx, phase: Phase, site: int, buffer_ns: int, original=None):
        """Placeholder at the start of a task entry/periodic/exit section.

        Loads the section's timing buffer, dispatches, runs the body unless
        skipped, and ends with the delay (except on skip-and-break, which leaves
        the loop straight away).
        """
        self.timing.section_enter(ctx.pid, buffer_ns, phase.value)
        res, segs = self._decide(ctx, site)
        for seg in segs:
            yield seg
        status = res.status
        if phase is not Phase.PERIODIC and status.base in (Base.SKIP_AND_CONTINUE, Base.SKIP_AND_BREAK):
            ctx.emit("FAULT", reason="contract_violation", site=f"0x{site:08x}", status=str(status))
            status = DispatchStatus(Base.SKIP, status.overwrite_result)
        if status.overwrite_result:
            ctx.emit("FAULT", reason="contract_violation", site=f"0x{site:08x}", status=str(status))
            status = DispatchStatus(status.base, False)
        if status.base is Base.NORMAL and original is not None:
            yield from original()
        broke = phase is Phase.PERIODIC and status.base is Base.SKIP_AND_BREAK
        if not broke:
            yield from delay(self.timing, ctx, self.profile.delay_ns)
        return PhaseOutcome(status, broke)
