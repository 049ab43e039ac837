"""Discrete-event simulation of a fixed-priority preemptive RTOS running the patch runtime.

Task code is written as generators yielding work segments (see work.py).
The world advances time segment by segment, preempting CPU work whenever a
higher-priority task is released. Flash program commands are non-preemptible.
Erases are either non-preemptible or suspendable, in which case a preemption
first pays the suspend latency.

Flash operations issued by the receiver are executed on the device
immediately and their logged durations are then replayed as segments. Only
the receiver and the boot code touch flash, and dispatch reads only RAM, so
the state change happening at the start of the replayed interval is not
observable by any task.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

from . import program
from .flash import EraseProgress, FlashDevice, FlashOp, PowerLost
from .runtime import PROFILES, CostProfile, Phase, RuntimeState
from .scenario import PHASES, CompiledPatch, ScenarioConfig, compile_patch
from .store import ConventionalStore, PatchInfo, PatchStore, ScanStatus, StoreError
from .trace import Event, Verdict, make_event, verdict
from .timeunits import us_to_ns
from .work import Block, Cpu, EraseWork, PowerFail

FRAME_PAYLOAD = 8
_HEADER = struct.Struct("<III")  # tasks, key, wcet_ns
_LEN = struct.Struct("<H")
MAX_BOOTS_PER_RESET = 64


class ReassemblyOverflow(Exception):
    pass


class SimError(Exception):
    pass


@dataclass
class JobEnd:
    final: bool = False


@dataclass
class Wait:
    """Receiver idles until a bus frame is available."""


@dataclass(frozen=True)
class Frame:
    arrival_ns: int
    payload: bytes
    delivery: int


def encode_message(p: CompiledPatch) -> bytes:
    body = _HEADER.pack(p.tasks, p.key, p.wcet_ns) + p.code
    return _LEN.pack(len(body)) + body


def frames_for(p: CompiledPatch, start_ns: int, gap_ns: int, delivery: int = 0) -> list[Frame]:
    msg = encode_message(p)
    return [Frame(start_ns + i * gap_ns, msg[off:off + FRAME_PAYLOAD], delivery)
            for i, off in enumerate(range(0, len(msg), FRAME_PAYLOAD))]


class Reassembler:
    """RAM staging buffer for one message at a time."""

    def __init__(self, max_patch_size: int):
        self.limit = _LEN.size + _HEADER.size + max_patch_size
        self.buf = bytearray()
        self.expected: int | None = None

    def reset(self):
        self.buf.clear()
        self.expected = None

    def push(self, payload: bytes) -> tuple[int, int, int, bytes] | None:
        if len(payload) > FRAME_PAYLOAD:
            raise ReassemblyOverflow("frame payload longer than 8 bytes")
        self.buf += payload
        if self.expected is None and len(self.buf) >= _LEN.size:
            body = _LEN.unpack_from(self.buf)[0]
            self.expected = _LEN.size + body
            if self.expected > self.limit or body <= _HEADER.size:
                self.reset()
                raise ReassemblyOverflow(f"message body of {body} bytes does not fit the staging buffer")
        if self.expected is None or len(self.buf) < self.expected:
            return None
        if len(self.buf) > self.expected:
            self.reset()
            raise ReassemblyOverflow("frame data past the announced message length")
        tasks, key, wcet = _HEADER.unpack_from(self.buf, _LEN.size)
        code = bytes(self.buf[_LEN.size + _HEADER.size:])
        self.reset()
        return tasks, key, wcet, code


class TaskRun:
    """Scheduler state of one task; also the context handed to runtime code."""

    def __init__(self, world: World, pid: int, spec):
        self.world = world
        self.pid = pid
        self.spec = spec
        self.name = spec.name
        self.priority = spec.priority
        self.receiver = spec.receiver
        self.gen = None
        self.seg = None
        self.remaining = 0
        self.erase: EraseProgress | None = None
        self.erase_start = 0
        self.blocking_start = 0
        self.suspended_erase = None
        self.period = 0
        self.deadline = 0
        self.pending: deque[tuple[int, int]] = deque()  # (job, release)
        self.job = -1
        self.release = 0
        self.active = False
        self.done = False
        self.waiting = False
        self.next_release: int | None = None
        self.releases = 0
        self.cpu_ns = 0
        self.overhead_ns = 0

    def emit(self, kind: str, **details):
        self.world.emit(self.name, kind, details)

    @property
    def ready(self) -> bool:
        if self.done:
            return False
        if self.receiver:
            return not self.waiting or bool(self.world.rx_queue)
        return self.active


class World:
    """One simulated device: flash, store, runtime and tasks."""

    def __init__(self, cfg: ScenarioConfig, profile: str | None = None,
                 device: FlashDevice | None = None, faults=None, install_factory: bool = True):
        self.cfg = cfg
        self.profile: CostProfile = PROFILES[profile or cfg.profile]
        self.geometry = cfg.flash.geometry()
        self.timings = cfg.flash.timings()
        self.faults = list(cfg.faults if faults is None else faults)
        self.site_ids = cfg.site_ids()
        self.patches = {p.name: compile_patch(cfg, p) for p in cfg.patches}
        self.site_programs = {s.name: program.decode(program.assemble(s.program, cfg.variables), len(cfg.variables))
                              for s in cfg.sites}
        self.site_body = {s.name: us_to_ns(s.body_us) for s in cfg.sites}
        self.frame_rx_ns = us_to_ns(cfg.runtime.frame_rx_us)
        self.boot_base_ns = us_to_ns(cfg.runtime.boot_base_us)
        self.boot_per_patch_ns = us_to_ns(cfg.runtime.boot_per_patch_us)
        self.end_ns = us_to_ns(cfg.duration_us)
        self.trace: list[Event] = []
        self.now = 0
        self.boots = 0
        self.boot_end_ns = 0
        self.losses = 0
        self.scan_log: list[tuple[int, str, int | None]] = []  # (boot, status, sector)
        self.recovery_sectors: set[int] = set()
        self.halted = False
        self.deliveries_done = 0
        if device is None:
            device = FlashDevice(self.geometry, self.timings)
            if install_factory:
                self._install_factory(device)
        self.device = device
        frames: list[Frame] = []
        for i, d in enumerate(cfg.deliveries):
            frames += frames_for(self.patches[d.patch], us_to_ns(d.at_us), us_to_ns(d.frame_gap_us), i)
        frames.sort(key=lambda f: (f.arrival_ns, f.delivery))
        self.bus: deque[Frame] = deque(frames)
        self.rx_queue: deque[Frame] = deque()
        self.store: PatchStore | None = None
        self.runtime: RuntimeState | None = None
        self.tasks: list[TaskRun] = []
        self._boot_flash_ns = 0

    # -- helpers ----------------------------------------------------------
    def emit(self, task: str, kind: str, details: dict):
        self.trace.append(make_event(self.now, task, kind, details))

    def _new_store(self, device: FlashDevice, on_event=None) -> PatchStore:
        sc = self.cfg.store
        if sc.mode == "conventional":
            return ConventionalStore(device, sc.max_patch_size, on_event, sc.erase_suspendable)
        return PatchStore(device, sc.max_patch_size, on_event)

    def _install_factory(self, device: FlashDevice):
        store = self._new_store(device)
        store.mount()
        for spec in self.cfg.patches:
            if spec.install == "factory":
                p = self.patches[spec.name]
                store.load_patch(p.code, p.tasks, p.key, p.wcet_ns)
        device.ops.clear()
        device.clock_ns = 0

    def _fault_plan(self, at: str, index: int):
        for f in self.faults:
            if f.at == at and f.index == index and f.kind != "none":
                return f.plan()
        return None

    # -- boot -------------------------------------------------------------
    def boot(self):
        """Cold start: clear RAM, mount the store (recovering as needed), register patches."""
        for _ in range(MAX_BOOTS_PER_RESET):
            self.boots += 1
            boot_no = self.boots - 1
            self.emit("-", "BOOT", {"boot": boot_no})
            dev = self.device
            dev.power_cycle()
            plan = self._fault_plan("boot", boot_no)
            if plan is not None:
                dev.arm(plan)
            t0 = self.now
            c0 = dev.clock_ns

            def on_store_event(kind, **details):
                self.now = t0 + dev.clock_ns - c0
                if kind == "SCAN":
                    self.scan_log.append((boot_no, details["status"], details["sector"]))
                    if details["sector"] is not None:
                        self.recovery_sectors.add(details["sector"])
                elif kind == "RECOVERY_STEP" and details["sector"] >= 0:
                    self.recovery_sectors.add(details["sector"])
                self.emit("-", kind, details)

            self.store = self._new_store(dev, on_store_event)
            try:
                self.store.mount()
            except PowerLost:
                self.now = t0 + dev.clock_ns - c0
                self.losses += 1
                self.emit("-", "POWER_LOSS", {"phase": "boot", "boot": boot_no})
                continue
            except StoreError as exc:
                self.now = t0 + dev.clock_ns - c0
                self.emit("-", "FAULT", {"reason": "boot_failed", "detail": str(exc)})
                self.halted = True
                return
            self.now = t0 + dev.clock_ns - c0
            dev.arm(dev.plan.none())
            self._start_runtime()
            return
        self.emit("-", "FAULT", {"reason": "boot_failed", "detail": "too many consecutive resets"})
        self.halted = True

    def _start_runtime(self):
        cfg = self.cfg
        rt = RuntimeState(cfg.runtime.max_patches, cfg.variables, profile=self.profile)
        self.runtime = rt
        stored = self.store.patches()
        for slot, info in stored:
            self._register(rt, info, self.store.read_code(info), "-", slot)
        self.now += self.boot_base_ns + self.boot_per_patch_ns * len(stored)
        self.boot_end_ns = self.now
        self.rx_queue.clear()
        self.reassembler = Reassembler(cfg.store.max_patch_size)
        self.tasks = []
        for pid, spec in enumerate(cfg.tasks):
            t = TaskRun(self, pid, spec)
            if spec.receiver:
                t.gen = self._receiver_body(t)
            else:
                t.gen = self._task_body(t)
                t.period = us_to_ns(spec.period_us)
                t.deadline = us_to_ns(spec.deadline_us if spec.deadline_us is not None else spec.period_us)
                t.next_release = self.now + us_to_ns(spec.offset_us)
            self.tasks.append(t)
        self.by_priority = sorted(self.tasks, key=lambda t: -t.priority)

    def _register(self, rt: RuntimeState, info: PatchInfo, code: bytes, task: str, slot):
        try:
            rt.register_patch(info, code)
        except Exception as exc:  # MapFull
            self.emit(task, "FAULT", {"reason": "register_failed", "key": f"0x{info.key:08x}", "detail": str(exc)})
            return
        self.emit(task, "PATCH_ACTIVE", {"key": f"0x{info.key:08x}", "slot": slot, "tasks": f"0x{info.tasks:08x}",
                                         "size": info.size, "wcet_ns": info.wcet_ns})

    # -- task code ----------------------------------------------------------
    def _task_body(self, t: TaskRun):
        spec = t.spec
        yield from self._section(t, Phase.ENTRY)
        n = 0
        while True:
            out = yield from self._section(t, Phase.PERIODIC)
            n += 1
            if out.broke or (spec.iterations is not None and n >= spec.iterations):
                break
            yield JobEnd()
        yield from self._section(t, Phase.EXIT)
        yield JobEnd(final=True)

    def _section(self, t: TaskRun, phase: Phase):
        sec = getattr(t.spec, phase.value)
        site = self.site_ids[f"{t.name}.{phase.value}"]
        cpu0 = t.cpu_ns
        ovh0 = t.overhead_ns
        t.emit("SECTION_START", phase=phase.value, job=t.job)

        def original():
            for call in sec.calls:
                yield from self._call(t, call)
            body = us_to_ns(sec.body_us)
            if body:
                yield Cpu(body, "body")

        out = yield from self.runtime.placeholder_task_phase(t, phase, site, us_to_ns(sec.buffer_us), original)
        t.emit("SECTION_END", phase=phase.value, job=t.job, cpu_ns=t.cpu_ns - cpu0,
               placeholder_ns=t.overhead_ns - ovh0, status=str(out.status))
        return out

    def _call(self, t: TaskRun, call):
        rt = self.runtime
        names = self.cfg.variables
        for var, values in call.inputs.items():
            rt.shared_vars[names.index(var)] = values[t.job % len(values)]

        def original():
            result = program.execute(self.site_programs[call.site], rt.shared_vars).result
            body = self.site_body[call.site]
            if body:
                yield Cpu(body, "call")
            return result

        out = yield from rt.placeholder_general(t, self.site_ids[call.site], original)
        if call.result_var is not None:
            rt.shared_vars[names.index(call.result_var)] = out.result
        t.emit("CALL_RETURN", site=call.site, status=str(out.status), result=out.result)

    def _receiver_body(self, t: TaskRun):
        while True:
            if not self.rx_queue:
                yield Wait()
                continue
            frame = self.rx_queue.popleft()
            if self.frame_rx_ns:
                yield Cpu(self.frame_rx_ns, "rx")
            try:
                msg = self.reassembler.push(frame.payload)
            except ReassemblyOverflow as exc:
                t.emit("FAULT", reason="reassembly_overflow", detail=str(exc))
                continue
            if msg is not None:
                yield from self._install(t, frame.delivery, *msg)

    def _install(self, t: TaskRun, delivery: int, tasks: int, key: int, wcet_ns: int, code: bytes):
        dev = self.device
        n0 = len(dev.ops)
        plan = self._fault_plan("load", delivery)
        if plan is not None:
            dev.arm(plan)
        lost = None
        info = None
        try:
            info = self.store.load_patch(code, tasks, key, wcet_ns)
        except PowerLost as exc:
            lost = exc
        except StoreError as exc:
            t.emit("FAULT", reason="store_error", key=f"0x{key:08x}", detail=str(exc))
        finally:
            if lost is None:
                dev.arm(dev.plan.none())
        slot = self.store.next_slot - 1
        for op in dev.ops[n0:]:
            if op.kind == "program":
                yield Block(op.duration_ns, "flash_program", op)
            elif op.kind == "erase":
                if op.interrupted or not op.interruptible:
                    yield Block(op.duration_ns, "flash_erase", op)
                else:
                    yield EraseWork(op)
        if lost is not None:
            yield PowerFail(lost.op, lost.mid_op)
            return
        if info is not None:
            self.deliveries_done += 1
            self._register(self.runtime, info, code, t.name, slot)

    # -- scheduler --------------------------------------------------------------
    def _release_due(self):
        for t in self.tasks:
            while t.next_release is not None and t.next_release <= self.now:
                if not t.done:
                    t.pending.append((t.releases, t.next_release))
                t.releases += 1
                t.next_release += t.period
                if t.done:
                    t.next_release = None
            if not t.active and not t.done and t.pending and not t.receiver:
                t.job, t.release = t.pending.popleft()
                t.active = True
        while self.bus and self.bus[0].arrival_ns <= self.now:
            frame = self.bus.popleft()
            self.rx_queue.append(frame)
            self.emit(self._receiver_name(), "FRAME", {"delivery": frame.delivery, "len": len(frame.payload)})

    def _receiver_name(self) -> str:
        return next(t.name for t in self.tasks if t.receiver)

    def _next_event(self, above: int | None = None) -> int:
        """Earliest future release (of tasks above a priority) or frame arrival."""
        times = [t.next_release for t in self.tasks
                 if t.next_release is not None and (above is None or t.priority > above)]
        if self.bus and above is None:
            times.append(self.bus[0].arrival_ns)
        return min(times, default=self.end_ns)

    def _pick(self) -> TaskRun | None:
        for t in self.by_priority:
            if t.ready:
                return t
        return None

    def _job_end(self, t: TaskRun, final: bool):
        response = self.now - t.release
        t.emit("JOB_END", job=t.job, response_ns=response)
        if response > t.deadline:
            t.emit("DEADLINE_MISS", job=t.job, response_ns=response, deadline_ns=t.deadline)
        if final:
            t.done = True
            t.active = False
            t.pending.clear()
        elif t.pending:
            t.job, t.release = t.pending.popleft()
        else:
            t.active = False

    def _fetch(self, t: TaskRun) -> bool:
        """Load t's next segment; False if the task stopped being runnable."""
        while t.seg is None:
            try:
                seg = next(t.gen)
            except StopIteration:
                t.done = True
                return False
            if isinstance(seg, JobEnd):
                self._job_end(t, seg.final)
                return False
            if isinstance(seg, Wait):
                t.waiting = True
                if not self.rx_queue:
                    return False
                continue
            t.waiting = False
            if isinstance(seg, PowerFail):
                raise _PowerFail(seg)
            t.seg = seg
            if isinstance(seg, (Cpu, Block)):
                t.remaining = seg.ns
            elif isinstance(seg, EraseWork):
                t.erase = EraseProgress(self.timings)
                t.erase_start = self.now
            else:
                raise SimError(f"unknown segment {seg!r}")
            if isinstance(seg, Block) and seg.op is not None:
                t.blocking_start = self.now
        return True

    def _advance(self, t: TaskRun, ns: int, label: str = ""):
        self.now += ns
        t.cpu_ns += ns
        if label in ("placeholder", "dispatch"):
            t.overhead_ns += ns

    def _flash_event(self, t: TaskRun, op: FlashOp, kind: str, start: int, duration: int, blocking: int):
        t.emit("FLASH_OP", op=kind, target=op.target, start_ns=start, duration_ns=duration, blocking_ns=blocking)

    def _step(self, t: TaskRun) -> None:
        seg = t.seg
        horizon = min(self._next_event(above=t.priority), self.end_ns)
        if isinstance(seg, Cpu):
            run = max(0, min(t.remaining, horizon - self.now))
            self._advance(t, run, seg.label)
            t.remaining -= run
            if t.remaining == 0:
                t.seg = None
        elif isinstance(seg, Block):
            run = min(t.remaining, self.end_ns - self.now)
            self._advance(t, run)
            t.remaining -= run
            if t.remaining == 0:
                t.seg = None
                if seg.op is not None:
                    kind = seg.op.kind if seg.label != "erase_suspend" else "suspend"
                    self._flash_event(t, seg.op, kind, t.blocking_start, seg.ns, seg.ns)
                    if kind == "suspend":
                        t.seg = t.suspended_erase
                        t.suspended_erase = None
        elif isinstance(seg, EraseWork):
            prog = t.erase
            if prog.suspended:
                prog.resume()
                self._flash_event(t, seg.op, "resume", self.now, 0, 0)
            run = max(0, min(prog.needed_ns(), horizon - self.now))
            prog.run(run)
            self._advance(t, run)
            if prog.done:
                self._flash_event(t, seg.op, "erase", t.erase_start, self.now - t.erase_start, 0)
                t.seg = None
                t.erase = None
            elif self.now >= horizon and self.now < self.end_ns:
                # a higher-priority task is due: suspend first (non-preemptible)
                prog.suspend()
                t.suspended_erase = seg
                t.seg = Block(self.timings.erase_suspend_ns, "erase_suspend", seg.op)
                t.remaining = self.timings.erase_suspend_ns
                t.blocking_start = self.now

    def run(self, until_ns: int | None = None, stop=None, reboot_on_loss: bool = True) -> list[Event]:
        """Boot (if not yet booted) and simulate until the scenario duration.

        `stop(world)` is polled between segments and ends the run early when
        true. With reboot_on_loss=False the run ends at the first power loss,
        leaving the flash image as the loss left it.
        """
        if until_ns is not None:
            self.end_ns = until_ns
        if self.boots == 0:
            self.boot()
        while not self.halted and self.now < self.end_ns:
            if stop is not None and stop(self):
                return self.trace
            self._release_due()
            t = self._pick()
            if t is None:
                self.now = min(self._next_event(), self.end_ns)
                continue
            try:
                if t.seg is None and not self._fetch(t):
                    continue
            except _PowerFail:
                self.losses += 1
                self.emit(t.name, "POWER_LOSS", {"phase": "load"})
                self._drop_inflight()
                if not reboot_on_loss:
                    return self.trace
                self.boot()
                continue
            self._step(t)
        self._finish()
        return self.trace

    def _drop_inflight(self):
        """Frames of a delivery cut short by a reset are lost with RAM."""
        cut = {f.delivery for f in self.rx_queue}
        self.rx_queue.clear()
        while self.bus and self.bus[0].delivery in cut:
            self.bus.popleft()

    def _finish(self):
        for t in self.tasks:
            if t.receiver or t.done:
                continue
            overdue = ([(t.job, t.release)] if t.active else []) + list(t.pending)
            for job, rel in overdue:
                if self.now - rel > t.deadline:
                    t.emit("DEADLINE_MISS", job=job, response_ns=-1, deadline_ns=t.deadline)

    def verdict(self) -> Verdict:
        return verdict(self.trace)


class _PowerFail(Exception):
    def __init__(self, seg: PowerFail):
        super().__init__("power failure")
        self.seg = seg


def simulate(cfg: ScenarioConfig, profile: str | None = None, **kw) -> World:
    world = World(cfg, profile, **kw)
    world.run()
    return world


def task_projection(events: list[Event], task: str, drop=("PLACEHOLDER",)) -> list[tuple]:
    """A task's events without timestamps and without the given kinds."""
    return [(e.kind, e.details) for e in events if e.task == task and e.kind not in drop]


__all__ = ["World", "simulate", "Reassembler", "ReassemblyOverflow", "frames_for",
           "encode_message", "FRAME_PAYLOAD", "task_projection", "PHASES", "ScanStatus"]
