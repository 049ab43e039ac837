"""Simulated NOR flash with ECC-style fault reporting and power-loss injection.

The device is a flat array of write units grouped into sectors. Each unit is
erased (reads as 0xFF), programmed, or dirty (an interrupted operation left it
in an undefined state; reading it raises BusFault). Programming is only legal on
an erased unit. Every program/erase is logged with its simulated duration so a
scheduler can replay the blocking intervals.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

from .timeunits import us_to_ns

ERASED_BYTE = 0xFF


class FlashError(Exception):
    pass


class OutOfRange(FlashError, IndexError):
    pass


class NotErased(FlashError):
    def __init__(self, unit: int):
        super().__init__(f"unit {unit} is not erased")
        self.unit = unit


class BusFault(FlashError):
    """A read touched a dirty unit."""

    def __init__(self, unit: int):
        super().__init__(f"bus fault reading unit {unit}")
        self.unit = unit


class FlashBusy(FlashError):
    """The bank is blocked by a running (unsuspended) erase."""


class NoEraseInProgress(FlashError):
    pass


class PowerLost(FlashError):
    def __init__(self, op: FlashOp | None, mid_op: bool):
        where = "before any flash op" if op is None else f"{'during' if mid_op else 'after'} op {op.index} ({op.kind})"
        super().__init__(f"power lost {where}")
        self.op = op
        self.mid_op = mid_op


class UnitState(enum.IntEnum):
    ERASED = 0
    PROGRAMMED = 1
    DIRTY = 2


@dataclass(frozen=True)
class FlashGeometry:
    sector_size_bytes: int = 4096
    write_unit_bytes: int = 8
    sector_count: int = 8
    table_sectors: tuple[int, int] = (0, 1)  # half-open sector range
    code_sectors: tuple[int, int] = (1, 7)
    recovery_sector: int = 7
    record_size_bytes: int = 32

    def __post_init__(self):
        object.__setattr__(self, "table_sectors", tuple(self.table_sectors))
        object.__setattr__(self, "code_sectors", tuple(self.code_sectors))
        self.validate()

    def validate(self):
        for name in ("sector_size_bytes", "write_unit_bytes", "sector_count", "record_size_bytes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sector_size_bytes % self.write_unit_bytes:
            raise ValueError("sector_size_bytes must be a multiple of write_unit_bytes")
        if self.record_size_bytes % self.write_unit_bytes:
            raise ValueError("record_size_bytes must be a multiple of write_unit_bytes")
        if self.sector_size_bytes % self.record_size_bytes:
            raise ValueError("sector_size_bytes must be a multiple of record_size_bytes")
        t0, t1 = self.table_sectors
        c0, c1 = self.code_sectors
        if not (0 <= t0 < t1 and 0 <= c0 < c1):
            raise ValueError("table and code regions must be non-empty sector ranges")
        owned = list(range(t0, t1)) + list(range(c0, c1)) + [self.recovery_sector]
        if len(set(owned)) != len(owned):
            raise ValueError("table, code and recovery regions overlap")
        if sorted(owned) != list(range(self.sector_count)):
            raise ValueError("table, code and recovery regions must cover every sector")

    @property
    def units_per_sector(self) -> int:
        return self.sector_size_bytes // self.write_unit_bytes

    @property
    def total_units(self) -> int:
        return self.units_per_sector * self.sector_count

    @property
    def total_bytes(self) -> int:
        return self.sector_size_bytes * self.sector_count

    def sector_of_unit(self, unit: int) -> int:
        return unit // self.units_per_sector

    def sector_of_addr(self, addr: int) -> int:
        return addr // self.sector_size_bytes

    def first_unit(self, sector: int) -> int:
        return sector * self.units_per_sector

    def sector_addr(self, sector: int) -> int:
        return sector * self.sector_size_bytes


@dataclass(frozen=True)
class FlashTimings:
    program_block_ns: int = 68_660
    erase_ns: int = 5_920_000
    erase_suspend_ns: int = 58_950
    erase_min_resume_interval_ns: int = 2_458_950

    def __post_init__(self):
        if min(self.program_block_ns, self.erase_ns, self.erase_suspend_ns, self.erase_min_resume_interval_ns) <= 0:
            raise ValueError("flash timings must be strictly positive")
        if not self.erase_ns > self.erase_min_resume_interval_ns > self.erase_suspend_ns:
            raise ValueError("need erase > min resume interval > suspend latency")

    @classmethod
    def from_us(cls, program_block_us=68.66, erase_us=5920, erase_suspend_us=58.95,
                erase_min_resume_interval_us=2458.95) -> FlashTimings:
        return cls(us_to_ns(program_block_us), us_to_ns(erase_us),
                   us_to_ns(erase_suspend_us), us_to_ns(erase_min_resume_interval_us))


class LossKind(enum.Enum):
    NONE = "none"
    AFTER_OP = "after_op"
    MID_PROGRAM = "mid_program"
    MID_ERASE = "mid_erase"


@dataclass(frozen=True)
class PowerLossPlan:
    """One power-loss trigger.

    AFTER_OP(n) cuts power once the n-th program/erase has completed (n=0 means
    before the first one). MID_PROGRAM(n)/MID_ERASE(n) cut power during the n-th
    program or n-th erase respectively, counted separately per kind.
    """

    kind: LossKind = LossKind.NONE
    n: int = 0

    @classmethod
    def none(cls):
        return cls()

    @classmethod
    def after_op(cls, n: int):
        return cls(LossKind.AFTER_OP, n)

    @classmethod
    def mid_program(cls, n: int):
        return cls(LossKind.MID_PROGRAM, n)

    @classmethod
    def mid_erase(cls, n: int):
        return cls(LossKind.MID_ERASE, n)

    def __str__(self):
        return "none" if self.kind is LossKind.NONE else f"{self.kind.value}({self.n})"


@dataclass
class FlashOp:
    index: int  # 1-based program/erase counter; suspend/resume reuse their erase's index
    kind: str  # program | erase | suspend | resume
    target: int  # unit for program, sector otherwise
    duration_ns: int
    interruptible: bool = False
    interrupted: bool = False


class EraseProgress:
    """Progress bookkeeping for a suspendable sector erase.

    A round (the time between resume and suspend) only counts toward completion
    if it lasted at least the minimum resume interval. The erase completes once
    the counted time reaches the full erase duration.
    """

    def __init__(self, timings: FlashTimings):
        self.timings = timings
        self.banked_ns = 0
        self.round_ns = 0
        self.suspended = False
        self.rounds = 0

    @property
    def done(self) -> bool:
        return (self.round_ns >= self.timings.erase_min_resume_interval_ns
                and self.banked_ns + self.round_ns >= self.timings.erase_ns)

    def needed_ns(self) -> int:
        """Uninterrupted time still required to finish from the current round."""
        t = self.timings
        return max(0, t.erase_min_resume_interval_ns - self.round_ns,
                   t.erase_ns - self.banked_ns - self.round_ns)

    def run(self, ns: int) -> int:
        if self.suspended:
            raise NoEraseInProgress("erase is suspended")
        used = min(ns, self.needed_ns())
        self.round_ns += used
        return used

    def suspend(self):
        if self.round_ns >= self.timings.erase_min_resume_interval_ns:
            self.banked_ns += self.round_ns
        self.round_ns = 0
        self.rounds += 1
        self.suspended = True

    def resume(self):
        self.suspended = False


@dataclass
class _EraseJob:
    sector: int
    op: FlashOp
    progress: EraseProgress


class FlashDevice:
    def __init__(self, geometry: FlashGeometry | None = None, timings: FlashTimings | None = None,
                 plan: PowerLossPlan | None = None):
        self.geometry = geometry or FlashGeometry()
        self.timings = timings or FlashTimings()
        g = self.geometry
        self.data = bytearray(b"\xff" * g.total_bytes)
        self.state = bytearray(g.total_units)  # UnitState per unit
        self.clock_ns = 0
        self.ops: list[FlashOp] = []
        self.powered = True
        self._erase: _EraseJob | None = None
        self.arm(plan or PowerLossPlan.none())

    # -- power ----------------------------------------------------------
    def arm(self, plan: PowerLossPlan):
        """Install a loss plan and restart the op counters it refers to."""
        self.plan = plan
        self.op_count = 0
        self.program_count = 0
        self.erase_count = 0

    def power_cycle(self):
        """Restore power; flash contents persist, any erase job is forgotten."""
        self.powered = True
        self._erase = None
        self.arm(PowerLossPlan.none())

    def _lose_power(self, op: FlashOp | None, mid_op: bool):
        self.powered = False
        self._erase = None
        self.plan = PowerLossPlan.none()
        raise PowerLost(op, mid_op)

    def _begin_op(self, kind: str) -> bool:
        if not self.powered:
            raise PowerLost(None, False)
        if self.plan.kind is LossKind.AFTER_OP and self.plan.n == 0:
            self._lose_power(None, False)
        self.op_count += 1
        if kind == "program":
            self.program_count += 1
            return self.plan.kind is LossKind.MID_PROGRAM and self.program_count == self.plan.n
        self.erase_count += 1
        return self.plan.kind is LossKind.MID_ERASE and self.erase_count == self.plan.n

    def _end_op(self, op: FlashOp):
        if self.plan.kind is LossKind.AFTER_OP and self.op_count == self.plan.n:
            self._lose_power(op, False)

    # -- reads ----------------------------------------------------------
    def _check_units(self, start: int, count: int):
        if count <= 0 or start < 0 or start + count > self.geometry.total_units:
            raise OutOfRange(f"units [{start}, {start + count}) outside device")

    def read_units(self, start: int, count: int = 1) -> bytes:
        self._check_units(start, count)
        if self._erase is not None and not self._erase.progress.suspended:
            raise FlashBusy("bank busy erasing")
        bad = self.state.find(UnitState.DIRTY, start, start + count)
        if bad != -1:
            raise BusFault(bad)
        w = self.geometry.write_unit_bytes
        return bytes(self.data[start * w:(start + count) * w])

    def read(self, addr: int, length: int) -> bytes:
        """Byte-addressed read; faults if any covering unit is dirty."""
        w = self.geometry.write_unit_bytes
        if length <= 0 or addr < 0 or addr + length > self.geometry.total_bytes:
            raise OutOfRange(f"bytes [{addr}, {addr + length}) outside device")
        first = addr // w
        last = (addr + length - 1) // w
        raw = self.read_units(first, last - first + 1)
        skip = addr - first * w
        return raw[skip:skip + length]

    def unit_state(self, unit: int) -> UnitState:
        self._check_units(unit, 1)
        return UnitState(self.state[unit])

    def dirty_units(self) -> list[int]:
        return [i for i, s in enumerate(self.state) if s == UnitState.DIRTY]

    def is_erased(self, start: int, count: int) -> bool:
        """True iff every unit in range reads back as all-0xFF without faulting."""
        try:
            raw = self.read_units(start, count)
        except BusFault:
            return False
        return raw.count(ERASED_BYTE) == len(raw)

    # -- program --------------------------------------------------------
    def program_unit(self, unit: int, data: bytes):
        g = self.geometry
        self._check_units(unit, 1)
        if len(data) != g.write_unit_bytes:
            raise ValueError(f"program needs exactly {g.write_unit_bytes} bytes")
        if self._erase is not None:
            raise FlashBusy("cannot program while an erase is pending")
        if self.state[unit] != UnitState.ERASED:
            raise NotErased(unit)
        mid = self._begin_op("program")
        op = FlashOp(self.op_count, "program", unit, self.timings.program_block_ns)
        self.ops.append(op)
        if mid:
            op.interrupted = True
            op.duration_ns //= 2
            self.clock_ns += op.duration_ns
            self.state[unit] = UnitState.DIRTY
            self._lose_power(op, True)
        self.clock_ns += op.duration_ns
        w = g.write_unit_bytes
        self.data[unit * w:(unit + 1) * w] = data
        self.state[unit] = UnitState.PROGRAMMED
        self._end_op(op)

    # -- erase ----------------------------------------------------------
    def _check_sector(self, sector: int):
        if not 0 <= sector < self.geometry.sector_count:
            raise OutOfRange(f"sector {sector} outside device")

    def _set_sector(self, sector: int, state: UnitState):
        g = self.geometry
        u0 = g.first_unit(sector)
        self.state[u0:u0 + g.units_per_sector] = bytes([state]) * g.units_per_sector
        if state is UnitState.ERASED:
            a0 = g.sector_addr(sector)
            self.data[a0:a0 + g.sector_size_bytes] = b"\xff" * g.sector_size_bytes

    def begin_erase(self, sector: int, interruptible: bool = True) -> FlashOp:
        """Start an erase; drive it with erase_for/suspend_erase/resume_erase."""
        self._check_sector(sector)
        if self._erase is not None:
            raise FlashBusy("an erase is already pending")
        mid = self._begin_op("erase")
        op = FlashOp(self.op_count, "erase", sector, 0, interruptible=interruptible)
        self.ops.append(op)
        if mid:
            op.interrupted = True
            op.duration_ns = self.timings.erase_ns // 2
            self.clock_ns += op.duration_ns
            self._set_sector(sector, UnitState.DIRTY)
            self._lose_power(op, True)
        # contents of a sector under erase are undefined until it completes
        self._set_sector(sector, UnitState.DIRTY)
        self._erase = _EraseJob(sector, op, EraseProgress(self.timings))
        return op

    def erase_for(self, ns: int) -> bool:
        """Let the pending erase run for up to ns; True once it has completed."""
        job = self._erase
        if job is None:
            raise NoEraseInProgress("no erase pending")
        used = job.progress.run(ns)
        self.clock_ns += used
        job.op.duration_ns += used
        if not job.progress.done:
            return False
        self._set_sector(job.sector, UnitState.ERASED)
        self._erase = None
        self._end_op(job.op)
        return True

    def erase_remaining_ns(self) -> int:
        if self._erase is None:
            raise NoEraseInProgress("no erase pending")
        return self._erase.progress.needed_ns()

    def suspend_erase(self):
        job = self._erase
        if job is None or job.progress.suspended:
            raise NoEraseInProgress("no running erase to suspend")
        if not job.op.interruptible:
            raise FlashError("erase was started as non-interruptible")
        job.progress.suspend()
        self.clock_ns += self.timings.erase_suspend_ns
        self.ops.append(FlashOp(job.op.index, "suspend", job.sector, self.timings.erase_suspend_ns))

    def resume_erase(self):
        job = self._erase
        if job is None or not job.progress.suspended:
            raise NoEraseInProgress("no suspended erase to resume")
        job.progress.resume()
        self.ops.append(FlashOp(job.op.index, "resume", job.sector, 0))

    def erase_sector(self, sector: int, interruptible: bool = False):
        """Erase a sector to completion without interruption."""
        self.begin_erase(sector, interruptible)
        self.erase_for(self.erase_remaining_ns())

    # -- images ---------------------------------------------------------
    def snapshot(self) -> tuple[bytes, bytes]:
        return bytes(self.data), bytes(self.state)

    def restore(self, snap: tuple[bytes, bytes]):
        self.data[:] = snap[0]
        self.state[:] = snap[1]
        self._erase = None

    def clone(self) -> FlashDevice:
        dev = FlashDevice(self.geometry, self.timings)
        dev.restore(self.snapshot())
        return dev

    def image_bytes(self) -> bytes:
        """Raw image; dirty units are written as 0x00."""
        raw = bytearray(self.data)
        w = self.geometry.write_unit_bytes
        for u in self.dirty_units():
            raw[u * w:(u + 1) * w] = bytes(w)
        return bytes(raw)

    def dump(self, path):
        path = Path(path)
        path.write_bytes(self.image_bytes())
        dirty = self.dirty_units()
        Path(str(path) + ".dirty").write_text("".join(f"{u}\n" for u in dirty))

    @classmethod
    def load(cls, path, geometry: FlashGeometry | None = None, timings: FlashTimings | None = None) -> FlashDevice:
        dev = cls(geometry, timings)
        raw = Path(path).read_bytes()
        if len(raw) != dev.geometry.total_bytes:
            raise ValueError(f"image is {len(raw)} bytes, geometry expects {dev.geometry.total_bytes}")
        dev.data[:] = raw
        w = dev.geometry.write_unit_bytes
        erased = b"\xff" * w
        for u in range(dev.geometry.total_units):
            dev.state[u] = UnitState.ERASED if raw[u * w:(u + 1) * w] == erased else UnitState.PROGRAMMED
        sidecar = Path(str(path) + ".dirty")
        if sidecar.exists():
            for line in sidecar.read_text().split():
                dev._check_units(int(line), 1)
                dev.state[int(line)] = UnitState.DIRTY
        return dev
