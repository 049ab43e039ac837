"""Append-only patch storage on top of FlashDevice.

Layout: a table of fixed-size PatchInfo records at the start of the reserved
region, patch code after it, and one spare recovery sector. Loading a patch
programs its code first and its record last, so a record that validates always
points at complete code. Nothing is erased outside of boot-time recovery.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, replace
from typing import Callable

from .flash import (ERASED_BYTE, BusFault, FlashDevice, FlashGeometry, PowerLost)
from .timeunits import fmt_us

_FIELDS = struct.Struct("<6I")
EMPTY_KEY = 0xFFFFFFFF
DEFAULT_MAX_PATCH_SIZE = 1024


class StoreError(Exception):
    pass


class StoreFull(StoreError):
    pass


class TooLarge(StoreError):
    pass


class InvalidPatch(StoreError, ValueError):
    pass


class StoreNotReady(StoreError):
    """The store has not completed a clean boot scan (or is mid-recovery)."""


@dataclass(frozen=True)
class PatchInfo:
    tasks: int
    key: int
    size: int
    wcet_ns: int
    code_offset: int = 0
    crc32: int = 0

    @property
    def wcet_us(self):
        return fmt_us(self.wcet_ns)

    def header_bytes(self) -> bytes:
        return struct.pack("<5I", self.tasks, self.key, self.size, self.wcet_ns, self.code_offset)

    def compute_crc(self, code: bytes) -> int:
        return zlib.crc32(self.header_bytes() + code) & 0xFFFFFFFF

    def pack(self, record_size: int) -> bytes:
        raw = _FIELDS.pack(self.tasks, self.key, self.size, self.wcet_ns, self.code_offset, self.crc32)
        return raw + bytes(record_size - len(raw))

    @classmethod
    def unpack(cls, raw: bytes) -> PatchInfo:
        return cls(*_FIELDS.unpack_from(raw))


class Area(enum.Enum):
    TABLE = "table"
    CODE = "code"


class ScanStatus(enum.Enum):
    CLEAN = "clean"
    CORRUPT_TABLE = "corrupt_table_sector"
    CORRUPT_CODE = "corrupt_code_sector"
    RECOVERY_IN_PROGRESS = "recovery_in_progress"


@dataclass(frozen=True)
class ScanReport:
    status: ScanStatus
    sector: int | None = None
    valid_patch_count: int = 0

    def __str__(self):
        if self.sector is None:
            return f"{self.status.value} ({self.valid_patch_count} patches)"
        return f"{self.status.value} sector={self.sector}"


class PatchStore:
    """Append-only store. Call mount() (or boot_scan()) before loading."""

    def __init__(self, device: FlashDevice, max_patch_size: int = DEFAULT_MAX_PATCH_SIZE,
                 on_event: Callable[..., None] | None = None):
        g = device.geometry
        if not 0 < max_patch_size <= g.sector_size_bytes:
            raise ValueError("max_patch_size must be in (0, sector_size_bytes]")
        self.device = device
        self.geometry = g
        self.max_patch_size = max_patch_size
        self.on_event = on_event or (lambda kind, **details: None)
        self.unit = g.write_unit_bytes
        self.record_units = g.record_size_bytes // g.write_unit_bytes
        t0, t1 = g.table_sectors
        c0, c1 = g.code_sectors
        self.slots = (t1 - t0) * g.sector_size_bytes // g.record_size_bytes
        self.table_unit0 = g.first_unit(t0)
        self.table_unit_end = g.first_unit(t1)
        self.code_unit0 = g.first_unit(c0)
        self.code_unit_end = g.first_unit(c1)
        self.code_addr0 = g.sector_addr(c0)
        self.code_bytes = (c1 - c0) * g.sector_size_bytes
        self.ready = False
        self.next_slot = 0
        self.next_code_offset = 0

    # -- helpers --------------------------------------------------------
    def _padded(self, size: int) -> int:
        return -(-size // self.unit) * self.unit

    def _place(self, offset: int, padded: int) -> int:
        """Start offset for new code; code never straddles a sector boundary."""
        s = self.geometry.sector_size_bytes
        if offset // s != (offset + padded - 1) // s:
            offset = (offset // s + 1) * s
        return offset

    def _slot_unit(self, slot: int) -> int:
        return self.table_unit0 + slot * self.record_units

    def _sector_of_slot(self, slot: int) -> int:
        return self.geometry.sector_of_unit(self._slot_unit(slot))

    def _sane(self, info: PatchInfo, raw: bytes) -> bool:
        padded = self._padded(info.size)
        return (info.tasks != 0 and info.key != EMPTY_KEY
                and 0 < info.size <= self.max_patch_size
                and info.code_offset % self.unit == 0
                and info.code_offset + padded <= self.code_bytes
                and self._place(info.code_offset, padded) == info.code_offset
                and raw[_FIELDS.size:].count(0) == len(raw) - _FIELDS.size)

    def _parse_record(self, raw: bytes, check_code: bool = True) -> PatchInfo | None:
        info = PatchInfo.unpack(raw)
        if not self._sane(info, raw):
            return None
        if not check_code:
            return info
        try:
            code = self.device.read(self.code_addr0 + info.code_offset, info.size)
        except BusFault:
            return None
        return info if info.compute_crc(code) == info.crc32 else None

    def _walk_table(self, check_code: bool = True):
        """Read records in slot order.

        Returns (valid, stop_slot, bad_slot): the valid prefix, the slot where
        the walk stopped, and that slot again if it held a faulting or invalid
        record (None if it was empty or the table is full).
        """
        valid: list[tuple[int, PatchInfo]] = []
        for slot in range(self.slots):
            try:
                raw = self.device.read_units(self._slot_unit(slot), self.record_units)
            except BusFault:
                return valid, slot, slot
            if raw.count(ERASED_BYTE) == len(raw):
                return valid, slot, None
            info = self._parse_record(raw, check_code)
            if info is None:
                return valid, slot, slot
            valid.append((slot, info))
        return valid, self.slots, None

    def _first_nonerased(self, start: int, end: int) -> int | None:
        """First unit in [start, end) that faults or is not all-0xFF."""
        if start >= end:
            return None
        try:
            raw = self.device.read_units(start, end - start)
            limit = end
        except BusFault as fault:
            limit = fault.unit
            raw = self.device.read_units(start, limit - start) if limit > start else b""
        for i, b in enumerate(raw):
            if b != ERASED_BYTE:
                return start + i // self.unit
        return None if limit == end else limit

    def _code_end(self, valid) -> int:
        return max((info.code_offset + self._padded(info.size) for _, info in valid), default=0)

    def _code_unit(self, offset: int) -> int:
        return self.code_unit0 + offset // self.unit

    # -- queries --------------------------------------------------------
    def patches(self) -> list[tuple[int, PatchInfo]]:
        """Valid records in slot order (the committed patches)."""
        return self._walk_table()[0]

    def read_code(self, info: PatchInfo) -> bytes:
        return self.device.read(self.code_addr0 + info.code_offset, info.size)

    def manifest(self) -> str:
        lines = [f"{slot}\t0x{p.key:08x}\t{p.size}\t{p.wcet_us}\t{p.code_offset}\t0x{p.crc32:08x}\n"
                 for slot, p in self.patches()]
        return "".join(lines)

    # -- boot -----------------------------------------------------------
    def boot_scan(self) -> ScanReport:
        self.ready = False
        r_unit = self.geometry.first_unit(self.geometry.recovery_sector)
        if not self.device.is_erased(r_unit, 1):
            return ScanReport(ScanStatus.RECOVERY_IN_PROGRESS)
        return self._scan_main()

    def _scan_main(self) -> ScanReport:
        g = self.geometry
        valid, stop, bad = self._walk_table()
        if bad is not None:
            return ScanReport(ScanStatus.CORRUPT_TABLE, self._sector_of_slot(bad), len(valid))
        tail = self._first_nonerased(self._slot_unit(stop), self.table_unit_end)
        if tail is not None:
            return ScanReport(ScanStatus.CORRUPT_TABLE, g.sector_of_unit(tail), len(valid))
        end = self._code_end(valid)
        orphan = self._first_nonerased(self._code_unit(end), self.code_unit_end)
        if orphan is not None:
            return ScanReport(ScanStatus.CORRUPT_CODE, g.sector_of_unit(orphan), len(valid))
        self.next_slot = len(valid)
        self.next_code_offset = end
        self.ready = True
        return ScanReport(ScanStatus.CLEAN, None, len(valid))

    def mount(self, max_rounds: int = 16) -> list[ScanReport]:
        """Boot-time init: scan, recover or resume as flagged, until clean."""
        reports = []
        for _ in range(max_rounds):
            report = self.boot_scan()
            reports.append(report)
            self.on_event("SCAN", status=report.status.value, sector=report.sector,
                          patches=report.valid_patch_count)
            if report.status is ScanStatus.CLEAN:
                return reports
            if report.status is ScanStatus.RECOVERY_IN_PROGRESS:
                self.resume_recovery()
            elif report.status is ScanStatus.CORRUPT_TABLE:
                self.recover(report.sector, Area.TABLE)
            else:
                self.recover(report.sector, Area.CODE)
        raise StoreError(f"store did not converge after {max_rounds} scans: {reports[-1]}")

    # -- loading --------------------------------------------------------
    def _check_new(self, code: bytes, tasks: int, key: int) -> int:
        size = len(code)
        if size > self.max_patch_size:
            raise TooLarge(f"patch is {size} bytes, limit {self.max_patch_size}")
        if size == 0:
            raise InvalidPatch("empty patch code")
        if not 0 < tasks <= 0xFFFFFFFF:
            raise InvalidPatch("task mask must be a non-zero 32-bit value")
        if not 0 <= key < EMPTY_KEY:
            raise InvalidPatch(f"key 0x{key:x} is reserved or out of range")
        padded = self._padded(size)
        body = code + b"\xff" * (padded - size)
        for i in range(0, padded, self.unit):
            if body[i:i + self.unit].count(ERASED_BYTE) == self.unit:
                raise InvalidPatch(f"code unit at +{i} is all 0xFF (indistinguishable from erased)")
        return padded

    def _allocate(self, padded: int) -> int:
        if self.next_slot >= self.slots:
            raise StoreFull("patch table is full")
        offset = self._place(self.next_code_offset, padded)
        if offset + padded > self.code_bytes:
            raise StoreFull("patch code area is full")
        return offset

    def _program_code(self, offset: int, code: bytes, padded: int):
        body = code + b"\xff" * (padded - len(code))
        first = self._code_unit(offset)
        for i in range(padded // self.unit):
            self.device.program_unit(first + i, body[i * self.unit:(i + 1) * self.unit])

    def _program_record(self, slot: int, info: PatchInfo):
        raw = info.pack(self.geometry.record_size_bytes)
        first = self._slot_unit(slot)
        for i in range(self.record_units):
            self.device.program_unit(first + i, raw[i * self.unit:(i + 1) * self.unit])

    def load_patch(self, code: bytes, tasks: int, key: int, wcet_ns: int) -> PatchInfo:
        """Append a patch: code first, then its record. Never erases."""
        if not self.ready:
            raise StoreNotReady("store must pass a clean boot scan first")
        padded = self._check_new(code, tasks, key)
        offset = self._allocate(padded)
        info = PatchInfo(tasks, key, len(code), wcet_ns, offset)
        info = replace(info, crc32=info.compute_crc(code))
        try:
            self._program_code(offset, code, padded)
            self._program_record(self.next_slot, info)
        except PowerLost:
            self.ready = False
            raise
        self.next_slot += 1
        self.next_code_offset = offset + padded
        return info

    # -- recovery -------------------------------------------------------
    def _area_of(self, sector: int) -> Area:
        g = self.geometry
        if g.table_sectors[0] <= sector < g.table_sectors[1]:
            return Area.TABLE
        if g.code_sectors[0] <= sector < g.code_sectors[1]:
            return Area.CODE
        raise ValueError(f"sector {sector} is not in the table or code region")

    def _valid_units(self, sector: int, area: Area) -> list[int]:
        """Units of `sector` holding data that must survive recovery."""
        g = self.geometry
        lo = g.first_unit(sector)
        hi = lo + g.units_per_sector
        units: list[int] = []
        if area is Area.TABLE:
            for slot, _ in self._walk_table()[0]:
                u = self._slot_unit(slot)
                if lo <= u < hi:
                    units.extend(range(u, u + self.record_units))
        else:
            # the table is already clean here; it alone says which code is live
            for _, info in self._walk_table()[0]:
                u = self._code_unit(info.code_offset)
                n = self._padded(info.size) // self.unit
                units.extend(x for x in range(u, u + n) if lo <= x < hi)
        return sorted(set(units))

    def _step(self, step: int, sector: int, area: Area, resumed: bool = False):
        self.on_event("RECOVERY_STEP", step=step, sector=sector, area=area.value, resumed=resumed)

    def recover(self, sector: int, area: Area):
        """Full five-step restoration of one corrupted sector."""
        if self._area_of(sector) is not area:
            raise ValueError(f"sector {sector} is not in the {area.value} area")
        g = self.geometry
        dev = self.device
        rec = g.recovery_sector
        delta = g.first_unit(rec) - g.first_unit(sector)
        self.ready = False
        dev.erase_sector(rec, interruptible=True)
        self._step(1, sector, area)
        live = self._valid_units(sector, area)
        saved = [(u, dev.read_units(u)) for u in live]
        for u, data in reversed(saved):  # back to front: offset 0 lands last
            dev.program_unit(u + delta, data)
        self._step(2, sector, area)
        self._restore(sector, area, resumed=False)

    def _restore(self, sector: int, area: Area, resumed: bool):
        """Steps 3-5: erase target, copy back from recovery sector, clear it."""
        g = self.geometry
        dev = self.device
        rec = g.recovery_sector
        dev.erase_sector(sector, interruptible=True)
        self._step(3, sector, area, resumed)
        r0 = g.first_unit(rec)
        t0 = g.first_unit(sector)
        for i in range(g.units_per_sector):
            data = dev.read_units(r0 + i)
            if data.count(ERASED_BYTE) != len(data):
                dev.program_unit(t0 + i, data)
        self._step(4, sector, area, resumed)
        dev.erase_sector(rec, interruptible=True)
        self._step(5, sector, area, resumed)

    def resume_recovery(self):
        """Continue a recovery interrupted by a reset."""
        g = self.geometry
        dev = self.device
        rec = g.recovery_sector
        r0 = g.first_unit(rec)
        self.ready = False
        try:
            first = dev.read_units(r0)
        except BusFault:
            # interrupted recovery-sector erase or final copy unit
            report = self._scan_main()
            if report.status is ScanStatus.CLEAN:
                dev.erase_sector(rec, interruptible=True)
                self._step(5, -1, Area.TABLE, resumed=True)
            else:
                area = Area.TABLE if report.status is ScanStatus.CORRUPT_TABLE else Area.CODE
                self.recover(report.sector, area)
            return
        if first.count(ERASED_BYTE) == len(first):
            # copy never finished; the original sector is untouched
            dev.erase_sector(rec, interruptible=True)
            self._step(1, -1, Area.TABLE, resumed=True)
            return
        raw = dev.read_units(r0, self.record_units)
        area = Area.TABLE if self._parse_record(raw) is not None else Area.CODE
        self._restore(self._resume_target(area), area, resumed=True)

    def _resume_target(self, area: Area) -> int:
        g = self.geometry
        if area is Area.TABLE:
            valid, stop, bad = self._walk_table()
            if bad is not None:
                return self._sector_of_slot(bad)
            tail = self._first_nonerased(self._slot_unit(stop), self.table_unit_end)
            if tail is not None:
                return g.sector_of_unit(tail)
            return self._sector_of_slot(min(stop, self.slots - 1))
        # table is clean during code recovery, but code it points to may be
        # erased right now, so records are read without the code checksum
        valid = self._walk_table(check_code=False)[0]
        end = self._code_end(valid)
        if end == 0:
            raise StoreError("code recovery in progress but no committed code")
        return g.sector_of_unit(self._code_unit(end - self.unit))


class ConventionalStore(PatchStore):
    """Baseline that rewrites the table sector in place on every load.

    Each load erases the table sector holding the new slot before programming,
    as a conventional read-modify-write flash manager would. It exists only as
    the real-time contrast case and is not power-loss safe.
    """

    def __init__(self, device: FlashDevice, max_patch_size: int = DEFAULT_MAX_PATCH_SIZE,
                 on_event=None, erase_suspendable: bool = False):
        super().__init__(device, max_patch_size, on_event)
        self.erase_suspendable = erase_suspendable

    def load_patch(self, code: bytes, tasks: int, key: int, wcet_ns: int) -> PatchInfo:
        if not self.ready:
            raise StoreNotReady("store must pass a clean boot scan first")
        g = self.geometry
        padded = self._check_new(code, tasks, key)
        offset = self._allocate(padded)
        info = PatchInfo(tasks, key, len(code), wcet_ns, offset)
        info = replace(info, crc32=info.compute_crc(code))
        sector = self._sector_of_slot(self.next_slot)
        u0 = g.first_unit(sector)
        keep = [(u, self.device.read_units(u)) for u in range(u0, self._slot_unit(self.next_slot))]
        try:
            self.device.erase_sector(sector, interruptible=self.erase_suspendable)
            for u, data in keep:
                self.device.program_unit(u, data)
            self._program_code(offset, code, padded)
            self._program_record(self.next_slot, info)
        except PowerLost:
            self.ready = False
            raise
        self.next_slot += 1
        self.next_code_offset = offset + padded
        return info
