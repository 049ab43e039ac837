"""Scenario files: JSON schema as dataclasses, loading, validation, compilation.

A scenario describes the flash layout and timings, the cost profile, the task
set (one of which is the lowest-priority patch receiver), the function call
sites, the patches (as mnemonic programs), the bus deliveries and any power-loss
faults to inject. Durations are given in microseconds and may be fractional
down to one nanosecond.
"""

from __future__ import annotations

import dataclasses
import json
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

from . import program
from .flash import FlashGeometry, FlashTimings, PowerLossPlan
from .runtime import PROFILES
from .store import EMPTY_KEY
from .timeunits import us_to_ns

SITE_BASE = 0x08000C04
PHASES = ("entry", "periodic", "exit")
MAX_TASKS = 32
STORE_MODES = ("append_only", "conventional")
FAULT_KINDS = ("none", "after_op", "mid_program", "mid_erase")
FAULT_AT = ("load", "boot")
INSTALL = ("bus", "factory")


class ScenarioInvalid(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


@dataclass
class FlashConfig:
    sector_size_bytes: int = 4096
    write_unit_bytes: int = 8
    sector_count: int = 8
    table_sectors: list[int] = field(default_factory=lambda: [0, 1])
    code_sectors: list[int] = field(default_factory=lambda: [1, 7])
    recovery_sector: int = 7
    record_size_bytes: int = 32
    program_block_us: float = 68.66
    erase_us: float = 5920
    erase_suspend_us: float = 58.95
    erase_min_resume_interval_us: float = 2458.95

    def geometry(self) -> FlashGeometry:
        return FlashGeometry(self.sector_size_bytes, self.write_unit_bytes, self.sector_count,
                             tuple(self.table_sectors), tuple(self.code_sectors),
                             self.recovery_sector, self.record_size_bytes)

    def timings(self) -> FlashTimings:
        return FlashTimings.from_us(self.program_block_us, self.erase_us,
                                    self.erase_suspend_us, self.erase_min_resume_interval_us)


@dataclass
class StoreConfig:
    mode: str = "append_only"
    max_patch_size: int = 1024
    erase_suspendable: bool = False


@dataclass
class RuntimeConfig:
    max_patches: int = 32
    boot_base_us: float = 200
    boot_per_patch_us: float = 50
    frame_rx_us: float = 5


@dataclass
class SiteSpec:
    name: str
    body_us: float = 0
    program: str = ""  # behaviour of the unpatched function


@dataclass
class CallSpec:
    site: str
    inputs: dict[str, list[int]] = field(default_factory=dict)  # cycled per job
    result_var: str | None = None


@dataclass
class SectionSpec:
    body_us: float = 0
    buffer_us: float = 0
    calls: list[CallSpec] = field(default_factory=list)


@dataclass
class TaskSpec:
    name: str
    priority: int
    period_us: float = 0
    deadline_us: float | None = None  # defaults to the period
    offset_us: float = 0
    iterations: int | None = None  # periodic iterations before the exit phase
    receiver: bool = False
    entry: SectionSpec = field(default_factory=SectionSpec)
    periodic: SectionSpec = field(default_factory=SectionSpec)
    exit: SectionSpec = field(default_factory=SectionSpec)


@dataclass
class PatchSpec:
    name: str
    site: str  # a function site name or "<task>.<phase>"
    tasks: list[str]
    program: str
    wcet_us: float = 0
    size: int | None = None  # pad the code with zero bytes up to this size
    install: str = "bus"


@dataclass
class DeliverySpec:
    patch: str
    at_us: float
    frame_gap_us: float = 100


@dataclass
class FaultSpec:
    kind: str = "none"
    n: int = 0
    at: str = "load"  # load: during delivery number `index`; boot: during boot number `index`
    index: int = 0

    def plan(self) -> PowerLossPlan:
        return {
            "none": PowerLossPlan.none,
            "after_op": lambda: PowerLossPlan.after_op(self.n),
            "mid_program": lambda: PowerLossPlan.mid_program(self.n),
            "mid_erase": lambda: PowerLossPlan.mid_erase(self.n),
        }[self.kind]()


@dataclass
class ScenarioConfig:
    name: str
    description: str = ""
    duration_us: float = 1_000_000
    profile: str = "freertos"
    variables: list[str] = field(default_factory=list)
    flash: FlashConfig = field(default_factory=FlashConfig)
    store: StoreConfig = field(default_factory=StoreConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    sites: list[SiteSpec] = field(default_factory=list)
    tasks: list[TaskSpec] = field(default_factory=list)
    patches: list[PatchSpec] = field(default_factory=list)
    deliveries: list[DeliverySpec] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data) -> ScenarioConfig:
        cfg = _load(cls, data, "scenario")
        validate(cfg)
        return cfg

    @classmethod
    def loads(cls, text: str, source: str = "<string>") -> ScenarioConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioInvalid([f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
        try:
            return cls.from_dict(data)
        except ScenarioInvalid as exc:
            raise ScenarioInvalid([f"{source}: {e}" for e in exc.errors]) from None

    # -- derived views --------------------------------------------------
    def task(self, name: str) -> TaskSpec:
        return next(t for t in self.tasks if t.name == name)

    def pid(self, name: str) -> int:
        return [t.name for t in self.tasks].index(name)

    def receiver(self) -> TaskSpec:
        return next(t for t in self.tasks if t.receiver)

    def site_ids(self) -> dict[str, int]:
        """Synthetic call-site ids: functions first, then task phases."""
        names = [s.name for s in self.sites]
        names += [f"{t.name}.{ph}" for t in self.tasks if not t.receiver for ph in PHASES]
        return {n: SITE_BASE + 4 * k + 1 for k, n in enumerate(names)}

    def patch(self, name: str) -> PatchSpec:
        return next(p for p in self.patches if p.name == name)

    def without_patches(self) -> ScenarioConfig:
        return dataclasses.replace(self, patches=[], deliveries=[],
                                   faults=[f for f in self.faults if f.at == "boot"])


# -- generic loader -----------------------------------------------------

_HINTS: dict[type, dict] = {}


def _hints(cls) -> dict:
    if cls not in _HINTS:
        _HINTS[cls] = get_type_hints(cls)
    return _HINTS[cls]


def _bad(path: str, msg: str):
    raise ScenarioInvalid([f"{path}: {msg}"])


def _load(tp, value, path: str):
    origin = get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            _bad(path, f"expected an object, got {type(value).__name__}")
        hints = _hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            _bad(f"{path}.{unknown[0]}", "unknown field")
        kwargs = {}
        for f in dataclasses.fields(tp):
            if f.name in value:
                kwargs[f.name] = _load(hints[f.name], value[f.name], f"{path}.{f.name}")
            elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                _bad(f"{path}.{f.name}", "required field missing")
        return tp(**kwargs)
    if origin in (Union, types.UnionType):
        args = [a for a in get_args(tp) if a is not type(None)]
        if value is None and len(args) < len(get_args(tp)):
            return None
        return _load(args[0], value, path)
    if origin is list:
        if not isinstance(value, list):
            _bad(path, f"expected a list, got {type(value).__name__}")
        (item,) = get_args(tp)
        return [_load(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            _bad(path, f"expected an object, got {type(value).__name__}")
        _, item = get_args(tp)
        return {k: _load(item, v, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            _bad(path, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _bad(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _bad(path, f"expected a number, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            _bad(path, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported schema type {tp!r}")


# -- validation ---------------------------------------------------------

def _us(errors: list[str], path: str, value, positive: bool = False) -> int:
    try:
        ns = us_to_ns(value)
    except ValueError as exc:
        errors.append(f"{path}: {exc}")
        return 0
    if positive and ns == 0:
        errors.append(f"{path}: must be positive")
    return ns


def validate(cfg: ScenarioConfig) -> None:
    """Check cross references and limits; raises ScenarioInvalid listing every problem."""
    errors: list[str] = []
    err = errors.append

    if cfg.profile not in PROFILES:
        err(f"scenario.profile: unknown cost profile {cfg.profile!r} (have {', '.join(PROFILES)})")
    _us(errors, "scenario.duration_us", cfg.duration_us)
    try:
        geometry = cfg.flash.geometry()
    except (ValueError, TypeError) as exc:
        err(f"scenario.flash: {exc}")
        geometry = None
    try:
        cfg.flash.timings()
    except ValueError as exc:
        err(f"scenario.flash: {exc}")
    if cfg.store.mode not in STORE_MODES:
        err(f"scenario.store.mode: must be one of {', '.join(STORE_MODES)}")
    if geometry is not None and not 0 < cfg.store.max_patch_size <= geometry.sector_size_bytes:
        err("scenario.store.max_patch_size: must be in (0, sector_size_bytes]")
    if cfg.runtime.max_patches <= 0:
        err("scenario.runtime.max_patches: must be positive")
    for name in ("boot_base_us", "boot_per_patch_us", "frame_rx_us"):
        _us(errors, f"scenario.runtime.{name}", getattr(cfg.runtime, name))

    if len(set(cfg.variables)) != len(cfg.variables):
        err("scenario.variables: duplicate variable name")
    variables = set(cfg.variables)

    site_names = set()
    for i, s in enumerate(cfg.sites):
        path = f"scenario.sites[{i}]"
        if s.name in site_names or "." in s.name:
            err(f"{path}.name: duplicate or dotted site name {s.name!r}")
        site_names.add(s.name)
        _us(errors, f"{path}.body_us", s.body_us)
        try:
            program.assemble(s.program, cfg.variables)
        except ValueError as exc:
            err(f"{path}.program: {exc}")

    if len(cfg.tasks) > MAX_TASKS:
        err(f"scenario.tasks: {len(cfg.tasks)} tasks, at most {MAX_TASKS} supported")
    task_names: set[str] = set()
    priorities: dict[int, str] = {}
    for i, t in enumerate(cfg.tasks):
        path = f"scenario.tasks[{i}]"
        if t.name in task_names or "." in t.name or not t.name or t.name == "-":
            err(f"{path}.name: duplicate or invalid task name {t.name!r}")
        task_names.add(t.name)
        if t.priority in priorities:
            err(f"{path}.priority: ties with task {priorities[t.priority]!r} (priorities must be distinct)")
        priorities.setdefault(t.priority, t.name)
        if t.receiver:
            continue
        period = _us(errors, f"{path}.period_us", t.period_us, positive=True)
        if t.deadline_us is not None:
            deadline = _us(errors, f"{path}.deadline_us", t.deadline_us, positive=True)
            if deadline > period:
                err(f"{path}.deadline_us: deadline exceeds period")
        _us(errors, f"{path}.offset_us", t.offset_us)
        if t.iterations is not None and t.iterations < 1:
            err(f"{path}.iterations: must be at least 1")
        for ph in PHASES:
            sec = getattr(t, ph)
            _us(errors, f"{path}.{ph}.body_us", sec.body_us)
            _us(errors, f"{path}.{ph}.buffer_us", sec.buffer_us)
            for j, call in enumerate(sec.calls):
                cpath = f"{path}.{ph}.calls[{j}]"
                if call.site not in site_names:
                    err(f"{cpath}.site: unknown site {call.site!r}")
                for var, values in call.inputs.items():
                    if var not in variables:
                        err(f"{cpath}.inputs.{var}: unknown variable")
                    if not values or any(not 0 <= v <= 0xFFFFFFFF for v in values):
                        err(f"{cpath}.inputs.{var}: need a non-empty list of 32-bit values")
                if call.result_var is not None and call.result_var not in variables:
                    err(f"{cpath}.result_var: unknown variable {call.result_var!r}")
    receivers = [t for t in cfg.tasks if t.receiver]
    if len(receivers) != 1:
        err(f"scenario.tasks: need exactly one receiver task, found {len(receivers)}")
    elif len(priorities) == len(cfg.tasks) and receivers[0].priority != min(priorities):
        err(f"scenario.tasks: receiver {receivers[0].name!r} must have the lowest priority")

    if len(cfg.patches) > cfg.runtime.max_patches:
        err(f"scenario.patches: {len(cfg.patches)} patches exceed max_patches={cfg.runtime.max_patches}")
    phase_sites = {f"{t.name}.{ph}" for t in cfg.tasks if not t.receiver for ph in PHASES}
    patch_names = set()
    for i, p in enumerate(cfg.patches):
        path = f"scenario.patches[{i}]"
        if p.name in patch_names:
            err(f"{path}.name: duplicate patch name {p.name!r}")
        patch_names.add(p.name)
        if p.site not in site_names and p.site not in phase_sites:
            err(f"{path}.site: unknown site {p.site!r}")
        if not p.tasks:
            err(f"{path}.tasks: must name at least one task")
        for name in p.tasks:
            if name not in task_names or any(t.receiver for t in cfg.tasks if t.name == name):
                err(f"{path}.tasks: {name!r} is not a periodic task")
        _us(errors, f"{path}.wcet_us", p.wcet_us)
        if p.install not in INSTALL:
            err(f"{path}.install: must be one of {', '.join(INSTALL)}")
        try:
            code = patch_code(cfg, p)
        except ValueError as exc:
            err(f"{path}.program: {exc}")
            continue
        size = len(code) if p.size is None else p.size
        if size < len(code):
            err(f"{path}.size: {size} is smaller than the assembled program ({len(code)} bytes)")
        if size > cfg.store.max_patch_size:
            err(f"{path}.size: {size} exceeds max_patch_size={cfg.store.max_patch_size}")

    for i, d in enumerate(cfg.deliveries):
        path = f"scenario.deliveries[{i}]"
        if d.patch not in patch_names:
            err(f"{path}.patch: unknown patch {d.patch!r}")
        elif next(p for p in cfg.patches if p.name == d.patch).install != "bus":
            err(f"{path}.patch: {d.patch!r} is a factory patch")
        _us(errors, f"{path}.at_us", d.at_us)
        _us(errors, f"{path}.frame_gap_us", d.frame_gap_us)
    for i, f in enumerate(cfg.faults):
        path = f"scenario.faults[{i}]"
        if f.kind not in FAULT_KINDS:
            err(f"{path}.kind: must be one of {', '.join(FAULT_KINDS)}")
        if f.at not in FAULT_AT:
            err(f"{path}.at: must be one of {', '.join(FAULT_AT)}")
        if f.n < 0 or f.index < 0:
            err(f"{path}: n and index must be non-negative")
        if f.kind in ("mid_program", "mid_erase") and f.n < 1:
            err(f"{path}.n: mid-op faults count from 1")
        if f.at == "load" and f.index >= len(cfg.deliveries):
            err(f"{path}.index: no delivery number {f.index}")
    if errors:
        raise ScenarioInvalid(errors)


# -- compilation ----------------------------------------------------------

@dataclass(frozen=True)
class CompiledPatch:
    name: str
    key: int
    tasks: int
    wcet_ns: int
    code: bytes


def patch_code(cfg: ScenarioConfig, spec: PatchSpec) -> bytes:
    """Assembled program padded with zero bytes to spec.size.

    The END terminator is left out when the declared size has no room for it;
    the program then ends with its last byte.
    """
    code = program.assemble(spec.program, cfg.variables)
    if spec.size is None:
        return code
    if len(code) > spec.size:
        bare = program.assemble(spec.program, cfg.variables, terminate=False)
        if len(bare) <= spec.size:
            code = bare
    if len(code) > spec.size:
        return code
    return code + bytes(spec.size - len(code))


def compile_patch(cfg: ScenarioConfig, spec: PatchSpec) -> CompiledPatch:
    code = patch_code(cfg, spec)
    mask = 0
    for name in spec.tasks:
        mask |= 1 << cfg.pid(name)
    key = cfg.site_ids()[spec.site]
    assert key != EMPTY_KEY
    return CompiledPatch(spec.name, key, mask, us_to_ns(spec.wcet_us), code)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioInvalid([f"{path}: {exc.strerror}"]) from None
    return ScenarioConfig.loads(text, str(path))


def bundled_dir() -> Path:
    return Path(__file__).parent / "scenarios"


def bundled(name: str) -> ScenarioConfig:
    return load_scenario(bundled_dir() / f"{name}.json")


def bundled_names() -> list[str]:
    return sorted(p.stem for p in bundled_dir().glob("*.json"))


def resolve(path_or_name: str) -> Path:
    """Accept a file path or the name of a bundled scenario."""
    p = Path(path_or_name)
    if p.exists():
        return p
    candidate = bundled_dir() / f"{path_or_name.removesuffix('.json')}.json"
    return candidate if candidate.exists() else p


def scenario_any(value: Any) -> ScenarioConfig:
    if isinstance(value, ScenarioConfig):
        return value
    return load_scenario(resolve(str(value)))
