"""Trace events, the tab-separated trace file format, and verdicts.

One event per line: time_ns, task, kind, then zero or more key=value fields,
all separated by tabs. Events are written in emission order, which is also
time order.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

KINDS = (
    "BOOT", "SCAN", "RECOVERY_STEP", "POWER_LOSS", "PATCH_ACTIVE",
    "SECTION_START", "SECTION_END", "PLACEHOLDER", "DISPATCH", "CALL_RETURN",
    "DELAY", "JOB_END", "DEADLINE_MISS", "BUFFER_EXHAUSTED",
    "FRAME", "FLASH_OP", "FAULT",
)

# kinds that make a run unsafe
VIOLATIONS = ("DEADLINE_MISS", "BUFFER_EXHAUSTED", "FAULT")


class TraceParseError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    time_ns: int
    task: str
    kind: str
    details: tuple[tuple[str, str], ...] = ()

    def get(self, key: str, default=None):
        for k, v in self.details:
            if k == key:
                return v
        return default

    def int(self, key: str, default: int = 0) -> int:
        v = self.get(key)
        return default if v is None else int(v)

    def format(self) -> str:
        fields = [str(self.time_ns), self.task, self.kind]
        fields.extend(f"{k}={v}" for k, v in self.details)
        return "\t".join(fields)


def _text(value) -> str:
    tp = type(value)
    if tp is int:
        return str(value)
    if tp is str:
        if "\t" in value or "\n" in value:
            raise ValueError(f"trace value {value!r} contains a tab or newline")
        return value
    if tp is bool:
        return "1" if value else "0"
    if value is None:
        return "-"
    text = str(value)
    if "\t" in text or "\n" in text:
        raise ValueError(f"trace value {text!r} contains a tab or newline")
    return text


def make_event(time_ns: int, task: str, kind: str, details: dict) -> Event:
    return Event(time_ns, task, kind, tuple((k, _text(v)) for k, v in details.items()))


def parse_line(line: str, lineno: int = 0) -> Event:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 3:
        raise TraceParseError(f"line {lineno}: expected at least 3 tab-separated fields")
    try:
        t = int(parts[0])
    except ValueError:
        raise TraceParseError(f"line {lineno}: bad time {parts[0]!r}") from None
    details = []
    for field in parts[3:]:
        key, sep, value = field.partition("=")
        if not sep or not key:
            raise TraceParseError(f"line {lineno}: bad detail field {field!r}")
        details.append((key, value))
    return Event(t, parts[1], parts[2], tuple(details))


def dumps(events: Iterable[Event]) -> str:
    return "".join(e.format() + "\n" for e in events)


def loads(text: str) -> list[Event]:
    events = []
    last = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        ev = parse_line(line, lineno)
        if last is not None and ev.time_ns < last:
            raise TraceParseError(f"line {lineno}: time goes backwards")
        last = ev.time_ns
        events.append(ev)
    return events


def write_trace(events: Iterable[Event], path) -> None:
    Path(path).write_text(dumps(events))


def read_trace(path) -> list[Event]:
    return loads(Path(path).read_text())


@dataclass
class Verdict:
    counts: dict[str, int]

    @property
    def violations(self) -> int:
        return sum(self.counts.get(k, 0) for k in VIOLATIONS)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def format(self) -> str:
        lines = ["verdict: " + ("PASS" if self.ok else "FAIL")]
        for kind in KINDS:
            lines.append(f"  {kind:<17} {self.counts.get(kind, 0)}")
        for kind in sorted(set(self.counts) - set(KINDS)):
            lines.append(f"  {kind:<17} {self.counts[kind]}")
        lines.append(f"  {'violations':<17} {self.violations}")
        return "\n".join(lines) + "\n"


def verdict(events: Iterable[Event]) -> Verdict:
    return Verdict(dict(Counter(e.kind for e in events)))
