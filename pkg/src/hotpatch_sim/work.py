"""Units of simulated work yielded by task code, and a standalone driver.

Task behaviour (placeholders, bodies, delays, flash writes) is written as
generators that yield these segments. The scheduler in sim.py interleaves them;
run_inline() just executes them back to back, which is enough for unit tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Generator

from .flash import FlashOp


@dataclass
class Cpu:
    """Preemptible CPU time."""

    ns: int
    label: str = "cpu"


@dataclass
class Block:
    """Non-preemptible time (e.g. a flash program command)."""

    ns: int
    label: str = "block"
    op: FlashOp | None = None


@dataclass
class EraseWork:
    """A sector erase. If op.interruptible the scheduler may suspend it."""

    op: FlashOp


@dataclass
class PowerFail:
    """Power is cut when this segment is reached."""

    op: FlashOp | None = None
    mid_op: bool = False


Work = Generator[Any, None, Any]


class InlineContext:
    """Minimal task context: a private clock and an event list."""

    def __init__(self, pid: int = 0, name: str = "task"):
        self.pid = pid
        self.name = name
        self.now = 0
        self.cpu_ns = 0
        self.events: list[tuple[int, str, dict]] = []

    def emit(self, kind: str, **details):
        self.events.append((self.now, kind, details))

    def kinds(self) -> list[str]:
        return [k for _, k, _ in self.events]


def run_inline(gen: Work, ctx: InlineContext | None = None):
    """Drive a work generator with no preemption; returns its return value."""
    while True:
        try:
            seg = next(gen)
        except StopIteration as stop:
            return stop.value
        if isinstance(seg, (Cpu, Block)):
            if ctx is not None:
                ctx.now += seg.ns
                ctx.cpu_ns += seg.ns
        elif isinstance(seg, EraseWork):
            if ctx is not None:
                ctx.now += seg.op.duration_ns
                ctx.cpu_ns += seg.op.duration_ns
        elif isinstance(seg, PowerFail):
            raise RuntimeError("power failure while running inline")
        else:
            raise TypeError(f"unknown work segment {seg!r}")
