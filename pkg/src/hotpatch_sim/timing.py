"""Per-task timing buffers.

Each protected section starts by loading its configured buffer into the
task's active slot. Patch execution deducts its WCET from that slot and the
section ends by busy-waiting whatever is left, so the section's CPU demand does
not depend on how much of the buffer patches used.
"""

from __future__ import annotations

from .work import Cpu

MAX_TASKS = 32


class TimingState:
    def __init__(self):
        self.active_ns = [0] * MAX_TASKS
        self.section = [None] * MAX_TASKS
        self.configured: dict[tuple[int, str], int] = {}

    def configure(self, pid: int, section: str, buffer_ns: int):
        self._check(pid)
        self.configured[(pid, section)] = buffer_ns

    def _check(self, pid: int):
        if not 0 <= pid < MAX_TASKS:
            raise ValueError(f"pid {pid} outside 0..{MAX_TASKS - 1}")

    def section_enter(self, pid: int, buffer_ns: int, section: str | None = None):
        self._check(pid)
        if buffer_ns < 0:
            raise ValueError("buffer must be non-negative")
        self.active_ns[pid] = buffer_ns
        self.section[pid] = section

    def deduct(self, pid: int, wcet_ns: int) -> tuple[int, bool]:
        """Saturating deduction; returns (remaining, exhausted)."""
        self._check(pid)
        before = self.active_ns[pid]
        self.active_ns[pid] = max(0, before - wcet_ns)
        return self.active_ns[pid], wcet_ns > before

    def take_remaining(self, pid: int) -> int:
        self._check(pid)
        left = self.active_ns[pid]
        self.active_ns[pid] = 0
        return left


def delay(timing: TimingState, ctx, overhead_ns: int):
    """Consume the rest of the active buffer as preemptible busy time."""
    remaining = timing.take_remaining(ctx.pid)
    ctx.emit("DELAY", remaining_ns=remaining)
    yield Cpu(overhead_ns, "delay_call")
    if remaining:
        yield Cpu(remaining, "delay")
    return remaining
