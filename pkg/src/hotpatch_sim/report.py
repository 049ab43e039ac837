"""Plain-text summary tables over one or more trace files."""

from __future__ import annotations

from collections import Counter, defaultdict

from .timeunits import fmt_us
from .trace import Event, verdict


def _table(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    lines = [f"== {title} =="]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def response_times(events: list[Event]) -> dict[str, tuple[int, int, int]]:
    """task -> (jobs, min response ns, max response ns)."""
    acc: dict[str, list[int]] = defaultdict(list)
    for e in events:
        if e.kind == "JOB_END":
            acc[e.task].append(e.int("response_ns"))
    return {t: (len(v), min(v), max(v)) for t, v in acc.items()}


def max_flash_blocking_ns(events: list[Event]) -> int:
    return max((e.int("blocking_ns") for e in events if e.kind == "FLASH_OP"), default=0)


def max_probes(events: list[Event]) -> int:
    return max((e.int("probes") for e in events if e.kind == "DISPATCH"), default=0)


def report(events: list[Event]) -> str:
    out = []
    v = verdict(events)
    rt = response_times(events)
    misses = Counter(e.task for e in events if e.kind == "DEADLINE_MISS")
    rows = [[t, str(n), fmt_us(lo), fmt_us(hi), str(misses.get(t, 0))] for t, (n, lo, hi) in sorted(rt.items())]
    rows.append(["(all)", str(sum(n for n, _, _ in rt.values())),
                 fmt_us(min((lo for _, lo, _ in rt.values()), default=0)),
                 fmt_us(max((hi for _, _, hi in rt.values()), default=0)), str(sum(misses.values()))])
    out.append(_table("response times (us)", ["task", "jobs", "min", "max", "misses"], rows))

    hist = Counter((e.get("path"), e.int("cost_ns")) for e in events if e.kind == "PLACEHOLDER")
    rows = [[path, fmt_us(cost), str(n)] for (path, cost), n in sorted(hist.items())]
    for path in ("inline", "dispatch"):
        if not any(r[0] == path for r in rows):
            rows.append([path, "0", "0"])
    out.append(_table("placeholder cost histogram", ["path", "cost_us", "count"], rows))

    ops = [e for e in events if e.kind == "FLASH_OP"]
    by_op: dict[str, list[int]] = defaultdict(list)
    for e in ops:
        by_op[e.get("op")].append(e.int("blocking_ns"))
    rows = [[op, str(len(b)), fmt_us(max(b))] for op, b in sorted(by_op.items())]
    rows.append(["(max)", str(len(ops)), fmt_us(max_flash_blocking_ns(events))])
    out.append(_table("flash blocking intervals", ["op", "count", "max_blocking_us"], rows))

    probes: dict[str, int] = defaultdict(int)
    for e in events:
        if e.kind == "DISPATCH":
            probes[e.task] = max(probes[e.task], e.int("probes"))
    rows = [[t, str(p)] for t, p in sorted(probes.items())]
    rows.append(["(max)", str(max_probes(events))])
    out.append(_table("lookup probes", ["task", "max_probes"], rows))

    out.append(v.format())
    return "\n".join(out)
