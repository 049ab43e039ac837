"""Command-line front end.

    hotpatch-sim run SCENARIO [--trace FILE] [--profile NAME]
    hotpatch-sim sweep-power-loss SCENARIO --phase load|recover --out DIR
    hotpatch-sim report TRACE [TRACE ...]
    hotpatch-sim validate SCENARIO [SCENARIO ...]

SCENARIO is a JSON file path or the name of a bundled scenario. The
PATCHLINGS_PROFILE environment variable overrides the cost profile.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import report as report_mod
from . import sweep as sweep_mod
from .runtime import PROFILES
from .scenario import ScenarioInvalid, bundled_names, load_scenario, resolve
from .sim import simulate
from .trace import TraceParseError, read_trace, write_trace

ENV_PROFILE = "PATCHLINGS_PROFILE"


def _profile(args) -> str | None:
    name = os.environ.get(ENV_PROFILE) or getattr(args, "profile", None)
    if name is not None and name not in PROFILES:
        raise ScenarioInvalid([f"unknown cost profile {name!r} (have {', '.join(PROFILES)})"])
    return name


def cmd_run(args) -> int:
    cfg = load_scenario(resolve(args.scenario))
    world = simulate(cfg, _profile(args))
    if args.trace:
        write_trace(world.trace, args.trace)
    v = world.verdict()
    print(f"scenario: {cfg.name}")
    print(f"profile: {world.profile.name}")
    print(v.format(), end="")
    return 0 if v.ok else 1


def cmd_sweep(args) -> int:
    cfg = load_scenario(resolve(args.scenario))
    try:
        results = sweep_mod.sweep(cfg, args.phase, args.jobs)
    except sweep_mod.SweepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = sweep_mod.write_results(results, args.out, args.phase, cfg.name)
    print(summary, end="")
    return 0 if all(r.ok for r in results) else 1


def cmd_report(args) -> int:
    events = []
    for path in args.traces:
        try:
            events.extend(read_trace(path))
        except (OSError, TraceParseError) as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            return 2
    print(report_mod.report(events), end="")
    return 0


def cmd_validate(args) -> int:
    status = 0
    for name in args.scenarios:
        try:
            cfg = load_scenario(resolve(name))
        except ScenarioInvalid as exc:
            print(exc, file=sys.stderr)
            status = 1
            continue
        print(f"{cfg.name}: ok")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hotpatch-sim", description="Simulate task-aware hotpatching on a real-time system.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and print its verdict")
    p.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    p.add_argument("--trace", help="write the event trace to this file")
    p.add_argument("--profile", choices=sorted(PROFILES), help="override the scenario's cost profile")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-power-loss", help="inject a power loss at every flash operation point")
    p.add_argument("scenario")
    p.add_argument("--phase", choices=sweep_mod.PHASES, default="load")
    p.add_argument("--out", required=True, help="directory for per-point verdicts and the summary")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize one or more trace files")
    p.add_argument("traces", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="check scenario files without running them")
    p.add_argument("scenarios", nargs="*", help="defaults to every bundled scenario")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate" and not args.scenarios:
        args.scenarios = bundled_names()
    try:
        return args.func(args)
    except ScenarioInvalid as exc:
        print(exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
