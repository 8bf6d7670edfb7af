"""Command-line entry point: run, check, explore, syncmgr, compare."""

from __future__ import annotations

import argparse
import os
import sys
from collections import Counter

from . import checker
from .engine import (
    MigrateDirective,
    Replay,
    SeededRandom,
    explore,
    format_decisions,
    parse_decisions,
    run,
)
from .policy import PolicyConfig, compare, to_csv
from .sc import is_drf, sc_outcomes
from .syncmgr import ScriptError, parse_script, simulate
from .syntax import ParseError, ValidationError, load_program
from .trace import Trace, TraceFormatError

EXIT_OK, EXIT_VIOLATIONS, EXIT_INPUT, EXIT_DEADLOCK, EXIT_PARTIAL = 0, 1, 2, 3, 4
MAX_CORES = 512
ENV_PREFIX = "DJCSIM_"


class InputError(Exception):
    pass


def _env(name: str, default, conv=str):
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None:
        return default
    try:
        return conv(raw)
    except ValueError as exc:
        raise InputError(f"bad value for {ENV_PREFIX}{name}: {raw!r}") from exc


def _flag(raw: str) -> bool:
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(raw)


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc


def _load(path: str):
    text = _read(path)
    try:
        return load_program(text)
    except ParseError as exc:
        raise InputError(f"{path}:{exc.line}:{exc.col}: {exc}") from exc
    except ValidationError as exc:
        raise InputError("\n".join(f"{path}: {v}" for v in exc.report)) from exc


def _seeds(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        lo, sep, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="djcsim", description="Simulate concurrent programs on cores with "
                                 "software-managed caches, and check the traces they produce.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def machine_flags(p: argparse.ArgumentParser, cores_default: int) -> None:
        p.add_argument("--cores", type=int, default=_env("CORES", cores_default, int))
        p.add_argument("--wb-threshold", type=int, default=_env("WB_THRESHOLD", 16, int),
                       help="write buffer capacity per core")
        p.add_argument("--policy", choices=("buffered", "eager"), default=_env("POLICY", "buffered"))

    r = sub.add_parser("run", help="execute a program and write its trace")
    r.add_argument("program")
    machine_flags(r, 8)
    r.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    r.add_argument("--schedule", default=_env("SCHEDULE", "random"),
                   help="random | parallel | replay:PATH | exhaustive:DEPTH")
    r.add_argument("--managers", type=int, default=_env("MANAGERS", 1, int))
    r.add_argument("--checkpoints", action="store_true", default=_env("CHECKPOINTS", False, _flag))
    r.add_argument("--trace", default=_env("TRACE", "trace.jsonl"), help="trace output path")
    r.add_argument("--schedule-out", default=None, help="where to record decisions (default TRACE.schedule)")
    r.add_argument("--migrate", action="append", default=[], metavar="tK@STEP:cD",
                   help="move thread K to core D once step STEP is reached")
    r.add_argument("--budget", type=int, default=_env("BUDGET", 1_000_000, int))
    r.add_argument("--check", action="store_true", help="also check the trace")

    c = sub.add_parser("check", help="check a trace for well-formedness")
    c.add_argument("trace")
    c.add_argument("--rules", default=None, help="comma-separated rule ids, e.g. WF-5,WF-16")
    c.add_argument("--checkpoints", default=None, help="checkpoint file (default TRACE.ckpt if present)")

    e = sub.add_parser("explore", help="enumerate interleavings and print final heaps")
    e.add_argument("program")
    machine_flags(e, 2)
    e.add_argument("--depth", type=int, default=_env("DEPTH", 400, int))
    e.add_argument("--max-states", type=int, default=200_000)
    e.add_argument("--demand-only", action="store_true", help="no spontaneous write-backs or invalidations")
    e.add_argument("--migrations", action="store_true")
    e.add_argument("--sc", action="store_true", help="also compare with sequentially consistent outcomes")

    s = sub.add_parser("syncmgr", help="simulate monitor managers on a client event script")
    s.add_argument("script")
    s.add_argument("--managers", type=int, default=_env("MANAGERS", 1, int))
    s.add_argument("--seed", type=int, default=None, help="random arrival order among ready clients")

    k = sub.add_parser("compare", help="compare write-back policies as CSV")
    k.add_argument("program")
    k.add_argument("--cores", type=int, default=_env("CORES", 8, int))
    k.add_argument("--thresholds", default="16", help="buffer capacities for the buffered policy")
    k.add_argument("--seeds", default="0", help="e.g. 0-9 or 1,5,7")
    return ap


def _check_cores(n: int) -> None:
    if not 1 <= n <= MAX_CORES:
        raise InputError(f"--cores must be between 1 and {MAX_CORES}")


def cmd_run(a: argparse.Namespace) -> int:
    _check_cores(a.cores)
    if a.managers < 1:
        raise InputError("--managers must be at least 1")
    if a.wb_threshold < 1:
        raise InputError("--wb-threshold must be at least 1")
    p = _load(a.program)
    kind, _, arg = a.schedule.partition(":")
    if kind == "exhaustive":
        depth = int(arg) if arg else 400
        res = explore(p, depth, cores=a.cores, capacity=a.wb_threshold, policy=a.policy)
        for fp in sorted(res.outcomes):
            print(_fp_text(fp))
        print(f"# {len(res.outcomes)} final heaps, {res.states} states" + (" (partial)" if res.partial else ""))
        return EXIT_PARTIAL if res.partial else EXIT_OK
    try:
        migs = [MigrateDirective.parse(x) for x in a.migrate]
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if kind == "replay":
        try:
            sched = Replay(parse_decisions(_read(arg)))
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    elif kind in ("random", "parallel"):
        sched = SeededRandom(a.seed, parallel=kind == "parallel")
    else:
        raise InputError(f"unknown schedule {a.schedule!r}")
    try:
        res = run(p, sched, cores=a.cores, capacity=a.wb_threshold, policy=a.policy, budget=a.budget,
                  checkpoints=a.checkpoints, migrations=migs)
    except ValueError as exc:  # bad replay decisions
        raise InputError(str(exc)) from exc
    res.trace.write(a.trace)
    with open(a.schedule_out or a.trace + ".schedule", "w", encoding="utf-8") as fh:
        fh.write(format_decisions(res.decisions))
    if a.checkpoints:
        with open(checker.checkpoint_path(a.trace), "w", encoding="utf-8") as fh:
            fh.write(checker.dumps_checkpoints(res.trace.checkpoints))
    kinds = Counter(x.kind for x in res.trace)
    print(f"status: {res.status}")
    print(f"steps: {res.steps}")
    print("actions: " + " ".join(f"{k}={kinds[k]}" for k in sorted(kinds)))
    lifes = {r: o.lifecycle for r, o in sorted(res.state.heap.items()) if o.lifecycle}
    print("threads: " + " ".join(f"t{t}={lc}" for t, lc in lifes.items()))
    for t, why in sorted(res.blocked.items()):
        print(f"blocked t{t}: {why}")
    print(f"trace: {a.trace}")
    code = {"finished": EXIT_OK, "deadlock": EXIT_DEADLOCK, "stuck": EXIT_DEADLOCK}.get(res.status, EXIT_PARTIAL)
    if a.check:
        rep = checker.check(res.trace)
        sys.stdout.write(rep.dumps())
        print(f"violations: {len(rep.violations)}")
        if rep.violations and code == EXIT_OK:
            code = EXIT_VIOLATIONS
    return code


def cmd_check(a: argparse.Namespace) -> int:
    try:
        rules = checker.parse_rule_filter(a.rules)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    try:
        tr = Trace.loads(_read(a.trace))
    except TraceFormatError as exc:
        raise InputError(f"{a.trace}: {exc}") from exc
    ck = a.checkpoints or checker.checkpoint_path(a.trace)
    if os.path.exists(ck):
        try:
            tr.checkpoints = checker.loads_checkpoints(_read(ck))
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{ck}: bad checkpoint file: {exc}") from exc
    elif a.checkpoints:
        raise InputError(f"cannot read {a.checkpoints}")
    try:
        rep = checker.check(tr, rules if a.rules else None)
    except checker.MissingCheckpoints as exc:
        raise InputError(str(exc)) from exc
    sys.stdout.write(rep.dumps())
    return EXIT_VIOLATIONS if rep.violations else EXIT_OK


def _fp_text(fp: tuple) -> str:
    return " ".join(f"{o}.{f}={v}" for o, f, v in fp)


def cmd_explore(a: argparse.Namespace) -> int:
    _check_cores(a.cores)
    p = _load(a.program)
    res = explore(p, a.depth, cores=a.cores, capacity=a.wb_threshold, policy=a.policy,
                  spontaneous=not a.demand_only, migrations=a.migrations, max_states=a.max_states)
    for fp in sorted(res.outcomes):
        o = res.outcomes[fp]
        print(f"{o.status}: {_fp_text(fp)}")
    print(f"# {len(res.outcomes)} final heaps, {res.states} states, {res.terminals} terminal paths"
          + (" (partial)" if res.partial else ""))
    partial = res.partial
    if a.sc:
        sc = sc_outcomes(p, a.depth)
        drf = is_drf(p, a.depth)
        extra = res.fingerprints - sc.outcomes
        print(f"# sc outcomes: {len(sc.outcomes)}; not sequentially consistent: {len(extra)}")
        verdict = "unknown" if drf.drf is None else ("yes" if drf.drf else "no")
        print(f"# data-race-free: {verdict}" + (f" ({drf.witness})" if drf.witness else ""))
        partial = partial or sc.partial
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_syncmgr(a: argparse.Namespace) -> int:
    if a.managers < 1:
        raise InputError("--managers must be at least 1")
    try:
        events = parse_script(_read(a.script))
    except ScriptError as exc:
        raise InputError(f"{a.script}: {exc}") from exc
    res = simulate(events, a.managers, seed=a.seed)
    for line in res.lines():
        print(line)
    return EXIT_OK if not res.faults() and not res.stuck else EXIT_DEADLOCK


def cmd_compare(a: argparse.Namespace) -> int:
    _check_cores(a.cores)
    p = _load(a.program)
    try:
        seeds = _seeds(a.seeds)
        configs = [PolicyConfig("eager", 1)] + [PolicyConfig("buffered", int(t)) for t in a.thresholds.split(",")]
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    sys.stdout.write(to_csv(compare(p, seeds, configs, cores=a.cores)))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "check": cmd_check, "explore": cmd_explore, "syncmgr": cmd_syncmgr,
            "compare": cmd_compare}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.cmd](args)
    except InputError as exc:
        print(f"djcsim: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
