"""Global transitions, schedulers, full runs with trace assembly, and bounded exhaustive exploration."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field

from . import rules as R
from .machine import (
    START,
    MachineState,
    ThreadTerm,
    heap_fingerprint,
    initial_state,
    snapshot,
)
from .rules import RuleInstance, RuleNotEnabled, demand, premises_hold
from .syntax import UNIT, Lit, Program, print_expr, print_program
from .trace import SYNC_KINDS, Action, GlobalTransition, Trace

DEFAULT_BUDGET = 1_000_000
MAX_PARALLEL = 4


class InvalidChoice(Exception):
    """A set of local steps that cannot form one global transition."""


# ---------------------------------------------------------------------------
# Schedules and replay decisions


@dataclass(frozen=True, slots=True)
class Decision:
    step: int
    core: int
    rule: str
    target: str
    thread: int

    def text(self) -> str:
        return f"step {self.step}: core {self.core} rule {self.rule} target {self.target} thread {self.thread}"

    _RE = re.compile(r"^step (\d+): core (\d+) rule (\w+) target (\S+)(?: thread (\d+))?$")

    @classmethod
    def parse(cls, line: str) -> "Decision":
        mt = cls._RE.match(line.strip())
        if mt is None:
            raise ValueError(f"bad schedule line: {line!r}")
        thread = -1 if mt.group(5) is None else int(mt.group(5))
        return cls(int(mt.group(1)), int(mt.group(2)), mt.group(3), mt.group(4), thread)

    def instance(self, s: MachineState) -> RuleInstance:
        target: object = None
        t = self.target
        if t == "-":
            target = None
        elif t.startswith("c") and self.rule == "Migrate":
            target = int(t[1:])
        elif t.startswith("r"):
            head, _, fld = t[1:].partition(".")
            target = (int(head), fld) if fld else int(head)
        else:
            raise ValueError(f"bad decision target {t!r}")
        thread = self.thread
        if thread < 0:  # lines without a thread field: the lowest term on that core
            on = s.terms_on(self.core)
            if not on:
                raise ValueError(f"no thread on core {self.core} at step {self.step}")
            thread = on[0].thread
        return RuleInstance(self.rule, thread, self.core, target)


def decision_of(step: int, ri: RuleInstance) -> Decision:
    return Decision(step, ri.core, ri.rule, ri.target_text(), ri.thread)


def format_decisions(ds: list[Decision]) -> str:
    return "".join(d.text() + "\n" for d in ds)


def parse_decisions(text: str) -> list[Decision]:
    return [Decision.parse(ln) for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


class Schedule:
    pass


@dataclass
class SeededRandom(Schedule):
    seed: int = 0
    parallel: bool = False


@dataclass
class Replay(Schedule):
    decisions: list[Decision] = field(default_factory=list)


@dataclass
class ExhaustiveBounded(Schedule):
    max_depth: int = 200


@dataclass(frozen=True)
class MigrateDirective:
    """Move thread `thread` to core `dest` once global step `step` is reached."""

    step: int
    thread: int
    dest: int

    _RE = re.compile(r"^t(\d+)@(\d+):c(\d+)$")

    @classmethod
    def parse(cls, text: str) -> "MigrateDirective":
        mt = cls._RE.match(text.strip())
        if mt is None:
            raise ValueError(f"bad migration directive {text!r}; expected t<thread>@<step>:c<core>")
        return cls(int(mt.group(2)), int(mt.group(1)), int(mt.group(3)))


# ---------------------------------------------------------------------------
# Global steps


def _apply_set(s: MachineState, choices: list[RuleInstance], step: int) -> GlobalTransition:
    cores = [ri.core for ri in choices]
    if len(set(cores)) != len(cores):
        raise InvalidChoice("two local steps on one core")
    writers = [ri for ri in choices if ri.rule in R.HEAP_WRITERS]
    if len(writers) > 1:
        raise InvalidChoice("more than one heap-writing step")
    if sum(ri.rule in R.SYNC_RULES for ri in choices) > 1:
        raise InvalidChoice("more than one synchronization step")
    if len(choices) > 1 and any(ri.rule in R.EXCLUSIVE for ri in choices):
        raise InvalidChoice("migration must run alone")
    for ri in choices:
        if not premises_hold(s, ri):
            raise RuleNotEnabled(f"{ri.rule} not enabled for t{ri.thread} on core {ri.core}")
    ordered = [ri for ri in choices if ri.rule not in R.HEAP_WRITERS] + writers
    acts: list[Action] = []
    for ri in ordered:
        acts.extend(R.apply_in_place(s, ri))
    for k, a in enumerate(acts):
        a.step, a.ord = step, k
    return GlobalTransition(step, tuple(ri.core for ri in ordered), acts, [ri.rule for ri in ordered], ordered)


def lift(s: MachineState, tt: ThreadTerm, ri: RuleInstance, step: int = 0) -> tuple[GlobalTransition, MachineState]:
    """One local step as a global transition on a copy of the state."""
    if ri.core != tt.core:
        raise InvalidChoice(f"rule on core {ri.core} for a thread on core {tt.core}")
    s2 = s.clone()
    return _apply_set(s2, [ri], step), s2


def par_step(s: MachineState, choices: list[RuleInstance], step: int = 0) -> tuple[GlobalTransition, MachineState]:
    """Several local steps on distinct cores in one transition; at most one may write the heap."""
    s2 = s.clone()
    return _apply_set(s2, list(choices), step), s2


def spawn(s: MachineState, parent: ThreadTerm, child: int, step: int = 0) -> tuple[list[GlobalTransition], MachineState]:
    """The parent's release flush followed by the spawn itself."""
    s2 = s.clone()
    out = []
    while True:
        d = demand(s2, s2.threads[parent.thread])
        if not d.rules:
            raise RuleNotEnabled(f"spawn of t{child} blocked: {d.status} {d.reason}")
        ri = d.rules[0]
        if ri.rule not in R.IMPLICIT and (ri.rule != "Spawn" or ri.target != child):
            raise RuleNotEnabled(f"t{parent.thread} is not at start() of t{child}")
        out.append(_apply_set(s2, [ri], step + len(out)))
        if ri.rule == "Spawn":
            return out, s2


def migrate(s: MachineState, tt: ThreadTerm, dest: int, step: int = 0) -> tuple[GlobalTransition, MachineState]:
    return lift(s, tt, RuleInstance("Migrate", tt.thread, tt.core, dest), step)


def migration_prep(s: MachineState, t: int, dest: int) -> RuleInstance | None:
    """The next write-back/invalidation needed before thread t may move to `dest`, or the move itself."""
    tt = s.threads[t]
    src = tt.core
    if dest == src or not 0 <= dest < s.cores:
        return None
    step = R.m.next_flush_step(s, src, False)
    if step is not None:
        return RuleInstance(step[0], t, src, step[1])
    step = R.m.next_flush_step(s, dest, True)
    if step is not None:
        on = s.terms_on(dest)
        if not on:
            return None
        return RuleInstance(step[0], on[0].thread, dest, step[1])
    return RuleInstance("Migrate", t, src, dest)


# ---------------------------------------------------------------------------
# Runs


@dataclass
class RunResult:
    trace: Trace
    state: MachineState
    status: str  # finished | deadlock | stuck | budget | replay-end
    steps: int
    decisions: list[Decision]
    blocked: dict[int, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "finished"


def thread_status(s: MachineState) -> dict[int, R.Demand]:
    return {t: demand(s, tt) for t, tt in sorted(s.threads.items())}


def _final_status(s: MachineState) -> tuple[str, dict[int, str]]:
    blocked: dict[int, str] = {}
    stuck = False
    for t, d in thread_status(s).items():
        if d.status == "done":
            continue
        blocked[t] = f"{d.status}: {d.reason}"
        stuck = stuck or d.status == "stuck"
    # spawned-but-absent threads cannot exist; every lifecycle-set object has a term
    if not blocked:
        return "finished", blocked
    return ("stuck" if stuck else "deadlock"), blocked


def build_meta(s: MachineState, so_cache: bool) -> dict:
    meta = {
        "program": print_program(s.program),
        "cores": s.cores,
        "capacity": s.capacity,
        "policy": s.policy,
        "allocs": {str(r): [a.cls, a.thread, a.index] for r, a in sorted(s.allocs.items())},
    }
    if so_cache:
        meta["so_cache"] = True
    return meta


class _Runner:
    def __init__(self, s: MachineState, budget: int, checkpoints: bool, so_cache: bool):
        self.s = s
        self.budget = budget
        self.so_cache = so_cache
        self.transitions: list[GlobalTransition] = []
        self.decisions: list[Decision] = []
        self.step = 0
        self.checkpoints = [{"step": -1, "cores": [], "state": snapshot(s)}] if checkpoints else None

    def commit(self, choices: list[RuleInstance]) -> GlobalTransition:
        tr = _apply_set(self.s, choices, self.step)
        for ri in tr.choices:
            self.decisions.append(decision_of(self.step, ri))
        self.transitions.append(tr)
        if self.checkpoints is not None:
            self.checkpoints.append({"step": self.step, "cores": sorted(set(tr.cores)), "state": snapshot(self.s)})
        self.step += 1
        return tr

    def finish(self, status: str, blocked: dict[int, str]) -> RunResult:
        trace = Trace([t for t in self.transitions if t.actions], list(self.s.prologue),
                      build_meta(self.s, self.so_cache), self.checkpoints)
        kinds = SYNC_KINDS | {"F", "B"} if self.so_cache else SYNC_KINDS
        trace.finalize(kinds)
        return RunResult(trace, self.s, status, self.step, self.decisions, blocked)


def _ready(s: MachineState, t: int) -> R.Demand:
    return demand(s, s.threads[t])


def run(program: Program | MachineState, schedule: Schedule | None = None, *, cores: int = 8,
        capacity: int = 16, policy: str = "buffered", budget: int = DEFAULT_BUDGET, checkpoints: bool = False,
        migrations: list[MigrateDirective] | None = None, so_cache: bool = False) -> RunResult:
    """Drive the machine to completion (or deadlock) under a schedule and assemble the trace."""
    s = program.clone() if isinstance(program, MachineState) else initial_state(program, cores, capacity, policy)
    schedule = schedule or SeededRandom(0)
    rn = _Runner(s, budget, checkpoints, so_cache)
    if isinstance(schedule, Replay):
        return _replay(rn, schedule.decisions)
    if isinstance(schedule, ExhaustiveBounded):
        raise ValueError("exhaustive schedules enumerate many runs; use explore()")
    rng = random.Random(schedule.seed)
    pending = sorted(migrations or [], key=lambda d: (d.step, d.thread))
    pinned: int | None = None
    eager_pin = False
    live = sorted(t for t in s.threads if s.heap[t].lifecycle != "finished")
    while True:
        if rn.step >= budget:
            return rn.finish("budget", {})
        # a directive waits for its thread to start; it lapses once the thread has finished
        mig = None
        if pending and pinned is None:
            mig = next((d for d in pending if d.step <= rn.step and d.thread in s.threads
                        and s.threads[d.thread].body is not START), None)
        if mig is not None:
            ri = None
            if s.heap[mig.thread].lifecycle != "finished":
                ri = migration_prep(s, mig.thread, mig.dest)
            if ri is None:
                pending.remove(mig)
            else:
                rn.commit([ri])
                if ri.rule == "Migrate":
                    pending.remove(mig)
                continue
        if schedule.parallel:
            choices = _parallel_pick(s, live, rng)
            if not choices:
                status, blocked = _final_status(s)
                return rn.finish(status, blocked)
            tr = rn.commit(choices)
        else:
            d = None
            if pinned is not None:
                d = _ready(s, pinned)
                if not d.rules:
                    pinned, d = None, None
            if d is None:
                pool = list(live)
                while pool:
                    i = rng.randrange(len(pool))
                    cand = _ready(s, pool[i])
                    if cand.rules:
                        d = cand
                        break
                    pool[i] = pool[-1]
                    pool.pop()
            if d is None:
                status, blocked = _final_status(s)
                return rn.finish(status, blocked)
            ri = d.rules[0]
            tr = rn.commit([ri])
            owner = d.owner
            if ri.rule in R.IMPLICIT:
                if eager_pin and not s.buffers.get(ri.core):
                    pinned, eager_pin = None, False
                else:
                    pinned = owner
            elif ri.rule in R.LOCK_PHASE:
                pinned = owner
            elif ri.rule == "Assign" and s.policy == "eager":
                pinned, eager_pin = owner, True
            else:
                pinned, eager_pin = None, False
        for ri in tr.choices:
            if ri.rule == "Finish":
                live.remove(ri.thread)
            elif ri.rule == "Spawn":
                live.append(ri.target)
                live.sort()


def _parallel_pick(s: MachineState, live: list[int], rng: random.Random) -> list[RuleInstance]:
    ready = []
    for t in live:
        d = _ready(s, t)
        if d.rules:
            ready.append(d.rules[0])
    if not ready:
        return []
    rng.shuffle(ready)
    want = rng.randint(1, min(MAX_PARALLEL, len(ready)))
    picked: list[RuleInstance] = []
    cores: set[int] = set()
    writer = sync = False
    for ri in ready:
        if len(picked) == want:
            break
        if ri.core in cores or ri.rule in R.EXCLUSIVE and picked:
            continue
        if picked and picked[0].rule in R.EXCLUSIVE:
            break
        w, y = ri.rule in R.HEAP_WRITERS, ri.rule in R.SYNC_RULES
        if (w and writer) or (y and sync):
            continue
        picked.append(ri)
        cores.add(ri.core)
        writer, sync = writer or w, sync or y
    picked.sort(key=lambda ri: ri.core)
    return picked


def _replay(rn: _Runner, decisions: list[Decision]) -> RunResult:
    s = rn.s
    by_step: dict[int, list[Decision]] = {}
    for d in decisions:
        by_step.setdefault(d.step, []).append(d)
    for step in sorted(by_step):
        if step != rn.step:
            raise ValueError(f"schedule skips from step {rn.step} to {step}")
        if rn.step >= rn.budget:
            return rn.finish("budget", {})
        rn.commit([d.instance(s) for d in by_step[step]])
    status, blocked = _final_status(s)
    if status != "finished" and any(d.rules for d in thread_status(s).values()):
        status = "replay-end"
    return rn.finish(status, blocked)


def replay(program: Program, decisions: list[Decision], **kw) -> RunResult:
    return run(program, Replay(decisions), **kw)


# ---------------------------------------------------------------------------
# Exhaustive exploration


def state_key(s: MachineState) -> tuple:
    """Hashable state identity without action uids or provenance."""
    heap = tuple((r, o.cls, tuple((f, sl.value) for f, sl in o.fields.items()), o.lock, o.lifecycle)
                 for r, o in sorted(s.heap.items()))
    caches = tuple((c, tuple((r, tuple((f, cs.value) for f, cs in fs.items())) for r, fs in objs.items()))
                   for c, objs in sorted(s.caches.items()) if objs)
    buffers = tuple((c, tuple((k, e.value, e.wthread) for k, e in b.items()))
                    for c, b in sorted(s.buffers.items()) if b)
    threads = tuple((t, tt.core, tt.body) for t, tt in sorted(s.threads.items()))
    return (heap, tuple(sorted(s.vlocks.items())), caches, buffers, threads, s.rr)


@dataclass
class Outcome:
    fingerprint: tuple
    status: str
    trace: Trace
    decisions: list[Decision]


@dataclass
class ExploreResult:
    outcomes: dict[tuple, Outcome]
    partial: bool
    states: int
    terminals: int

    @property
    def fingerprints(self) -> set[tuple]:
        return set(self.outcomes)


def _choices(s: MachineState, spontaneous: bool, migrations: bool) -> list[RuleInstance]:
    out: list[RuleInstance] = []
    seen: set[RuleInstance] = set()
    for t, tt in sorted(s.threads.items()):
        for ri in demand(s, tt).rules:
            if ri not in seen:
                seen.add(ri)
                out.append(ri)
    if spontaneous:
        for ri in R.spontaneous_rules(s):
            if ri not in seen:
                seen.add(ri)
                out.append(ri)
    if migrations:
        for t, tt in sorted(s.threads.items()):
            if s.heap[t].lifecycle == "finished":
                continue
            for dest in range(s.cores):
                ri = RuleInstance("Migrate", t, tt.core, dest)
                if premises_hold(s, ri):
                    out.append(ri)
    return out


def explore(program: Program | MachineState, max_depth: int = 200, *, cores: int = 2, capacity: int = 16,
            policy: str = "buffered", spontaneous: bool = True, migrations: bool = False,
            max_states: int = 200_000, so_cache: bool = False) -> ExploreResult:
    """Depth-first enumeration of every interleaving of local steps, deduplicated by state."""
    s0 = program.clone() if isinstance(program, MachineState) else initial_state(program, cores, capacity, policy)
    outcomes: dict[tuple, Outcome] = {}
    visited: set[tuple] = {state_key(s0)}
    partial = False
    terminals = 0
    # each stack entry: state, path of (transition, decision) pairs as a linked list, depth
    stack: list[tuple[MachineState, tuple | None, int]] = [(s0, None, 0)]
    while stack:
        s, path, depth = stack.pop()
        opts = _choices(s, spontaneous, migrations)
        if not opts:
            terminals += 1
            fp = heap_fingerprint(s)
            if fp not in outcomes:
                status, _ = _final_status(s)
                outcomes[fp] = _outcome(s, fp, status, path, so_cache)
            continue
        if depth >= max_depth or len(visited) >= max_states:
            partial = True
            continue
        for ri in reversed(opts):
            s2 = s.clone()
            tr = _apply_set(s2, [ri], depth)
            key = state_key(s2)
            if key in visited:
                continue
            visited.add(key)
            stack.append((s2, (tr, path), depth + 1))
    return ExploreResult(outcomes, partial, len(visited), terminals)


def _outcome(s: MachineState, fp: tuple, status: str, path: tuple | None, so_cache: bool) -> Outcome:
    trs: list[GlobalTransition] = []
    while path is not None:
        trs.append(path[0])
        path = path[1]
    trs.reverse()
    decisions = [decision_of(tr.step, ri) for tr in trs for ri in tr.choices]
    trace = Trace([t for t in trs if t.actions], list(s.prologue), build_meta(s, so_cache))
    trace.finalize(SYNC_KINDS | {"F", "B"} if so_cache else SYNC_KINDS)
    return Outcome(fp, status, trace, decisions)


def body_text(tt: ThreadTerm) -> str:
    return tt.body if tt.body is START else print_expr(tt.body)


def is_terminated(tt: ThreadTerm) -> bool:
    return tt.body == Lit(UNIT)
