"""Local reduction rules: premises, the demand-driven choice of the next rule, and their effects."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import machine as m
from .machine import START, MachineFault, MachineState, ThreadTerm
from .syntax import (
    FALSE,
    TRUE,
    UNIT,
    Bool,
    Call,
    GetField,
    If,
    Intrinsic,
    Let,
    Lit,
    MonitorEnter,
    MonitorExit,
    New,
    Prim,
    Ref,
    SetField,
    decompose,
    eval_prim,
    substitute,
)
from .trace import Action

RULES = (
    "IfTrue", "IfFalse", "Let", "Call", "Prim", "Field", "FieldDirty", "Assign", "New",
    "Fetch", "WriteBack", "Invalidate", "Start", "Finish",
    "VolatileReadL", "VolatileRead", "VolatileWriteL", "VolatileWrite",
    "MonitorEnter", "NestedMonitorEnter", "MonitorExit", "NestedMonitorExit",
    "Join", "Interrupt", "InterruptedT", "InterruptedF", "Spawn", "Migrate",
)
IMPLICIT = frozenset({"Fetch", "WriteBack", "Invalidate"})
LOCK_PHASE = frozenset({"VolatileReadL", "VolatileWriteL"})
HEAP_WRITERS = frozenset({
    "WriteBack", "VolatileReadL", "VolatileRead", "VolatileWriteL", "VolatileWrite",
    "MonitorEnter", "NestedMonitorEnter", "MonitorExit", "NestedMonitorExit",
    "New", "Start", "Finish", "Interrupt", "Spawn",
})
SYNC_RULES = frozenset({
    "Start", "Finish", "VolatileRead", "VolatileWrite", "MonitorEnter", "NestedMonitorEnter",
    "MonitorExit", "NestedMonitorExit", "Join", "Interrupt", "InterruptedT", "Spawn",
})
EXCLUSIVE = frozenset({"Migrate"})


class RuleNotEnabled(Exception):
    pass


@dataclass(frozen=True, slots=True)
class RuleInstance:
    rule: str
    thread: int
    core: int
    target: object = None  # ref, (ref, field), or destination core for Migrate

    def target_text(self) -> str:
        t = self.target
        if t is None:
            return "-"
        if self.rule == "Migrate":
            return f"c{t}"
        if isinstance(t, tuple):
            return f"r{t[0]}.{t[1]}"
        return f"r{t}"


@dataclass(slots=True)
class Demand:
    """What thread `owner` needs next: one rule, or nothing with a status explaining why."""

    owner: int
    rules: list[RuleInstance] = field(default_factory=list)
    status: str = "ready"  # ready | blocked | stuck | done
    reason: str = ""


@dataclass(slots=True)
class StepResult:
    state: MachineState
    actions: list[Action]
    rule: str


def _helper(s: MachineState, tt: ThreadTerm) -> int:
    """Another thread on the same core that can run implicit steps on a starting thread's behalf."""
    for other in s.terms_on(tt.core):
        if other.thread != tt.thread:
            return other.thread
    return tt.thread


def _flush_then(s: MachineState, tt: ThreadTerm, invalidate: bool, main: RuleInstance) -> Demand:
    step = m.next_flush_step(s, tt.core, invalidate)
    if step is None:
        return Demand(tt.thread, [main])
    return Demand(tt.thread, [RuleInstance(step[0], tt.thread, tt.core, step[1])])


def _ref(e: object) -> int | None:
    if type(e) is Lit and type(e.value) is Ref:
        return e.value.id
    return None


def demand(s: MachineState, tt: ThreadTerm) -> Demand:
    """The single rule this thread needs next, with implicit cache steps inserted where premises ask."""
    t, c = tt.thread, tt.core
    me = s.heap[t]
    if tt.body is START:
        if me.lifecycle != "spawned":
            return Demand(t, [], "stuck", "start marker without spawn")
        step = m.next_flush_step(s, c, True)
        if step is not None:
            return Demand(t, [RuleInstance(step[0], _helper(s, tt), c, step[1])])
        return Demand(t, [RuleInstance("Start", t, c)])
    body = tt.body
    if type(body) is Lit:
        if me.lifecycle == "finished":
            return Demand(t, [], "done")
        if body.value != UNIT:
            return Demand(t, [], "stuck", "thread body ended with a non-unit value")
        return _flush_then(s, tt, False, RuleInstance("Finish", t, c))
    if s.policy == "eager" and s.buffers.get(c):
        step = m.next_flush_step(s, c, False)
        return Demand(t, [RuleInstance(step[0], t, c, step[1])])

    redex, _ = decompose(body)
    k = type(redex)
    if k is Let:
        return Demand(t, [RuleInstance("Let", t, c)])
    if k is If:
        v = redex.cond.value
        if type(v) is not Bool:
            return Demand(t, [], "stuck", "if on a non-boolean")
        return Demand(t, [RuleInstance("IfTrue" if v.b else "IfFalse", t, c)])
    if k is Prim:
        if eval_prim(redex.op, tuple(a.value for a in redex.args)) is None:
            return Demand(t, [], "stuck", f"{redex.op} on a non-number")
        return Demand(t, [RuleInstance("Prim", t, c)])
    if k is New:
        cdef = s.program.cls(redex.cls)
        if cdef is None or len(cdef.fields) != len(redex.args):
            return Demand(t, [], "stuck", f"bad constructor call new {redex.cls}")
        return Demand(t, [RuleInstance("New", t, c)])

    r = _ref(redex.target) if hasattr(redex, "target") else None
    if r is None or r not in s.heap:
        return Demand(t, [], "stuck", f"{k.__name__} on a non-object")
    o = s.heap[r]

    if k is Call:
        meth = s.program.cls(o.cls).get_method(redex.method)
        if meth is None or len(meth.params) != len(redex.args):
            return Demand(t, [], "stuck", f"no method {o.cls}.{redex.method}/{len(redex.args)}")
        return Demand(t, [RuleInstance("Call", t, c, r)])
    if k is GetField or k is SetField:
        if redex.field not in o.fields:
            return Demand(t, [], "stuck", f"no field {o.cls}.{redex.field}")
        key = (r, redex.field)
        if s.is_volatile(r, redex.field):
            holder = s.vlocks.get(key)
            phase1 = "VolatileReadL" if k is GetField else "VolatileWriteL"
            if holder is None:
                return Demand(t, [RuleInstance(phase1, t, c, key)])
            if holder != t:
                return Demand(t, [], "blocked", f"volatile r{r}.{redex.field} busy")
            if k is GetField:
                return _flush_then(s, tt, True, RuleInstance("VolatileRead", t, c, key))
            return _flush_then(s, tt, False, RuleInstance("VolatileWrite", t, c, key))
        buf = s.buffers.get(c)
        if k is GetField:
            if buf and key in buf:
                return Demand(t, [RuleInstance("FieldDirty", t, c, key)])
            cache = s.caches.get(c)
            if cache and r in cache:
                return Demand(t, [RuleInstance("Field", t, c, key)])
            return Demand(t, [RuleInstance("Fetch", t, c, r)])
        if buf and len(buf) >= s.capacity and key not in buf:
            step = m.next_flush_step(s, c, False)
            return Demand(t, [RuleInstance(step[0], t, c, step[1])])
        return Demand(t, [RuleInstance("Assign", t, c, key)])
    if k is MonitorEnter:
        if o.lock is None:
            return _flush_then(s, tt, True, RuleInstance("MonitorEnter", t, c, r))
        if o.lock[0] == t:
            return Demand(t, [RuleInstance("NestedMonitorEnter", t, c, r)])
        return Demand(t, [], "blocked", f"monitor r{r} held by t{o.lock[0]}")
    if k is MonitorExit:
        if o.lock is None or o.lock[0] != t:
            return Demand(t, [], "stuck", f"exit of monitor r{r} not held")
        if o.lock[1] == 1:
            return _flush_then(s, tt, False, RuleInstance("MonitorExit", t, c, r))
        return Demand(t, [RuleInstance("NestedMonitorExit", t, c, r)])
    if k is Intrinsic:
        if not s.program.cls(o.cls).is_thread:
            return Demand(t, [], "stuck", f"{redex.op}() on non-thread r{r}")
        lc = o.lifecycle
        if redex.op == "start":
            if lc is not None:
                return Demand(t, [], "stuck", f"t{r} already spawned")
            return _flush_then(s, tt, False, RuleInstance("Spawn", t, c, r))
        if redex.op == "join":
            if lc != "finished":
                return Demand(t, [], "blocked", f"join on unfinished t{r}")
            return _flush_then(s, tt, True, RuleInstance("Join", t, c, r))
        if redex.op == "interrupt":
            if lc != "started":
                return Demand(t, [], "blocked", f"interrupt of t{r} in state {lc}")
            return _flush_then(s, tt, False, RuleInstance("Interrupt", t, c, r))
        if lc == "interrupted":
            return _flush_then(s, tt, True, RuleInstance("InterruptedT", t, c, r))
        return Demand(t, [RuleInstance("InterruptedF", t, c, r)])
    return Demand(t, [], "stuck", f"no rule for {k.__name__}")


def spontaneous_rules(s: MachineState) -> list[RuleInstance]:
    """Implicit steps that are enabled but not demanded: write-back of any dirty entry, invalidation of any cached object."""
    out: list[RuleInstance] = []
    by_core: dict[int, int] = {}
    for t, tt in sorted(s.threads.items()):
        by_core.setdefault(tt.core, t)
    for c, t in sorted(by_core.items()):
        cache = s.caches.get(c) or {}
        for key in s.buffers.get(c) or {}:
            if key[0] in cache:
                out.append(RuleInstance("WriteBack", t, c, key))
        for r in cache:
            out.append(RuleInstance("Invalidate", t, c, r))
    return out


# ---------------------------------------------------------------------------
# Literal premise checks


def _empty(d: dict | None) -> bool:
    return not d


def premises_hold(s: MachineState, ri: RuleInstance) -> bool:
    """Evaluate the rule's premises directly against the state, independent of `demand`."""
    tt = s.threads.get(ri.thread)
    if tt is None or tt.core != ri.core:
        return False
    c = ri.core
    C, D = s.caches.get(c), s.buffers.get(c)
    rule = ri.rule
    if rule == "Fetch":
        return ri.target in s.heap
    if rule == "WriteBack":
        return m.write_back_enabled(s, c, *ri.target)
    if rule == "Invalidate":
        return bool(C) and ri.target in C
    if rule == "Migrate":
        dest = ri.target
        # only a running thread moves: its start must precede the M action
        running = tt.body is not START and s.heap[tt.thread].lifecycle in ("started", "interrupted")
        return (running and isinstance(dest, int) and 0 <= dest < s.cores and dest != c and _empty(D)
                and _empty(s.buffers.get(dest)) and _empty(s.caches.get(dest)))
    me = s.heap[tt.thread]
    if rule == "Start":
        return tt.body is START and _empty(C) and _empty(D) and me.lifecycle == "spawned"
    if tt.body is START:
        return False
    if rule == "Finish":
        return tt.body == Lit(UNIT) and _empty(D) and me.lifecycle in ("started", "interrupted")
    if type(tt.body) is Lit:
        return False
    redex, _ = decompose(tt.body)
    k = type(redex)
    if rule == "Let":
        return k is Let
    if rule in ("IfTrue", "IfFalse"):
        return k is If and redex.cond.value == (TRUE if rule == "IfTrue" else FALSE)
    if rule == "Prim":
        return k is Prim and eval_prim(redex.op, tuple(a.value for a in redex.args)) is not None
    if rule == "New":
        cdef = s.program.cls(redex.cls) if k is New else None
        return cdef is not None and len(cdef.fields) == len(redex.args)
    r = _ref(getattr(redex, "target", None))
    if r is None or r not in s.heap or r != (ri.target[0] if isinstance(ri.target, tuple) else ri.target):
        return False
    o = s.heap[r]
    if rule == "Call":
        meth = s.program.cls(o.cls).get_method(redex.method) if k is Call else None
        return meth is not None and len(meth.params) == len(redex.args)
    if rule in ("Field", "FieldDirty", "VolatileReadL", "VolatileRead"):
        if k is not GetField or ri.target != (r, redex.field) or redex.field not in o.fields:
            return False
        key, vol = ri.target, s.is_volatile(r, redex.field)
        if rule == "Field":
            return not vol and bool(C) and r in C and (_empty(D) or key not in D)
        if rule == "FieldDirty":
            return not vol and bool(D) and key in D
        if rule == "VolatileReadL":
            return vol and key not in s.vlocks
        return vol and s.vlocks.get(key) == tt.thread and _empty(C) and _empty(D)
    if rule in ("Assign", "VolatileWriteL", "VolatileWrite"):
        if k is not SetField or ri.target != (r, redex.field) or redex.field not in o.fields:
            return False
        key, vol = ri.target, s.is_volatile(r, redex.field)
        if rule == "Assign":
            room = _empty(D) or key in D or len(D) < s.capacity
            return not vol and room
        if rule == "VolatileWriteL":
            return vol and key not in s.vlocks
        return vol and s.vlocks.get(key) == tt.thread and _empty(D)
    if rule == "MonitorEnter":
        return k is MonitorEnter and o.lock is None and _empty(C) and _empty(D)
    if rule == "NestedMonitorEnter":
        return k is MonitorEnter and o.lock is not None and o.lock[0] == tt.thread
    if rule == "MonitorExit":
        return k is MonitorExit and o.lock == (tt.thread, 1) and _empty(D)
    if rule == "NestedMonitorExit":
        return k is MonitorExit and o.lock is not None and o.lock[0] == tt.thread and o.lock[1] >= 2
    if k is not Intrinsic or not s.program.cls(o.cls).is_thread:
        return False
    op, lc = redex.op, o.lifecycle
    if rule == "Spawn":
        return op == "start" and lc is None and _empty(D)
    if rule == "Join":
        return op == "join" and lc == "finished" and _empty(C) and _empty(D)
    if rule == "Interrupt":
        return op == "interrupt" and lc == "started" and _empty(D)
    if rule == "InterruptedT":
        return op == "interrupted" and lc == "interrupted" and _empty(C) and _empty(D)
    if rule == "InterruptedF":
        return op == "interrupted" and lc != "interrupted"
    return False


# ---------------------------------------------------------------------------
# Effects


def choose_core(s: MachineState) -> int:
    """Lowest idle core with a clean cache, else an idle core someone can flush, else round-robin."""
    busy: set[int] = set()
    hosts: set[int] = set()
    for tt in s.threads.values():
        hosts.add(tt.core)
        if s.heap[tt.thread].lifecycle != "finished":
            busy.add(tt.core)
    for c in range(s.cores):
        if c not in busy and not s.caches.get(c) and not s.buffers.get(c):
            return c
    for c in range(s.cores):
        if c not in busy and c in hosts:
            return c
    ring = sorted(hosts)
    c = ring[s.rr % len(ring)]
    s.rr += 1
    return c


def apply_in_place(s: MachineState, ri: RuleInstance) -> list[Action]:
    """Perform an enabled rule, mutating `s`; returns the emitted actions."""
    rule = ri.rule
    c = ri.core
    if rule in IMPLICIT:
        return [m.apply_flush_step(s, c, (rule, ri.target), ri.thread)]
    tt = s.threads[ri.thread]
    t = tt.thread
    if rule == "Migrate":
        a = s.new_action("M", t, c, ri.target)
        tt.core = ri.target
        return [a]
    if rule == "Start":
        s.heap[t].lifecycle = "started"
        tt.body = Call(Lit(Ref(t)), "run", ())
        return [s.new_action("S", t, c, t)]
    if rule == "Finish":
        s.heap[t].lifecycle = "finished"
        return [s.new_action("Fi", t, c, t)]

    redex, plug = decompose(tt.body)
    out: list[Action] = []
    result: object

    if rule == "Let":
        result = substitute(redex.body, {redex.name: redex.bound})
    elif rule in ("IfTrue", "IfFalse"):
        result = redex.then if rule == "IfTrue" else redex.orelse
    elif rule == "Prim":
        result = Lit(eval_prim(redex.op, tuple(a.value for a in redex.args)))
    elif rule == "Call":
        r = redex.target.value.id
        meth = s.program.cls(s.heap[r].cls).get_method(redex.method)
        bindings = {name: arg for (name, _), arg in zip(meth.params, redex.args)}
        bindings["this"] = redex.target
        result = substitute(meth.body, bindings)
    elif rule == "New":
        cdef = s.program.cls(redex.cls)
        r = s.allocate(redex.cls, t, c)
        bindings = {f.name: arg for f, arg in zip(cdef.fields, redex.args)}
        bindings["this"] = Lit(Ref(r))
        result = Let("_", "Unit", substitute(cdef.constructor(), bindings), Lit(Ref(r)))
    elif rule == "Field":
        r, f = ri.target
        cs = s.caches[c][r][f]
        out.append(s.new_action("R", t, c, r, f, cs.value, {"W": cs.wuid, "Cs": cs.cuid}))
        result = Lit(cs.value)
    elif rule == "FieldDirty":
        r, f = ri.target
        e = s.buffers[c][(r, f)]
        out.append(s.new_action("R", t, c, r, f, e.value, {"W": e.wuid, "Cs": e.wuid}))
        result = Lit(e.value)
    elif rule == "Assign":
        r, f = ri.target
        v = redex.value.value
        w = s.new_action("W", t, c, r, f, v)
        s.buffer(c)[(r, f)] = m.BSlot(v, w.uid, t)
        out.append(w)
        result = Lit(v)
    elif rule in LOCK_PHASE:
        s.vlocks[ri.target] = t
        return []
    elif rule == "VolatileRead":
        r, f = ri.target
        slot = s.heap[r].fields[f]
        del s.vlocks[ri.target]
        out.append(s.new_action("Vr", t, c, r, f, slot.value, {"W": slot.wuid}))
        result = Lit(slot.value)
    elif rule == "VolatileWrite":
        r, f = ri.target
        v = redex.value.value
        a = s.new_action("Vw", t, c, r, f, v)
        s.heap[r].fields[f] = m.Slot(v, a.uid, None)
        del s.vlocks[ri.target]
        out.append(a)
        result = Lit(v)
    elif rule in ("MonitorEnter", "NestedMonitorEnter"):
        o = s.heap[ri.target]
        o.lock = (t, 1) if o.lock is None else (t, o.lock[1] + 1)
        out.append(s.new_action("L", t, c, ri.target))
        result = Lit(UNIT)
    elif rule in ("MonitorExit", "NestedMonitorExit"):
        o = s.heap[ri.target]
        o.lock = None if o.lock[1] == 1 else (t, o.lock[1] - 1)
        out.append(s.new_action("U", t, c, ri.target))
        result = Lit(UNIT)
    elif rule == "Spawn":
        child = ri.target
        s.heap[child].lifecycle = "spawned"
        dest = choose_core(s)
        s.threads[child] = ThreadTerm(dest, child, START)
        out.append(s.new_action("Sp", t, c, child))
        result = Lit(UNIT)
    elif rule == "Join":
        out.append(s.new_action("J", t, c, ri.target))
        result = Lit(UNIT)
    elif rule == "Interrupt":
        s.heap[ri.target].lifecycle = "interrupted"
        out.append(s.new_action("Ir", t, c, ri.target))
        result = Lit(UNIT)
    elif rule == "InterruptedT":
        out.append(s.new_action("Ird", t, c, ri.target))
        result = Lit(TRUE)
    elif rule == "InterruptedF":
        result = Lit(FALSE)
    else:
        raise MachineFault(f"unknown rule {rule}")
    tt.body = plug(result)
    return out


def enabled_rules(s: MachineState, tt: ThreadTerm) -> list[RuleInstance]:
    """Rules this thread may take now: the demanded one, plus any spontaneous implicit steps it can perform."""
    out = list(demand(s, tt).rules)
    for ri in spontaneous_rules(s):
        if ri.thread == tt.thread and ri not in out:
            out.append(ri)
    return out


def apply_rule(s: MachineState, ri: RuleInstance) -> StepResult:
    """Pure form: returns a successor state and the emitted actions; `s` is left untouched."""
    if not premises_hold(s, ri):
        raise RuleNotEnabled(f"{ri.rule} not enabled for t{ri.thread} on core {ri.core}")
    s2 = s.clone()
    acts = apply_in_place(s2, ri)
    return StepResult(s2, acts, ri.rule)


def volatile_read(s: MachineState, core: int, t: int, ref: int, fld: str) -> StepResult:
    """Both lock phases of a volatile read with the acquire flush between them."""
    return _run_volatile(s, t, (ref, fld), "VolatileRead")


def volatile_write(s: MachineState, core: int, t: int, ref: int, fld: str, v: object = None) -> StepResult:
    return _run_volatile(s, t, (ref, fld), "VolatileWrite")


def _run_volatile(s: MachineState, t: int, key: tuple, last: str) -> StepResult:
    s2 = s.clone()
    acts: list[Action] = []
    while True:
        d = demand(s2, s2.threads[t])
        if not d.rules:
            raise RuleNotEnabled(f"t{t} cannot proceed: {d.status} {d.reason}")
        ri = d.rules[0]
        acts.extend(apply_in_place(s2, ri))
        if ri.rule == last:
            return StepResult(s2, acts, last)


def lifecycle_step(s: MachineState, t: int, intrinsic: str) -> StepResult:
    """Run the thread's pending join/interrupt/interrupted() including any flush it needs."""
    targets = {"join": ("Join",), "interrupt": ("Interrupt",), "interrupted": ("InterruptedT", "InterruptedF")}[intrinsic]
    s2 = s.clone()
    acts: list[Action] = []
    while True:
        d = demand(s2, s2.threads[t])
        if not d.rules:
            raise RuleNotEnabled(f"t{t} cannot proceed: {d.status} {d.reason}")
        ri = d.rules[0]
        acts.extend(apply_in_place(s2, ri))
        if ri.rule in targets:
            return StepResult(s2, acts, ri.rule)
