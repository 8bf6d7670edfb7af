"""Reference interpreter on an idealized coherent memory: sequentially consistent outcomes and data-race detection.

Deliberately shares nothing with the cache machine except the syntax tree and redex decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .machine import canonical_heap
from .syntax import (
    FALSE,
    TRUE,
    UNIT,
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
    Program,
    Ref,
    SetField,
    decompose,
    default_value,
    eval_prim,
    substitute,
)

_START = "<start>"
_PURE_LIMIT = 100_000


@dataclass
class _Obj:
    cls: str
    fields: dict
    lock: tuple | None = None
    life: str | None = None


class _St:
    __slots__ = ("objs", "threads", "allocs", "counts", "know", "sync", "lastw", "reads")

    def __init__(self):
        self.objs: dict[int, _Obj] = {}
        self.threads: dict[int, object] = {}
        self.allocs: dict[int, tuple[int, int]] = {}
        self.counts: dict[int, int] = {}
        # race bookkeeping: per-thread knowledge, per-sync-object knowledge, last write and reads per variable
        self.know: dict[int, frozenset] = {}
        self.sync: dict[tuple, frozenset] = {}
        self.lastw: dict[tuple, int] = {}
        self.reads: dict[tuple, frozenset] = {}

    def clone(self) -> "_St":
        s = _St()
        s.objs = {r: _Obj(o.cls, dict(o.fields), o.lock, o.life) for r, o in self.objs.items()}
        s.threads = dict(self.threads)
        s.allocs = dict(self.allocs)
        s.counts = dict(self.counts)
        s.know = dict(self.know)
        s.sync = dict(self.sync)
        s.lastw = dict(self.lastw)
        s.reads = dict(self.reads)
        return s

    def key(self) -> tuple:
        return (
            tuple((r, o.cls, tuple(o.fields.items()), o.lock, o.life) for r, o in sorted(self.objs.items())),
            tuple(sorted(self.threads.items(), key=lambda kv: kv[0])),
            tuple(sorted(self.know.items())),
            tuple(sorted(self.sync.items())),
            tuple(sorted(self.lastw.items())),
            tuple(sorted(self.reads.items())),
        )


@dataclass
class Race:
    var: tuple[int, str]
    first: tuple[int, str]  # (thread, "read" | "write")
    second: tuple[int, str]

    def __str__(self) -> str:
        (t1, k1), (t2, k2) = self.first, self.second
        return f"r{self.var[0]}.{self.var[1]}: {k1} by t{t1} and {k2} by t{t2} are unordered"


class _Stuck(Exception):
    pass


class _Interp:
    def __init__(self, p: Program, track: bool):
        self.p = p
        self.track = track
        self.race: Race | None = None

    # allocation and pure evaluation

    def alloc(self, s: _St, cls: str, who: int) -> int:
        r = len(s.objs) + 1
        cdef = self.p.cls(cls)
        s.objs[r] = _Obj(cls, {f.name: default_value(f.type) for f in cdef.fields})
        idx = s.counts.get(who, 0)
        s.counts[who] = idx + 1
        s.allocs[r] = (who, idx)
        return r

    def initial(self) -> _St:
        s = _St()
        r = self.alloc(s, "Main", 1)
        s.objs[r].life = "spawned"
        s.threads[r] = _START
        s.know[r] = frozenset()
        return s

    def normalize(self, s: _St, body: object) -> object:
        """Run thread-local steps that touch no shared state."""
        for _ in range(_PURE_LIMIT):
            if body is _START or type(body) is Lit:
                return body
            redex, plug = decompose(body)
            k = type(redex)
            if k is Let:
                body = plug(substitute(redex.body, {redex.name: redex.bound}))
            elif k is If:
                v = redex.cond.value
                if v not in (TRUE, FALSE):
                    raise _Stuck()
                body = plug(redex.then if v == TRUE else redex.orelse)
            elif k is Prim:
                v = eval_prim(redex.op, tuple(a.value for a in redex.args))
                if v is None:
                    raise _Stuck()
                body = plug(Lit(v))
            elif k is Call:
                tv = redex.target.value
                if type(tv) is not Ref or tv.id not in s.objs:
                    raise _Stuck()
                meth = self.p.cls(s.objs[tv.id].cls).get_method(redex.method)
                if meth is None or len(meth.params) != len(redex.args):
                    raise _Stuck()
                b = {n: a for (n, _), a in zip(meth.params, redex.args)}
                b["this"] = redex.target
                body = plug(substitute(meth.body, b))
            else:
                return body
        raise _Stuck()

    # race bookkeeping

    def _forget(self, s: _St, var: tuple) -> None:
        def keep(ks: frozenset) -> frozenset:
            return frozenset(x for x in ks if x[1] != var) if any(x[1] == var for x in ks) else ks

        s.know = {t: keep(k) for t, k in s.know.items()}
        s.sync = {o: keep(k) for o, k in s.sync.items()}

    def on_read(self, s: _St, t: int, var: tuple) -> None:
        if not self.track:
            return
        w = s.lastw.get(var)
        if w is not None and ("w", var) not in s.know[t] and self.race is None:
            self.race = Race(var, (w, "write"), (t, "read"))
        tok = ("r", var, t)
        s.know = {u: (k - {tok}) if u != t else k | {tok} for u, k in s.know.items()}
        s.sync = {o: k - {tok} for o, k in s.sync.items()}
        s.reads[var] = s.reads.get(var, frozenset()) | {t}

    def on_write(self, s: _St, t: int, var: tuple) -> None:
        if not self.track:
            return
        if self.race is None:
            w = s.lastw.get(var)
            if w is not None and ("w", var) not in s.know[t]:
                self.race = Race(var, (w, "write"), (t, "write"))
            else:
                for u in sorted(s.reads.get(var, ())):
                    if u != t and ("r", var, u) not in s.know[t]:
                        self.race = Race(var, (u, "read"), (t, "write"))
                        break
        self._forget(s, var)
        s.know[t] = s.know[t] | {("w", var)}
        s.lastw[var] = t
        s.reads[var] = frozenset()

    def release(self, s: _St, t: int, obj: tuple) -> None:
        if self.track:
            s.sync[obj] = s.know[t]

    def acquire(self, s: _St, t: int, obj: tuple) -> None:
        if self.track and obj in s.sync:
            s.know[t] = s.know[t] | s.sync[obj]

    # one visible step

    def step(self, s: _St, t: int) -> bool:
        """Advance thread t by one shared-state step; False when it cannot move now."""
        body = s.threads[t]
        me = s.objs[t]
        if body is _START:
            if me.life != "spawned":
                return False
            me.life = "started"
            self.acquire(s, t, ("spawn", t))
            s.threads[t] = self.normalize(s, Call(Lit(Ref(t)), "run", ()))
            return True
        if type(body) is Lit:
            if me.life in ("finished", None) or body.value != UNIT:
                return False
            me.life = "finished"
            self.release(s, t, ("finish", t))
            return True
        redex, plug = decompose(body)
        k = type(redex)
        if k is New:
            cdef = self.p.cls(redex.cls)
            r = self.alloc(s, redex.cls, t)
            b = {f.name: a for f, a in zip(cdef.fields, redex.args)}
            b["this"] = Lit(Ref(r))
            res = Let("_", "Unit", substitute(cdef.constructor(), b), Lit(Ref(r)))
        else:
            tv = redex.target.value if type(redex.target) is Lit else None
            if type(tv) is not Ref or tv.id not in s.objs:
                return False
            r = tv.id
            o = s.objs[r]
            cdef = self.p.cls(o.cls)
            if k is GetField or k is SetField:
                decl = cdef.get_field(redex.field)
                if decl is None:
                    return False
                var = (r, redex.field)
                if k is GetField:
                    if decl.volatile:
                        self.acquire(s, t, ("vol", var))
                    else:
                        self.on_read(s, t, var)
                    res = Lit(o.fields[redex.field])
                else:
                    v = redex.value.value
                    if decl.volatile:
                        self.release(s, t, ("vol", var))
                    else:
                        self.on_write(s, t, var)
                    o.fields[redex.field] = v
                    res = Lit(v)
            elif k is MonitorEnter:
                if o.lock is None:
                    o.lock = (t, 1)
                    self.acquire(s, t, ("mon", r))
                elif o.lock[0] == t:
                    o.lock = (t, o.lock[1] + 1)
                else:
                    return False
                res = Lit(UNIT)
            elif k is MonitorExit:
                if o.lock is None or o.lock[0] != t:
                    return False
                if o.lock[1] == 1:
                    o.lock = None
                    self.release(s, t, ("mon", r))
                else:
                    o.lock = (t, o.lock[1] - 1)
                res = Lit(UNIT)
            elif k is Intrinsic:
                if not cdef.is_thread:
                    return False
                op = redex.op
                if op == "start":
                    if o.life is not None:
                        return False
                    o.life = "spawned"
                    s.threads[r] = _START
                    s.know[r] = frozenset()
                    self.release(s, t, ("spawn", r))
                    res = Lit(UNIT)
                elif op == "join":
                    if o.life != "finished":
                        return False
                    self.acquire(s, t, ("finish", r))
                    res = Lit(UNIT)
                elif op == "interrupt":
                    if o.life != "started":
                        return False
                    o.life = "interrupted"
                    self.release(s, t, ("interrupt", r))
                    res = Lit(UNIT)
                else:
                    hit = o.life == "interrupted"
                    if hit:
                        self.acquire(s, t, ("interrupt", r))
                    res = Lit(TRUE if hit else FALSE)
            else:
                return False
        s.threads[t] = self.normalize(s, plug(res))
        return True


@dataclass
class ScResult:
    outcomes: set[tuple] = field(default_factory=set)
    partial: bool = False
    states: int = 0
    deadlocks: int = 0
    race: Race | None = None


def _explore(p: Program, max_depth: int, track: bool, max_states: int, stop_on_race: bool) -> ScResult:
    it = _Interp(p, track)
    res = ScResult()
    s0 = it.initial()
    seen = {s0.key()}
    stack = [(s0, 0)]
    while stack:
        s, depth = stack.pop()
        moved = False
        for t in sorted(s.threads):
            s2 = s.clone()
            try:
                ok = it.step(s2, t)
            except _Stuck:
                ok = False
            if not ok:
                continue
            moved = True
            if it.race is not None and stop_on_race:
                res.race = it.race
                res.states = len(seen)
                return res
            if depth + 1 > max_depth or len(seen) >= max_states:
                res.partial = True
                continue
            k = s2.key()
            if k not in seen:
                seen.add(k)
                stack.append((s2, depth + 1))
        if not moved:
            if any(o.life != "finished" for r, o in s.objs.items() if r in s.threads):
                res.deadlocks += 1
            res.outcomes.add(canonical_heap({r: dict(o.fields) for r, o in s.objs.items()}, s.allocs))
    res.states = len(seen)
    res.race = res.race or it.race
    return res


def sc_outcomes(p: Program, max_depth: int = 400, max_states: int = 500_000) -> ScResult:
    """Every final heap reachable by interleaving single shared-memory steps on one coherent store."""
    return _explore(p, max_depth, False, max_states, False)


@dataclass
class DrfVerdict:
    drf: bool | None  # None when the search was cut short without finding a race
    witness: Race | None
    partial: bool


def is_drf(p: Program, max_depth: int = 400, max_states: int = 500_000) -> DrfVerdict:
    """Search sequentially consistent executions for two conflicting plain accesses unordered by happens-before."""
    r = _explore(p, max_depth, True, max_states, True)
    if r.race is not None:
        return DrfVerdict(False, r.race, r.partial)
    return DrfVerdict(None if r.partial else True, None, r.partial)
