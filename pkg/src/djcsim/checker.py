"""Well-formedness checks over recorded traces and over per-transition state checkpoints."""

from __future__ import annotations

import json
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import Iterable

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
    ParseError,
    Prim,
    Program,
    Ref,
    SetField,
    decompose,
    eval_prim,
    parse_program,
    parse_value_text,
    substitute,
    value_text,
)
from .trace import SYNC_KINDS, WRITE_KINDS, Action, MalformedTrace, Trace

WF_RULES = tuple(f"WF-{i}" for i in range(1, 21))
WFE_RULES = ("WFE-1", "WFE-2")
WFH_RULES = tuple(f"WFH-{i}" for i in range(1, 10))
ALL_RULES = WF_RULES + WFE_RULES + WFH_RULES


class MissingCheckpoints(Exception):
    pass


@dataclass(frozen=True, slots=True)
class Violation:
    rule: str
    uids: tuple[int, ...]
    msg: str

    def to_record(self) -> dict:
        return {"rule": self.rule, "uids": list(self.uids), "msg": self.msg}


@dataclass
class WfReport:
    violations: list[Violation] = field(default_factory=list)
    checked: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def by_rule(self, rule: str) -> list[Violation]:
        return [v for v in self.violations if v.rule == rule]

    def dumps(self) -> str:
        return "".join(json.dumps(v.to_record(), separators=(",", ":")) + "\n" for v in self.violations)

    def extend(self, other: "WfReport") -> None:
        self.violations.extend(other.violations)
        self.checked = tuple(dict.fromkeys(self.checked + other.checked))


def parse_rule_filter(text: str | None) -> tuple[str, ...]:
    if not text:
        return ALL_RULES
    out = []
    for part in text.split(","):
        r = part.strip().upper()
        if not r:
            continue
        if r not in ALL_RULES:
            raise ValueError(f"unknown rule id {part.strip()!r}")
        out.append(r)
    return tuple(out)


# ---------------------------------------------------------------------------
# Trace-level checks


class _Ctx:
    def __init__(self, tr: Trace):
        self.tr = tr
        self.acts = tr.actions()
        self.pos = {a.uid: i for i, a in enumerate(self.acts)}
        self.by_uid = {a.uid: a for a in self.acts}
        self.vol: dict[tuple, bool] = {a.var: a.vol for a in self.acts if a.kind == "In"}
        self.obj_fields: dict[int, list[str]] = {}
        for a in self.acts:
            if a.kind == "In":
                self.obj_fields.setdefault(a.ref, []).append(a.fld)
        self.out: list[Violation] = []
        self._hb = None
        self.hb_error: str | None = None
        self._var_index: dict[tuple, list[int]] | None = None

    def bad(self, rule: str, uids: Iterable[int], msg: str) -> None:
        self.out.append(Violation(rule, tuple(u for u in uids if u is not None), msg))

    def get(self, uid: object) -> Action | None:
        return self.by_uid.get(uid) if isinstance(uid, int) and not isinstance(uid, bool) else None

    def hb(self):
        if self._hb is None and self.hb_error is None:
            try:
                self._hb = self.tr.happens_before()
            except MalformedTrace as exc:
                self.hb_error = str(exc)
        return self._hb

    def var_positions(self, var: tuple) -> list[int]:
        """Positions of In/W/Vw/R/Vr/B actions on a variable, ascending."""
        if self._var_index is None:
            idx: dict[tuple, list[int]] = {}
            for i, a in enumerate(self.acts):
                if a.fld is not None:
                    idx.setdefault(a.var, []).append(i)
            self._var_index = idx
        return self._var_index.get(var, [])

    def between_on_var(self, var: tuple, lo: int, hi: int) -> list[Action]:
        ps = self.var_positions(var)
        return [self.acts[i] for i in ps[bisect_right(ps, lo):bisect_left(ps, hi)]]

    def non_volatile_fields(self, ref: int) -> list[str]:
        return [f for f in self.obj_fields.get(ref, []) if not self.vol.get((ref, f), False)]

    def so_kinds(self) -> frozenset:
        return SYNC_KINDS | {"F", "B"} if self.tr.meta.get("so_cache") else SYNC_KINDS


def _wf1(c: _Ctx) -> None:
    for i, r in enumerate(c.acts):
        if r.kind not in ("R", "Vr"):
            continue
        w = c.get(r.prov.get("W"))
        if w is None:
            c.bad("WF-1", [r.uid], f"read {r} sees no recorded write")
        elif w.kind not in WRITE_KINDS or w.var != r.var:
            c.bad("WF-1", [r.uid, w.uid], f"read {r} sees {w}, not a write of {r.target}")
        elif w.value != r.value:
            c.bad("WF-1", [r.uid, w.uid], f"read {r} returns a value different from {w}")
        elif c.pos[w.uid] >= i:
            c.bad("WF-1", [r.uid, w.uid], f"read {r} sees the later write {w}")


def _wf2(c: _Ctx) -> None:
    for a in c.acts:
        if a.fld is None or a.prologue or a.var not in c.vol:
            continue
        v = c.vol[a.var]
        if v and a.kind in ("R", "W", "B"):
            c.bad("WF-2", [a.uid], f"{a} is a plain access to volatile {a.target}")
        elif not v and a.kind in ("Vr", "Vw"):
            c.bad("WF-2", [a.uid], f"{a} is a volatile access to plain {a.target}")


def _valid_so(a: Action) -> bool:
    return isinstance(a.so, int) and not isinstance(a.so, bool) and a.so >= 0


def _wf3(c: _Ctx) -> None:
    kinds = c.so_kinds()
    seen: dict[int, int] = {}
    for a in c.acts:
        if a.kind in kinds:
            if not _valid_so(a):
                c.bad("WF-3", [a.uid], f"synchronization action {a} has no finite order index")
            elif a.so in seen:
                c.bad("WF-3", [seen[a.so], a.uid], f"order index {a.so} used twice")
            else:
                seen[a.so] = a.uid
        elif a.so is not None:
            c.bad("WF-3", [a.uid], f"{a} is not a synchronization action but has order index {a.so}")


def _wf4(c: _Ctx) -> None:
    last: dict[int, Action] = {}
    for a in c.acts:
        if a.kind not in SYNC_KINDS or not _valid_so(a):
            continue
        p = last.get(a.thread)
        if p is not None and p.so >= a.so:
            c.bad("WF-4", [p.uid, a.uid], f"order of {p} and {a} contradicts program order")
        last[a.thread] = a


def _sync_in_so(c: _Ctx) -> list[Action]:
    sync = [a for a in c.acts if a.kind in SYNC_KINDS]
    return sorted(sync, key=lambda a: (a.so if _valid_so(a) else float("inf"), c.pos[a.uid]))


def _wf5(c: _Ctx) -> None:
    held: dict[int, dict[int, int]] = {}
    for a in _sync_in_so(c):
        if a.kind not in ("L", "U"):
            continue
        counts = held.setdefault(a.ref, {})
        if a.kind == "L":
            others = [t for t, n in counts.items() if n > 0 and t != a.thread]
            if others:
                c.bad("WF-5", [a.uid], f"{a} locks r{a.ref} while t{others[0]} holds it")
            counts[a.thread] = counts.get(a.thread, 0) + 1
        else:
            if counts.get(a.thread, 0) <= 0:
                c.bad("WF-5", [a.uid], f"{a} unlocks r{a.ref} without holding it")
            else:
                counts[a.thread] -= 1


def _wf6(c: _Ctx) -> None:
    last_own: dict[tuple, Action] = {}
    for a in c.acts:
        if a.prologue:
            continue
        if a.kind in ("W", "Vw"):
            last_own[(a.thread, a.var)] = a
        elif a.kind in ("R", "Vr"):
            own = last_own.get((a.thread, a.var))
            w = c.get(a.prov.get("W"))
            if own is not None and w is not None and w is not own and w.thread == a.thread \
                    and w.kind != "In" and c.pos[w.uid] < c.pos[own.uid]:
                c.bad("WF-6", [a.uid, w.uid, own.uid], f"{a} sees {w} although its own later write {own} exists")
    prog_text = c.tr.meta.get("program")
    allocs = c.tr.meta.get("allocs")
    if not prog_text or allocs is None:
        return
    try:
        prog = parse_program(prog_text)
    except ParseError as exc:
        c.bad("WF-6", [], f"recorded program does not parse: {exc}")
        return
    cls_of = {int(r): v[0] for r, v in allocs.items()}
    made_by: dict[int, list[tuple[int, int]]] = {}
    for r, (_, who, idx) in allocs.items():
        if int(r) != who:
            made_by.setdefault(who, []).append((idx, int(r)))
    per_thread: dict[int, list[Action]] = {}
    for a in c.acts:
        if not a.prologue and a.kind not in ("F", "B", "I", "M"):
            per_thread.setdefault(a.thread, []).append(a)
    limit = 10 * len(c.acts) + 10_000
    for t, acts in sorted(per_thread.items()):
        _replay_thread(c, prog, t, acts, cls_of, [r for _, r in sorted(made_by.get(t, []))], limit)


def _replay_thread(c: _Ctx, prog: Program, t: int, acts: list[Action], cls_of: dict[int, str],
                   news: list[int], limit: int) -> None:
    """Re-evaluate thread t alone, feeding read results from the trace, and compare emitted actions."""
    k = 0

    def take(kind: str, ref: int, fld: str | None, value=None) -> Action | None | bool:
        nonlocal k
        if k >= len(acts):
            return None
        a = acts[k]
        if a.kind != kind or a.ref != ref or a.fld != fld or (value is not None and a.value != value):
            want = f"{kind} r{ref}{'.' + fld if fld else ''}" + (f"={value_text(value)}" if value is not None else "")
            c.bad("WF-6", [a.uid], f"t{t} performs {a} where its program next does {want}")
            return False
        k += 1
        return a

    if not acts:
        return
    if acts[0].kind != "S":
        c.bad("WF-6", [acts[0].uid], f"t{t} begins with {acts[0]} instead of a start")
        return
    k = 1
    if t not in cls_of or prog.cls(cls_of[t]) is None:
        c.bad("WF-6", [acts[0].uid], f"t{t} has no recorded class")
        return
    body: object = Call(Lit(Ref(t)), "run", ())
    n_new = 0
    for _ in range(limit):
        if type(body) is Lit:
            if k < len(acts):
                a = take("Fi", t, None)
                if a is False:
                    return
            break
        redex, plug = decompose(body)
        kind = type(redex)
        if kind is Let:
            res = substitute(redex.body, {redex.name: redex.bound})
        elif kind is If:
            res = redex.then if redex.cond.value == TRUE else redex.orelse
        elif kind is Prim:
            v = eval_prim(redex.op, tuple(a.value for a in redex.args))
            if v is None:
                return
            res = Lit(v)
        elif kind is New:
            if n_new >= len(news):
                c.bad("WF-6", [], f"t{t} allocates more objects than recorded")
                return
            r = news[n_new]
            n_new += 1
            cdef = prog.cls(redex.cls)
            if cdef is None or cls_of.get(r) != redex.cls:
                c.bad("WF-6", [], f"t{t} allocation {n_new} recorded as the wrong class")
                return
            b = {f.name: arg for f, arg in zip(cdef.fields, redex.args)}
            b["this"] = Lit(Ref(r))
            res = Let("_", "Unit", substitute(cdef.constructor(), b), Lit(Ref(r)))
        else:
            tv = redex.target.value if type(redex.target) is Lit else None
            if type(tv) is not Ref or tv.id not in cls_of:
                return
            r = tv.id
            cdef = prog.cls(cls_of[r])
            if kind is Call:
                meth = cdef.get_method(redex.method) if cdef else None
                if meth is None:
                    return
                b = {n: a for (n, _), a in zip(meth.params, redex.args)}
                b["this"] = redex.target
                res = substitute(meth.body, b)
            elif kind is GetField:
                decl = cdef.get_field(redex.field)
                if decl is None:
                    return
                a = take("Vr" if decl.volatile else "R", r, redex.field)
                if not a:
                    return
                res = Lit(a.value)
            elif kind is SetField:
                decl = cdef.get_field(redex.field)
                if decl is None:
                    return
                v = redex.value.value
                a = take("Vw" if decl.volatile else "W", r, redex.field, v)
                if not a:
                    return
                res = Lit(v)
            elif kind is MonitorEnter or kind is MonitorExit:
                if not take("L" if kind is MonitorEnter else "U", r, None):
                    return
                res = Lit(UNIT)
            elif kind is Intrinsic:
                if redex.op == "interrupted":
                    hit = k < len(acts) and acts[k].kind == "Ird" and acts[k].ref == r
                    if hit:
                        k += 1
                    res = Lit(TRUE if hit else FALSE)
                else:
                    if not take({"start": "Sp", "join": "J", "interrupt": "Ir"}[redex.op], r, None):
                        return
                    res = Lit(UNIT)
            else:
                return
        body = plug(res)
    if k < len(acts):
        c.bad("WF-6", [acts[k].uid], f"t{t} performs {acts[k]} beyond what its program does")


def _wf7(c: _Ctx) -> None:
    last: dict[tuple, Action] = {}
    for a in _sync_in_so(c):
        if a.kind in ("In", "Vw"):
            last[a.var] = a
        elif a.kind == "Vr":
            w = last.get(a.var)
            if w is None or a.prov.get("W") != w.uid:
                c.bad("WF-7", [a.uid], f"{a} does not see the last volatile write of {a.target} in order")


def _wf8(c: _Ctx) -> None:
    hb = c.hb()
    if hb is None:
        c.bad("WF-8", [], f"happens-before is not a partial order: {c.hb_error}")
        return
    masks = hb.masks
    for i, r in enumerate(c.acts):
        if r.kind not in ("R", "Vr"):
            continue
        w = c.get(r.prov.get("W"))
        if w is None or w.var != r.var:
            continue
        j = c.pos[w.uid]
        if (masks[j] >> i) & 1:
            c.bad("WF-8", [r.uid, w.uid], f"{r} happens-before the write it sees")
            continue
        mr = masks[i]
        for p in c.var_positions(r.var):
            a = c.acts[p]
            if p != j and a.kind in WRITE_KINDS and (mr >> p) & 1 and (masks[p] >> j) & 1:
                c.bad("WF-8", [r.uid, w.uid, a.uid], f"{r} sees {w} although {a} is between them in happens-before")
                break


def _wf9(c: _Ctx) -> None:
    hb = c.hb()
    if hb is None:
        return
    starts: dict[int, int] = {}
    for i, a in enumerate(c.acts):
        if a.kind == "S" and a.thread not in starts:
            starts[a.thread] = i
    for i, a in enumerate(c.acts):
        if a.prologue or a.kind == "S":
            continue
        s = starts.get(a.thread)
        if s is None:
            c.bad("WF-9", [a.uid], f"{a} belongs to a thread that never starts")
        elif not (hb.masks[i] >> s) & 1:
            c.bad("WF-9", [c.acts[s].uid, a.uid], f"start of t{a.thread} does not happen-before {a}")


def _wf10(c: _Ctx) -> None:
    for i, r in enumerate(c.acts):
        if r.kind != "R":
            continue
        cs = c.get(r.prov.get("Cs"))
        if cs is None:
            c.bad("WF-10", [r.uid], f"{r} has no cache action seen")
            continue
        if cs.kind not in ("W", "F", "B") or cs.core != r.core or c.pos[cs.uid] >= i:
            c.bad("WF-10", [r.uid, cs.uid], f"{r} is not preceded on its core by the cache action {cs}")
            continue
        if (cs.kind == "F" and cs.ref != r.ref) or (cs.kind != "F" and cs.var != r.var):
            c.bad("WF-10", [r.uid, cs.uid], f"cache action {cs} is for a different location than {r}")
            continue
        w = r.prov.get("W")
        if cs.kind == "W":
            supplied = cs.uid
        elif cs.kind == "B":
            supplied = cs.prov.get("Ab")
        else:
            b = c.get((cs.prov.get("Bf") or {}).get(r.fld))
            supplied = b.prov.get("Ab") if b is not None else None
        if supplied != w:
            c.bad("WF-10", [r.uid, cs.uid], f"cache action {cs} does not carry the write {r} sees")


def _wf11(c: _Ctx) -> None:
    for i, r in enumerate(c.acts):
        if r.kind != "R":
            continue
        cs = c.get(r.prov.get("Cs"))
        if cs is None or cs.core != r.core or c.pos[cs.uid] >= i:
            continue
        j = c.pos[cs.uid]
        for a in c.between_on_var(r.var, j, i):
            if a.core == r.core and a.kind in ("W", "B"):
                c.bad("WF-11", [r.uid, cs.uid, a.uid], f"{a} replaces the data {r} reads from {cs}")
                break
        else:
            if cs.kind == "W":
                continue
            for a in c.acts[j + 1:i]:
                if a.core == r.core and a.kind in ("I", "F") and a.ref == r.ref:
                    c.bad("WF-11", [r.uid, cs.uid, a.uid], f"{a} invalidates or refetches r{r.ref} before {r}")
                    break


def _wf12(c: _Ctx) -> None:
    for i, f in enumerate(c.acts):
        if f.kind != "F":
            continue
        bf = f.prov.get("Bf") or {}
        for fld in c.non_volatile_fields(f.ref):
            b = c.get(bf.get(fld))
            if b is None or b.kind != "B" or b.var != (f.ref, fld) or c.pos[b.uid] >= i:
                c.bad("WF-12", [f.uid], f"{f} fetches r{f.ref}.{fld} without an earlier write-back of it")


def _wf13(c: _Ctx) -> None:
    for i, b in enumerate(c.acts):
        if b.kind != "B":
            continue
        w = c.get(b.prov.get("Ab"))
        if w is None or w.kind not in ("In", "W") or w.var != b.var or c.pos[w.uid] >= i \
                or (w.kind == "W" and w.core != b.core):
            c.bad("WF-13", [b.uid], f"{b} writes back no earlier write of {b.target} on its core")
        elif w.value != b.value:
            c.bad("WF-13", [b.uid, w.uid], f"{b} writes back a value different from {w}")


def _wf14(c: _Ctx) -> None:
    for i, b in enumerate(c.acts):
        if b.kind != "B":
            continue
        w = c.get(b.prov.get("Ab"))
        if w is None or w.var != b.var or c.pos[w.uid] >= i:
            continue
        for a in c.between_on_var(b.var, c.pos[w.uid], i):
            if a.kind == "W" and a.core == b.core:
                c.bad("WF-14", [b.uid, w.uid, a.uid], f"{a} overwrites {w} before {b} writes it back")
                break


def _wf15(c: _Ctx) -> None:
    last_fi: dict[tuple, Action] = {}
    latest: dict[tuple, Action] = {}  # (core, ref, field) -> latest F or B
    for a in c.acts:
        k = a.kind
        if k == "F":
            last_fi[(a.core, a.ref)] = a
            for fld in c.non_volatile_fields(a.ref):
                latest[(a.core, a.ref, fld)] = a
        elif k == "B":
            latest[(a.core, a.ref, a.fld)] = a
        elif k == "I":
            p = last_fi.get((a.core, a.ref))
            if p is None or p.kind != "F":
                c.bad("WF-15", [a.uid], f"{a} invalidates r{a.ref}, which core {a.core} has not cached")
            else:
                ai = a.prov.get("Ai") or {}
                for fld in c.non_volatile_fields(a.ref):
                    want = latest.get((a.core, a.ref, fld))
                    if want is None or ai.get(fld) != want.uid:
                        c.bad("WF-15", [a.uid], f"{a} names the wrong caching action for r{a.ref}.{fld}")
                        break
            last_fi[(a.core, a.ref)] = a


def _wf16(c: _Ctx) -> None:
    for i, r in enumerate(c.acts):
        if r.kind != "R":
            continue
        w = c.get(r.prov.get("W"))
        if w is None or w.var != r.var or not (w.kind == "In" or w.core != r.core):
            continue
        f = c.get(r.prov.get("Cs"))
        if f is None or f.kind != "F" or f.core != r.core or f.ref != r.ref:
            c.bad("WF-16", [r.uid, w.uid], f"{r} sees {w} from elsewhere without a fetch on its core")
            continue
        b = c.get((f.prov.get("Bf") or {}).get(r.fld))
        if b is None or b.kind != "B" or b.var != r.var or b.prov.get("Ab") != w.uid:
            c.bad("WF-16", [r.uid, f.uid], f"{f} does not fetch the write-back of {w}")
            continue
        pw, pb, pf = c.pos[w.uid], c.pos[b.uid], c.pos[f.uid]
        if not pw < pb < pf < i:
            c.bad("WF-16", [w.uid, b.uid, f.uid, r.uid], "write, write-back, fetch and read are out of order")
            continue
        for a in c.between_on_var(r.var, pb, pf):
            if a.kind == "B":
                c.bad("WF-16", [b.uid, a.uid, f.uid], f"{a} writes back {r.target} between {b} and {f}")
                break


def _wf17(c: _Ctx) -> None:
    for a in c.acts:
        if a.kind == "B":
            w = c.get(a.prov.get("Ab"))
            if w is not None and w.kind == "Vw":
                c.bad("WF-17", [a.uid, w.uid], f"volatile write {w} written back by a separate {a}")
    pending: dict[tuple, Action] = {}
    for a in _sync_in_so(c):
        if a.kind == "Vw":
            pending[a.var] = a
        elif a.kind == "Vr":
            w = pending.pop(a.var, None)
            if w is not None and a.prov.get("W") != w.uid:
                c.bad("WF-17", [w.uid, a.uid], f"{w} is not visible to the next volatile read {a}")


def _wf18(c: _Ctx) -> None:
    cached: dict[int, set[int]] = {}
    dirty: dict[int, set[tuple]] = {}
    for a in c.acts:
        k = a.kind
        if k == "F":
            cached.setdefault(a.core, set()).add(a.ref)
        elif k == "I":
            cached.setdefault(a.core, set()).discard(a.ref)
        elif k == "W":
            dirty.setdefault(a.core, set()).add(a.var)
        elif k == "B" and not a.prologue:
            dirty.setdefault(a.core, set()).discard(a.var)
        elif k == "Vr":
            if "Cs" in a.prov:
                c.bad("WF-18", [a.uid], f"volatile read {a} claims a cached source")
            if cached.get(a.core) or dirty.get(a.core):
                c.bad("WF-18", [a.uid], f"core {a.core} still holds cached or dirty data at {a}")


def _wf19(c: _Ctx) -> None:
    acts = c.acts
    first_start = next((i for i, a in enumerate(acts) if a.kind == "S"), len(acts))
    for i, a in enumerate(acts):
        if a.prologue and a.kind not in ("In", "B"):
            c.bad("WF-19", [a.uid], f"{a} is marked as initialization but is not In or B")
        if a.kind == "In":
            nxt = acts[i + 1] if i + 1 < len(acts) else None
            if not a.prologue:
                c.bad("WF-19", [a.uid], f"initialization {a} lies outside the initialization segment")
            if nxt is None or nxt.kind != "B" or nxt.prov.get("Ab") != a.uid or not nxt.prologue:
                c.bad("WF-19", [a.uid], f"initialization {a} is not immediately written back")
        if a.prologue and i > first_start:
            c.bad("WF-19", [a.uid], f"initialization action {a} comes after a thread start")


def _wf20(c: _Ctx) -> None:
    hb = c.hb()
    if hb is None:
        return
    masks = hb.masks
    by_var: dict[tuple, list[tuple[int, int]]] = {}
    for i, b in enumerate(c.acts):
        if b.kind == "B":
            w = c.get(b.prov.get("Ab"))
            if w is not None:
                by_var.setdefault(b.var, []).append((i, c.pos[w.uid]))
    for pairs in by_var.values():
        for x in range(len(pairs)):
            bi, wi = pairs[x]
            for y in range(len(pairs)):
                if x == y:
                    continue
                bj, wj = pairs[y]
                if wi == wj:
                    continue
                if bool((masks[wj] >> wi) & 1) != bool((masks[bj] >> bi) & 1):
                    b1, b2 = c.acts[bi], c.acts[bj]
                    c.bad("WF-20", [b1.uid, b2.uid],
                          f"write-backs {b1} and {b2} disagree with the happens-before order of their writes")


def _wfe1(c: _Ctx) -> None:
    moved: dict[int, tuple[int, int]] = {}  # thread -> (position of M, destination core)
    for i, a in enumerate(c.acts):
        if a.kind == "M":
            moved[a.thread] = (i, a.ref)
        elif a.kind == "R" and a.thread in moved:
            m, dest = moved[a.thread]
            ok = any(
                x.core == a.core and ((x.kind == "F" and x.ref == a.ref) or (x.kind == "W" and x.var == a.var))
                for x in c.acts[m + 1:i]
            )
            if not ok:
                c.bad("WFE-1", [c.acts[m].uid, a.uid], f"{a} after migration has no fetch or write on core {a.core}")


def _wfe2(c: _Ctx) -> None:
    dirty: dict[int, set[tuple]] = {}
    for a in c.acts:
        if a.kind == "W":
            dirty.setdefault(a.core, set()).add(a.var)
        elif a.kind == "B" and not a.prologue:
            dirty.setdefault(a.core, set()).discard(a.var)
        elif a.kind == "M" and dirty.get(a.core):
            c.bad("WFE-2", [a.uid], f"{a} leaves dirty data on core {a.core}")


_TRACE_CHECKS = {
    "WF-1": _wf1, "WF-2": _wf2, "WF-3": _wf3, "WF-4": _wf4, "WF-5": _wf5, "WF-6": _wf6, "WF-7": _wf7,
    "WF-8": _wf8, "WF-9": _wf9, "WF-10": _wf10, "WF-11": _wf11, "WF-12": _wf12, "WF-13": _wf13,
    "WF-14": _wf14, "WF-15": _wf15, "WF-16": _wf16, "WF-17": _wf17, "WF-18": _wf18, "WF-19": _wf19,
    "WF-20": _wf20, "WFE-1": _wfe1, "WFE-2": _wfe2,
}


def check(tr: Trace, rules: Iterable[str] | None = None) -> WfReport:
    """Evaluate the selected rules; state-level rules run only when the trace carries checkpoints."""
    wanted = tuple(rules) if rules is not None else ALL_RULES
    c = _Ctx(tr)
    done = []
    for rule in wanted:
        fn = _TRACE_CHECKS.get(rule)
        if fn is not None:
            fn(c)
            done.append(rule)
    rep = WfReport(c.out, tuple(done))
    wfh = [r for r in wanted if r in WFH_RULES]
    if wfh:
        if tr.checkpoints is None:
            if rules is not None:
                raise MissingCheckpoints("state-level rules need checkpoints; run with --checkpoints")
        else:
            rep.extend(check_wfh(tr, wfh))
    return rep


# ---------------------------------------------------------------------------
# State-level checks over checkpoints


def check_wfh(tr: Trace, rules: Iterable[str] = WFH_RULES, checkpoints: list | None = None) -> WfReport:
    cps = checkpoints if checkpoints is not None else tr.checkpoints
    if cps is None:
        raise MissingCheckpoints("state-level rules need checkpoints; run with --checkpoints")
    wanted = set(rules)
    out: list[Violation] = []

    def bad(rule: str, uids: Iterable[int], msg: str) -> None:
        if rule in wanted:
            out.append(Violation(rule, tuple(uids), msg))

    acts = tr.actions()
    by_uid = {a.uid: a for a in acts}
    prologue_by_ref: dict[int, list[Action]] = {}
    steps: list[Action] = []
    for a in acts:
        if a.prologue:
            prologue_by_ref.setdefault(a.ref, []).append(a)
        else:
            steps.append(a)
    vol = {a.var: a.vol for a in acts if a.kind == "In"}
    last_b: dict[tuple, Action] = {}
    last_vw: dict[tuple, Action] = {}
    cache: dict[int, dict[int, dict[str, tuple]]] = {}
    buf: dict[int, dict[tuple, tuple]] = {}
    fetched: set[tuple] = set()
    seen_refs: set[int] = set()
    k = 0
    prev = None
    for cp in cps:
        step, st = cp["step"], cp["state"]
        for r in st["heap"]:
            if r not in seen_refs:
                seen_refs.add(r)
                for a in prologue_by_ref.get(r, []):
                    if a.kind == "B":
                        last_b[a.var] = a
                    else:
                        last_vw[a.var] = a
        while k < len(steps) and steps[k].step <= step:
            a = steps[k]
            k += 1
            kind = a.kind
            if kind == "W":
                buf.setdefault(a.core, {})[a.var] = (a.value, a.uid)
            elif kind == "B":
                last_b[a.var] = a
                b = buf.get(a.core)
                if b is not None:
                    b.pop(a.var, None)
                objs = cache.get(a.core)
                if objs is not None and a.ref in objs:
                    objs[a.ref][a.fld] = (a.value, a.prov.get("Ab"), a.uid)
            elif kind == "F":
                fetched.add((a.core, a.ref))
                snap = {}
                for fld, buid in (a.prov.get("Bf") or {}).items():
                    b = by_uid.get(buid)
                    if b is not None:
                        snap[fld] = (b.value, b.prov.get("Ab"), a.uid)
                cache.setdefault(a.core, {})[a.ref] = snap
            elif kind == "I":
                cache.get(a.core, {}).pop(a.ref, None)
            elif kind == "Vw":
                last_vw[a.var] = a
        _wfh_state(st, step, bad, vol, last_b, last_vw, cache, buf, fetched, by_uid)
        if prev is not None:
            moved = set(cp.get("cores", []))
            for core in set(prev["caches"]) | set(st["caches"]) | set(prev["buffers"]) | set(st["buffers"]):
                if core in moved:
                    continue
                if prev["caches"].get(core, {}) != st["caches"].get(core, {}) or \
                        prev["buffers"].get(core, {}) != st["buffers"].get(core, {}):
                    bad("WFH-9", [], f"step {step}: core {core} changed without taking a step")
        prev = st
    return WfReport(out, tuple(r for r in WFH_RULES if r in wanted))


def _wfh_state(st: dict, step: int, bad, vol, last_b, last_vw, cache, buf, fetched, by_uid) -> None:
    where = f"step {step}"
    for r, o in st["heap"].items():
        for fld, (v, wuid, buid) in o["fields"].items():
            var = (r, fld)
            if vol.get(var, (r, fld) in st["volatile"]):
                w = last_vw.get(var)
                if w is None or w.uid != wuid or w.value != v:
                    bad("WFH-6", [wuid], f"{where}: volatile r{r}.{fld} does not hold its last volatile write")
            else:
                b = last_b.get(var)
                if b is None or b.uid != buid or b.value != v or b.prov.get("Ab") != wuid:
                    bad("WFH-1", [buid] if isinstance(buid, int) else [],
                        f"{where}: heap r{r}.{fld} does not hold its last write-back")
            _wfh5(bad, where, by_uid, var, v, wuid)
    for core, objs in st["caches"].items():
        exp = cache.get(core, {})
        if set(objs) != set(exp):
            bad("WFH-2", [], f"{where}: core {core} caches {sorted(objs)}, actions give {sorted(exp)}")
        for r, fs in objs.items():
            if (core, r) not in fetched:
                bad("WFH-4", [], f"{where}: r{r} cached on core {core} without any fetch")
            if r in exp and {f: tuple(x) for f, x in fs.items()} != exp[r]:
                bad("WFH-2", [], f"{where}: cached r{r} on core {core} differs from its last fetch or write-back")
            for fld, (v, wuid, _) in fs.items():
                _wfh5(bad, where, by_uid, (r, fld), v, wuid)
    for core, exp in cache.items():
        if exp and core not in st["caches"]:
            bad("WFH-2", [], f"{where}: core {core} lost cached objects {sorted(exp)}")
    for core in set(st["buffers"]) | set(buf):
        got = {k: (e[0], e[1]) for k, e in st["buffers"].get(core, {}).items()}
        if got != buf.get(core, {}):
            bad("WFH-3", [], f"{where}: buffer of core {core} differs from its unwritten writes")
        for (r, fld), e in st["buffers"].get(core, {}).items():
            _wfh5(bad, where, by_uid, (r, fld), e[0], e[1])
    thread_ids = [t for t, _ in st["threads"]]
    if len(thread_ids) != len(set(thread_ids)):
        bad("WFH-8", [], f"{where}: a thread runs on more than one core")
    running = set(thread_ids)
    for r, o in st["heap"].items():
        if (o["lifecycle"] is not None) != (r in running):
            bad("WFH-7", [], f"{where}: r{r} lifecycle {o['lifecycle']} disagrees with its thread term")


def _wfh5(bad, where: str, by_uid: dict, var: tuple, v, wuid) -> None:
    w = by_uid.get(wuid)
    if w is None or w.kind not in WRITE_KINDS or w.var != var or w.value != v:
        bad("WFH-5", [wuid] if isinstance(wuid, int) else [],
            f"{where}: r{var[0]}.{var[1]} holds a value not produced by its recorded write")


# ---------------------------------------------------------------------------
# Checkpoint files


def _vt(v) -> str:
    return value_text(v)


def dumps_checkpoints(cps: list) -> str:
    lines = []
    for cp in cps:
        st = cp["state"]
        rec = {
            "step": cp["step"],
            "cores": cp["cores"],
            "heap": {str(r): {"cls": o["cls"], "lock": o["lock"], "lifecycle": o["lifecycle"],
                              "fields": {f: [_vt(x[0]), x[1], x[2]] for f, x in o["fields"].items()}}
                     for r, o in sorted(st["heap"].items())},
            "volatile": sorted(f"{r}.{f}" for r, f in st["volatile"]),
            "caches": {str(c): {str(r): {f: [_vt(x[0]), x[1], x[2]] for f, x in fs.items()}
                                for r, fs in objs.items()} for c, objs in sorted(st["caches"].items())},
            "buffers": {str(c): [[r, f, _vt(e[0]), e[1], e[2]] for (r, f), e in b.items()]
                        for c, b in sorted(st["buffers"].items())},
            "threads": st["threads"],
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def loads_checkpoints(text: str) -> list:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        heap = {}
        for r, o in rec["heap"].items():
            heap[int(r)] = {
                "cls": o["cls"],
                "lock": tuple(o["lock"]) if o["lock"] else None,
                "lifecycle": o["lifecycle"],
                "fields": {f: (parse_value_text(x[0]), x[1], x[2]) for f, x in o["fields"].items()},
            }
        vols = set()
        for s in rec["volatile"]:
            r, _, f = s.partition(".")
            vols.add((int(r), f))
        caches = {int(c): {int(r): {f: (parse_value_text(x[0]), x[1], x[2]) for f, x in fs.items()}
                           for r, fs in objs.items()} for c, objs in rec["caches"].items()}
        buffers = {int(c): {(e[0], e[1]): (parse_value_text(e[2]), e[3], e[4]) for e in b}
                   for c, b in rec["buffers"].items()}
        state = {"heap": heap, "volatile": vols, "caches": caches, "buffers": buffers,
                 "threads": [tuple(x) for x in rec["threads"]]}
        out.append({"step": rec["step"], "cores": rec["cores"], "state": state})
    return out


def checkpoint_path(trace_path: str) -> str:
    return trace_path + ".ckpt"
