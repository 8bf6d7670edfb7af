"""Memory-model actions, execution traces and the orders derived from them."""

from __future__ import annotations

import graphlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .syntax import Value, parse_value_text, value_text

SYNC_KINDS = frozenset({"In", "Ir", "Ird", "Vr", "Vw", "L", "U", "S", "Fi", "Sp", "J"})
ALL_KINDS = frozenset(SYNC_KINDS | {"R", "W", "F", "B", "I", "M"})
VAR_KINDS = frozenset({"In", "R", "W", "Vr", "Vw", "B"})
OBJ_KINDS = frozenset({"F", "I", "L", "U"})
THREAD_KINDS = frozenset({"S", "Fi", "Sp", "J", "Ir", "Ird"})
WRITE_KINDS = frozenset({"In", "W", "Vw"})
READ_KINDS = frozenset({"R", "Vr"})


class TraceFormatError(Exception):
    pass


@dataclass(slots=True)
class Action:
    uid: int
    kind: str
    thread: int
    core: int
    ref: int | None = None
    fld: str | None = None
    value: Value | None = None
    prologue: bool = False
    prov: dict = field(default_factory=dict)
    step: int = -1
    ord: int = 0
    so: int | None = None
    vol: bool = False

    @property
    def var(self) -> tuple[int, str] | None:
        return (self.ref, self.fld) if self.fld is not None else None

    @property
    def target(self) -> str | None:
        if self.ref is None:
            return None
        if self.kind == "M":
            return f"c{self.ref}"
        if self.fld is not None:
            return f"r{self.ref}.{self.fld}"
        return f"r{self.ref}"

    def to_record(self) -> dict:
        rec = {
            "uid": self.uid,
            "step": self.step,
            "ord": self.ord,
            "core": self.core,
            "thread": self.thread,
            "kind": self.kind,
            "target": self.target,
            "value": None if self.value is None else value_text(self.value),
            "prologue": self.prologue,
            "so": self.so,
            "prov": self.prov,
        }
        if self.kind == "In":
            rec["vol"] = self.vol
        return rec

    def __str__(self) -> str:
        v = "" if self.value is None else f"={value_text(self.value)}"
        return f"#{self.uid}:{self.kind}(t{self.thread}@c{self.core} {self.target or '-'}{v})"


def _parse_target(kind: str, text: str | None) -> tuple[int | None, str | None]:
    if text is None:
        return None, None
    if kind == "M":
        if not text.startswith("c") or not text[1:].isdigit():
            raise TraceFormatError(f"bad migration target {text!r}")
        return int(text[1:]), None
    if not text.startswith("r"):
        raise TraceFormatError(f"bad target {text!r}")
    head, _, fld = text[1:].partition(".")
    if not head.isdigit():
        raise TraceFormatError(f"bad target {text!r}")
    return int(head), (fld or None)


def action_from_record(rec: dict) -> Action:
    try:
        kind = rec["kind"]
        if kind not in ALL_KINDS:
            raise TraceFormatError(f"unknown action kind {kind!r}")
        ref, fld = _parse_target(kind, rec.get("target"))
        raw = rec.get("value")
        prov = rec.get("prov") or {}
        if not isinstance(prov, dict):
            raise TraceFormatError("prov must be an object")
        return Action(
            uid=int(rec["uid"]),
            kind=kind,
            thread=int(rec["thread"]),
            core=int(rec["core"]),
            ref=ref,
            fld=fld,
            value=None if raw is None else parse_value_text(raw),
            prologue=bool(rec.get("prologue", False)),
            prov=prov,
            step=int(rec["step"]),
            ord=int(rec["ord"]),
            so=rec.get("so"),
            vol=bool(rec.get("vol", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"bad action record {rec!r}: {exc}") from exc


@dataclass(slots=True)
class GlobalTransition:
    step: int
    cores: tuple[int, ...]
    actions: list[Action]
    rules: list[str]
    choices: list = field(default_factory=list)


class Trace:
    """Transitions of one execution plus the prologue of initialization actions."""

    def __init__(self, transitions: list[GlobalTransition] | None = None, prologue: list[Action] | None = None,
                 meta: dict | None = None, checkpoints: list | None = None):
        self.transitions = transitions or []
        self.prologue = prologue or []
        self.meta = meta or {}
        self.checkpoints = checkpoints
        self._flat: list[Action] | None = None
        self._index: dict[int, int] | None = None
        self._by_uid: dict[int, Action] | None = None
        self._hb: HappensBefore | None = None

    def invalidate(self) -> None:
        self._flat = self._index = self._by_uid = self._hb = None

    def actions(self) -> list[Action]:
        if self._flat is None:
            flat = sorted(self.prologue, key=lambda a: a.uid)
            for tr in self.transitions:
                flat.extend(tr.actions)
            self._flat = flat
        return self._flat

    def pos(self, uid: int) -> int:
        if self._index is None:
            self._index = {a.uid: i for i, a in enumerate(self.actions())}
        return self._index[uid]

    def by_uid(self, uid: int) -> Action | None:
        if self._by_uid is None:
            self._by_uid = {a.uid: a for a in self.actions()}
        return self._by_uid.get(uid)

    def __len__(self) -> int:
        return len(self.actions())

    def __iter__(self) -> Iterator[Action]:
        return iter(self.actions())

    def finalize(self, so_kinds: Iterable[str] = SYNC_KINDS) -> None:
        """Assign prologue ordinals and synchronization-order indices by flattened position."""
        kinds = frozenset(so_kinds)
        self.invalidate()
        for k, a in enumerate(sorted(self.prologue, key=lambda a: a.uid)):
            a.step, a.ord = -1, k
        n = 0
        for a in self.actions():
            if a.kind in kinds:
                a.so = n
                n += 1
            else:
                a.so = None

    def happens_before(self) -> "HappensBefore":
        if self._hb is None:
            self._hb = HappensBefore(self)
        return self._hb

    # serialization

    def dumps(self) -> str:
        lines = []
        if self.meta:
            lines.append(json.dumps({"meta": self.meta}, separators=(",", ":")))
        for a in self.actions():
            lines.append(json.dumps(a.to_record(), separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Trace":
        meta: dict = {}
        prologue: list[Action] = []
        steps: dict[int, list[Action]] = {}
        seen: set[int] = set()
        last_pos: tuple[int, int] | None = None
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno}: {exc}") from exc
            if not isinstance(rec, dict):
                raise TraceFormatError(f"line {lineno}: expected an object")
            if "meta" in rec and len(rec) == 1:
                meta = rec["meta"]
                continue
            a = action_from_record(rec)
            if a.uid in seen:
                raise TraceFormatError(f"line {lineno}: duplicate uid {a.uid}")
            seen.add(a.uid)
            if a.step < 0:
                prologue.append(a)
                continue
            if last_pos is not None and (a.step, a.ord) <= last_pos:
                raise TraceFormatError(f"line {lineno}: positions must strictly increase")
            last_pos = (a.step, a.ord)
            steps.setdefault(a.step, []).append(a)
        transitions = [
            GlobalTransition(step, tuple(sorted({a.core for a in acts})), acts, [])
            for step, acts in sorted(steps.items())
        ]
        return cls(transitions, prologue, meta)

    @classmethod
    def read(cls, path: str) -> "Trace":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


# ---------------------------------------------------------------------------
# Orders


def program_order(tr: Trace) -> dict[int, list[int]]:
    """Per-thread action uids in program order."""
    out: dict[int, list[int]] = {}
    for a in tr.actions():
        out.setdefault(a.thread, []).append(a.uid)
    return out


def po(tr: Trace, x: int, y: int) -> bool:
    ax, ay = tr.by_uid(x), tr.by_uid(y)
    return ax is not None and ay is not None and ax.thread == ay.thread and tr.pos(x) < tr.pos(y)


def _so_key(tr: Trace, a: Action) -> tuple:
    so = a.so if isinstance(a.so, int) and not isinstance(a.so, bool) else float("inf")
    return (so, tr.pos(a.uid))


def synchronization_order(tr: Trace) -> list[int]:
    """Uids of synchronization actions, ordered by their recorded index (position breaks ties)."""
    sync = [a for a in tr.actions() if a.kind in SYNC_KINDS]
    return [a.uid for a in sorted(sync, key=lambda a: _so_key(tr, a))]


@dataclass(frozen=True, slots=True)
class SwEdge:
    src: int
    dst: int
    kind: str
    cache_edge: bool = False


def synchronizes_with(tr: Trace, include_cache: bool = True) -> list[SwEdge]:
    edges: list[SwEdge] = []
    order = [tr.by_uid(u) for u in synchronization_order(tr)]
    ins = [a for a in order if a.kind == "In"]
    last_vw: dict[tuple, Action] = {}
    last_on_monitor: dict[int, Action] = {}
    spawns: dict[int, Action] = {}
    finishes: dict[int, Action] = {}
    last_ir: dict[int, Action] = {}
    for a in order:
        k = a.kind
        if k == "S":
            edges.extend(SwEdge(i.uid, a.uid, "In-S") for i in ins)
            sp = spawns.get(a.thread)
            if sp is not None:
                edges.append(SwEdge(sp.uid, a.uid, "Sp-S"))
        elif k == "Vw":
            last_vw[a.var] = a
        elif k == "Vr":
            w = last_vw.get(a.var)
            if w is not None:
                edges.append(SwEdge(w.uid, a.uid, "Vw-Vr"))
        elif k in ("L", "U"):
            prev = last_on_monitor.get(a.ref)
            if k == "L" and prev is not None and prev.kind == "U":
                edges.append(SwEdge(prev.uid, a.uid, "U-L"))
            last_on_monitor[a.ref] = a
        elif k == "Sp":
            spawns.setdefault(a.ref, a)
        elif k == "Fi":
            finishes.setdefault(a.thread, a)
        elif k == "J":
            f = finishes.get(a.ref)
            if f is not None:
                edges.append(SwEdge(f.uid, a.uid, "Fi-J"))
        elif k == "Ir":
            last_ir[a.ref] = a
        elif k == "Ird":
            ir = last_ir.get(a.ref)
            if ir is not None:
                edges.append(SwEdge(ir.uid, a.uid, "Ir-Ird"))
    if include_cache:
        for a in tr.actions():
            if a.kind == "F":
                for b in sorted(set((a.prov.get("Bf") or {}).values()), key=str):
                    if isinstance(b, int) and tr.by_uid(b) is not None:
                        edges.append(SwEdge(b, a.uid, "B-F", True))
    return edges


class MalformedTrace(Exception):
    pass


class HappensBefore:
    """Transitive closure of program order and synchronizes-with, stored as predecessor bitsets.

    The prologue segment as a whole precedes every thread start.
    """

    def __init__(self, tr: Trace):
        acts = tr.actions()
        n = len(acts)
        self.tr = tr
        preds: list[list[int]] = [[] for _ in range(n)]
        last_of_thread: dict[int, int] = {}
        for i, a in enumerate(acts):
            p = last_of_thread.get(a.thread)
            if p is not None:
                preds[i].append(p)
            last_of_thread[a.thread] = i
        for e in synchronizes_with(tr, include_cache=False):
            if e.kind == "In-S":
                continue
            preds[tr.pos(e.dst)].append(tr.pos(e.src))
        prologue_idx = [i for i, a in enumerate(acts) if a.prologue]
        starts = {i for i, a in enumerate(acts) if a.kind == "S"}
        ins = [i for i, a in enumerate(acts) if a.kind == "In"]
        init_src = sorted(set(prologue_idx) | set(ins))
        forward = all(p < i for i, ps in enumerate(preds) for p in ps) and all(
            s < t for s in init_src for t in starts
        )
        if forward:
            order = range(n)
        else:
            graph = {i: set(ps) for i, ps in enumerate(preds)}
            for t in starts:
                graph[t] |= set(init_src)
            try:
                order = list(graphlib.TopologicalSorter(graph).static_order())
            except graphlib.CycleError as exc:
                raise MalformedTrace(f"happens-before has a cycle: {exc.args[1]}") from exc
        masks = [0] * n
        init_mask: int | None = None
        for i in order:
            m = 0
            for p in preds[i]:
                m |= masks[p] | (1 << p)
            if i in starts and init_src:
                if init_mask is None:
                    init_mask = 0
                    for p in init_src:
                        init_mask |= masks[p] | (1 << p)
                m |= init_mask
            masks[i] = m
        self.masks = masks

    def __call__(self, x: int, y: int) -> bool:
        """True when action x happens-before action y (strict)."""
        tr = self.tr
        return bool((self.masks[tr.pos(y)] >> tr.pos(x)) & 1)

    def idx(self, i: int, j: int) -> bool:
        return bool((self.masks[j] >> i) & 1)


def happens_before(tr: Trace) -> HappensBefore:
    return tr.happens_before()


# ---------------------------------------------------------------------------
# Provenance functions


class ProvenanceError(Exception):
    pass


def _need(tr: Trace, uid: int, kinds: Iterable[str]) -> Action:
    a = tr.by_uid(uid)
    if a is None:
        raise ProvenanceError(f"unknown uid {uid}")
    if a.kind not in kinds:
        raise ProvenanceError(f"action {uid} has kind {a.kind}, expected one of {sorted(kinds)}")
    return a


def write_seen(tr: Trace, read_uid: int) -> int | None:
    return _need(tr, read_uid, READ_KINDS).prov.get("W")


def value_written(tr: Trace, write_uid: int) -> Value | None:
    return _need(tr, write_uid, WRITE_KINDS).value


def cache_action_seen(tr: Trace, read_uid: int) -> int | None:
    return _need(tr, read_uid, ("R",)).prov.get("Cs")


def write_back_fetched(tr: Trace, fetch_uid: int) -> dict[str, int]:
    return dict(_need(tr, fetch_uid, ("F",)).prov.get("Bf") or {})


def action_written_back(tr: Trace, wb_uid: int) -> int | None:
    return _need(tr, wb_uid, ("B",)).prov.get("Ab")


def action_invalidated(tr: Trace, inv_uid: int) -> dict[str, int]:
    return dict(_need(tr, inv_uid, ("I",)).prov.get("Ai") or {})
