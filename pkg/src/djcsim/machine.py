"""Shared heap, per-core object caches and write buffers, and the cache operations on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from .syntax import Program, Ref, Value, default_value, print_expr, value_text
from .trace import Action


class MachineFault(Exception):
    """An operation was applied outside its preconditions; indicates an interpreter bug."""


class Slot(NamedTuple):
    """A heap field: its value, the In/W/Vw that produced it, and the B that stored it (None for Vw)."""

    value: Value
    wuid: int
    buid: int | None


class CSlot(NamedTuple):
    """A cached field: value, producing write, and the F or B that put it in the cache."""

    value: Value
    wuid: int
    cuid: int


class BSlot(NamedTuple):
    """A dirty buffer entry: value, the W that produced it, and that W's thread."""

    value: Value
    wuid: int
    wthread: int


@dataclass(slots=True)
class ObjectRecord:
    cls: str
    fields: dict[str, Slot]
    lock: tuple[int, int] | None = None  # (owner, count); None is free
    lifecycle: str | None = None

    def copy(self) -> "ObjectRecord":
        return ObjectRecord(self.cls, dict(self.fields), self.lock, self.lifecycle)


START = "<start>"


@dataclass(slots=True)
class ThreadTerm:
    core: int
    thread: int
    body: object  # START or an expression


@dataclass(slots=True)
class Alloc:
    cls: str
    thread: int
    index: int


class Miss:
    def __repr__(self) -> str:
        return "MISS"


MISS = Miss()

POLICIES = ("buffered", "eager")


@dataclass
class MachineState:
    program: Program
    cores: int = 8
    capacity: int = 16
    policy: str = "buffered"
    heap: dict[int, ObjectRecord] = field(default_factory=dict)
    vlocks: dict[tuple[int, str], int] = field(default_factory=dict)
    caches: dict[int, dict[int, dict[str, CSlot]]] = field(default_factory=dict)
    buffers: dict[int, dict[tuple[int, str], BSlot]] = field(default_factory=dict)
    threads: dict[int, ThreadTerm] = field(default_factory=dict)
    next_ref: int = 1
    next_uid: int = 0
    allocs: dict[int, Alloc] = field(default_factory=dict)
    alloc_counts: dict[int, int] = field(default_factory=dict)
    rr: int = 0
    prologue: list[Action] = field(default_factory=list)
    _volatile: dict = field(default_factory=dict, repr=False)

    def clone(self) -> "MachineState":
        s = MachineState(self.program, self.cores, self.capacity, self.policy)
        s.heap = {r: o.copy() for r, o in self.heap.items()}
        s.vlocks = dict(self.vlocks)
        s.caches = {c: {r: dict(fs) for r, fs in objs.items()} for c, objs in self.caches.items() if objs}
        s.buffers = {c: dict(b) for c, b in self.buffers.items() if b}
        s.threads = {t: ThreadTerm(tt.core, tt.thread, tt.body) for t, tt in self.threads.items()}
        s.next_ref, s.next_uid, s.rr = self.next_ref, self.next_uid, self.rr
        s.allocs = dict(self.allocs)
        s.alloc_counts = dict(self.alloc_counts)
        s.prologue = list(self.prologue)
        s._volatile = self._volatile
        return s

    # lookups

    def cache(self, core: int) -> dict[int, dict[str, CSlot]]:
        c = self.caches.get(core)
        if c is None:
            c = self.caches[core] = {}
        return c

    def buffer(self, core: int) -> dict[tuple[int, str], BSlot]:
        b = self.buffers.get(core)
        if b is None:
            b = self.buffers[core] = {}
        return b

    def obj(self, ref: int) -> ObjectRecord:
        o = self.heap.get(ref)
        if o is None:
            raise MachineFault(f"unallocated reference r{ref}")
        return o

    def is_volatile(self, ref: int, fld: str) -> bool:
        key = (self.obj(ref).cls, fld)
        v = self._volatile.get(key)
        if v is None:
            decl = self.program.cls(key[0]).get_field(fld)
            if decl is None:
                raise MachineFault(f"class {key[0]} has no field {fld}")
            v = self._volatile[key] = decl.volatile
        return v

    def new_action(self, kind: str, thread: int, core: int, ref: int | None = None, fld: str | None = None,
                   value: Value | None = None, prov: dict | None = None, prologue: bool = False) -> Action:
        a = Action(self.next_uid, kind, thread, core, ref, fld, value, prologue, prov or {})
        self.next_uid += 1
        return a

    def terms_on(self, core: int) -> list[ThreadTerm]:
        return [tt for _, tt in sorted(self.threads.items()) if tt.core == core]

    # allocation

    def allocate(self, cls_name: str, thread: int, core: int, lifecycle: str | None = None) -> int:
        """Allocate an object with default fields; emits the prologue In/B pair per field."""
        cdef = self.program.cls(cls_name)
        if cdef is None:
            raise MachineFault(f"unknown class {cls_name}")
        ref = self.next_ref
        self.next_ref += 1
        fields: dict[str, Slot] = {}
        for f in cdef.fields:
            v = default_value(f.type)
            init = self.new_action("In", thread, core, ref, f.name, v, prologue=True)
            init.vol = f.volatile
            wb = self.new_action("B", thread, core, ref, f.name, v, {"Ab": init.uid}, prologue=True)
            self.prologue.extend((init, wb))
            fields[f.name] = Slot(v, init.uid, wb.uid)
        self.heap[ref] = ObjectRecord(cls_name, fields, None, lifecycle)
        idx = self.alloc_counts.get(thread, 0)
        self.alloc_counts[thread] = idx + 1
        self.allocs[ref] = Alloc(cls_name, thread, idx)
        return ref


def initial_state(program: Program, cores: int = 8, capacity: int = 16, policy: str = "buffered") -> MachineState:
    """Allocate the Main object and place its thread on core 0 with a start marker."""
    if cores < 1:
        raise ValueError("need at least one core")
    if capacity < 1:
        raise ValueError("write buffer capacity must be positive")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    s = MachineState(program, cores, capacity, policy)
    main = s.next_ref
    ref = s.allocate("Main", main, 0, lifecycle="spawned")
    assert ref == main
    s.threads[main] = ThreadTerm(0, main, START)
    return s


# ---------------------------------------------------------------------------
# Cache operations


def cached_read(s: MachineState, core: int, ref: int, fld: str) -> Value | Miss:
    s.obj(ref)
    b = s.buffers.get(core)
    if b and (ref, fld) in b:
        return b[(ref, fld)].value
    c = s.caches.get(core)
    if c and ref in c:
        return c[ref][fld].value
    return MISS


def fetch_object(s: MachineState, core: int, ref: int, thread: int) -> Action:
    o = s.obj(ref)
    snap: dict[str, CSlot] = {}
    bf: dict[str, int] = {}
    a = s.new_action("F", thread, core, ref)
    for f, slot in o.fields.items():
        if s.is_volatile(ref, f):
            continue  # volatile fields are read from the heap, never from a cache
        snap[f] = CSlot(slot.value, slot.wuid, a.uid)
        bf[f] = slot.buid
    a.prov = {"Bf": bf}
    s.cache(core)[ref] = snap
    return a


def write_back_enabled(s: MachineState, core: int, ref: int, fld: str) -> bool:
    b = s.buffers.get(core)
    c = s.caches.get(core)
    return (ref in s.heap and bool(c) and ref in c and bool(b) and (ref, fld) in b
            and not s.is_volatile(ref, fld))


def write_back_field(s: MachineState, core: int, ref: int, fld: str) -> Action:
    if not write_back_enabled(s, core, ref, fld):
        raise MachineFault(f"write-back of r{ref}.{fld} not enabled on core {core}")
    entry = s.buffers[core].pop((ref, fld))
    a = s.new_action("B", entry.wthread, core, ref, fld, entry.value, {"Ab": entry.wuid})
    s.heap[ref].fields[fld] = Slot(entry.value, entry.wuid, a.uid)
    s.caches[core][ref][fld] = CSlot(entry.value, entry.wuid, a.uid)
    return a


def invalidate_object(s: MachineState, core: int, ref: int, thread: int) -> Action:
    c = s.caches.get(core)
    if not c or ref not in c:
        raise MachineFault(f"r{ref} is not cached on core {core}")
    snap = c.pop(ref)
    return s.new_action("I", thread, core, ref, prov={"Ai": {f: cs.cuid for f, cs in snap.items()}})


def next_flush_step(s: MachineState, core: int, invalidate: bool) -> tuple[str, object] | None:
    """The next implicit operation needed to empty the buffer (and, for acquires, the cache)."""
    b = s.buffers.get(core)
    if b:
        ref, fld = next(iter(b))
        c = s.caches.get(core)
        if not c or ref not in c:
            return ("Fetch", ref)
        return ("WriteBack", (ref, fld))
    if invalidate:
        c = s.caches.get(core)
        if c:
            return ("Invalidate", next(iter(c)))
    return None


def apply_flush_step(s: MachineState, core: int, step: tuple[str, object], thread: int) -> Action:
    rule, target = step
    if rule == "Fetch":
        return fetch_object(s, core, target, thread)
    if rule == "WriteBack":
        return write_back_field(s, core, *target)
    return invalidate_object(s, core, target, thread)


def _flush(s: MachineState, core: int, thread: int, invalidate: bool) -> list[Action]:
    out = []
    while (step := next_flush_step(s, core, invalidate)) is not None:
        out.append(apply_flush_step(s, core, step, thread))
    return out


def acquire_flush(s: MachineState, core: int, thread: int = 0) -> list[Action]:
    """Write back every dirty entry (fetching owners as needed), then invalidate the cache."""
    return _flush(s, core, thread, True)


def release_flush(s: MachineState, core: int, thread: int = 0) -> list[Action]:
    """Write back every dirty entry; the cache keeps the written values."""
    return _flush(s, core, thread, False)


def buffer_write(s: MachineState, core: int, ref: int, fld: str, v: Value, thread: int = 0) -> list[Action]:
    """Record a dirty write; a full buffer is flushed first. Returns the emitted actions, W last."""
    s.obj(ref)
    if s.is_volatile(ref, fld):
        raise MachineFault(f"r{ref}.{fld} is volatile")
    out: list[Action] = []
    b = s.buffer(core)
    if len(b) >= s.capacity and (ref, fld) not in b:
        out.extend(release_flush(s, core, thread))
    w = s.new_action("W", thread, core, ref, fld, v)
    b[(ref, fld)] = BSlot(v, w.uid, thread)
    out.append(w)
    return out


# ---------------------------------------------------------------------------
# Debug rendering and snapshots


def dump_state(s: MachineState) -> str:
    """Deterministic textual rendering of heap, caches, buffers and threads."""
    lines = ["heap:"]
    for r in sorted(s.heap):
        o = s.heap[r]
        fs = ", ".join(f"{f}={value_text(sl.value)}" for f, sl in sorted(o.fields.items()))
        extra = ""
        if o.lock:
            extra += f" lock=t{o.lock[0]}x{o.lock[1]}"
        if o.lifecycle:
            extra += f" {o.lifecycle}"
        lines.append(f"  r{r}:{o.cls}{{{fs}}}{extra}")
    for (r, f), t in sorted(s.vlocks.items()):
        lines.append(f"  vlock r{r}.{f}=t{t}")
    lines.append("caches:")
    for c in sorted(s.caches):
        for r in sorted(s.caches[c]):
            fs = ", ".join(f"{f}={value_text(cs.value)}" for f, cs in sorted(s.caches[c][r].items()))
            lines.append(f"  c{c} r{r}{{{fs}}}")
    lines.append("buffers:")
    for c in sorted(s.buffers):
        for (r, f), e in sorted(s.buffers[c].items()):
            lines.append(f"  c{c} r{r}.{f}={value_text(e.value)}")
    lines.append("threads:")
    for t in sorted(s.threads):
        tt = s.threads[t]
        body = tt.body if tt.body is START else print_expr(tt.body)
        lines.append(f"  t{t}@c{tt.core}: {body}")
    return "\n".join(lines) + "\n"


def snapshot(s: MachineState) -> dict:
    """Plain-data copy of the state with provenance, used by the state-level checks."""
    return {
        "heap": {
            r: {
                "cls": o.cls,
                "fields": {f: (sl.value, sl.wuid, sl.buid) for f, sl in o.fields.items()},
                "lock": o.lock,
                "lifecycle": o.lifecycle,
            }
            for r, o in s.heap.items()
        },
        "volatile": {(r, f) for r, o in s.heap.items() for f in o.fields if s.is_volatile(r, f)},
        "caches": {c: {r: {f: tuple(cs) for f, cs in fs.items()} for r, fs in objs.items()}
                   for c, objs in s.caches.items() if objs},
        "buffers": {c: {k: tuple(e) for k, e in b.items()} for c, b in s.buffers.items() if b},
        "threads": [(t, tt.core) for t, tt in sorted(s.threads.items())],
    }


def heap_fingerprint(s: MachineState) -> tuple:
    """Final-heap identity with references renamed by allocation path, lifecycles left out."""
    return canonical_heap({r: {f: sl.value for f, sl in o.fields.items()} for r, o in s.heap.items()},
                          {r: (a.thread, a.index) for r, a in s.allocs.items()})


def canonical_heap(fields: dict[int, dict[str, Value]], allocs: dict[int, tuple[int, int]]) -> tuple:
    """Sorted (object, field, value) triples with refs named by who allocated them, in what order."""
    names: dict[int, str] = {}

    def name(r: int) -> str:
        n = names.get(r)
        if n is None:
            who, idx = allocs[r]
            n = "main" if who == r else f"{name(who)}/{idx}"
            names[r] = n
        return n

    def val(v: Value) -> str:
        return name(v.id) if isinstance(v, Ref) and v.id in allocs else value_text(v)

    return tuple(sorted((name(r), f, val(v)) for r, fs in fields.items() for f, v in fs.items()))
