"""Discrete-event model of monitor managers: per-manager FIFO mailboxes, oldest-requester grants, wait/notify."""

from __future__ import annotations

import random
import re
from collections import deque
from dataclasses import dataclass, field

KINDS = ("MonEnterReq", "MonExitReq", "WaitReq", "WaitTimeoutRemove", "Notify", "NotifyAll", "GrantAck")
_OPS = {
    "enter": "MonEnterReq",
    "exit": "MonExitReq",
    "wait": "WaitReq",
    "timeoutRemove": "WaitTimeoutRemove",
    "notify": "Notify",
    "notifyAll": "NotifyAll",
}
LOCAL_OPS = ("die", "waitalive")  # join protocol steps on a thread descriptor


class ScriptError(Exception):
    pass


@dataclass(frozen=True)
class ClientEvent:
    thread: int
    op: str
    obj: int | None = None

    def text(self) -> str:
        return f"t{self.thread} {self.op}" + (f" r{self.obj}" if self.obj is not None else "")


_LINE = re.compile(r"^t(\d+)\s+(\w+)(?:\s+r(\d+))?$")


def parse_script(text: str) -> list[ClientEvent]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("//")[0].strip()
        if not line:
            continue
        mt = _LINE.match(line)
        if mt is None or (mt.group(2) not in _OPS and mt.group(2) not in LOCAL_OPS):
            raise ScriptError(f"line {n}: expected 't<k> <op> [r<j>]', got {line!r}")
        obj = int(mt.group(3)) if mt.group(3) else None
        out.append(ClientEvent(int(mt.group(1)), mt.group(2), obj))
    return out


def format_script(events: list[ClientEvent]) -> str:
    return "".join(e.text() + "\n" for e in events)


def assign_manager(ref: int, n_managers: int) -> int:
    if n_managers < 1:
        raise ValueError("need at least one manager")
    return ref % n_managers


@dataclass(frozen=True)
class Message:
    kind: str
    obj: int
    sender: tuple[int, int]  # (core, thread)
    seq: int


@dataclass
class MonitorRecord:
    owner: tuple[int, int] | None = None  # (thread, count)
    enter_queue: deque = field(default_factory=deque)  # (thread, count to restore)
    waiters: deque = field(default_factory=deque)


@dataclass
class ManagerState:
    id: int
    mailbox: deque = field(default_factory=deque)
    records: dict[int, MonitorRecord] = field(default_factory=dict)
    next_seq: int = 0
    handled: list[Message] = field(default_factory=list)


@dataclass(frozen=True)
class LogEntry:
    kind: str  # grant | release | wake | fault | stuck
    obj: int | None
    thread: int
    index: int
    detail: str = ""

    def text(self) -> str:
        if self.kind == "grant":
            return f"grant r{self.obj} -> t{self.thread} @{self.index}"
        if self.kind == "release":
            return f"release r{self.obj} by t{self.thread} @{self.index}"
        if self.kind == "wake":
            return f"wake t{self.thread} on r{self.obj} @{self.index}"
        if self.kind == "stuck":
            return f"stuck t{self.thread} ({self.detail}) @{self.index}"
        return f"fault t{self.thread} r{self.obj}: {self.detail} @{self.index}"


def handle(m: ManagerState, msg: Message) -> tuple[list[Message], list[LogEntry]]:
    """Process one message at the head of the mailbox; returns grants sent and log entries."""
    t = msg.sender[1]
    out: list[Message] = []
    log: list[LogEntry] = []
    rec = m.records.get(msg.obj)
    if rec is None:
        rec = m.records[msg.obj] = MonitorRecord()
    m.handled.append(msg)
    idx = msg.seq

    def grant(thread: int, count: int) -> None:
        rec.owner = (thread, count)
        out.append(Message("GrantAck", msg.obj, (m.id, thread), idx))
        log.append(LogEntry("grant", msg.obj, thread, idx))

    def release() -> None:
        log.append(LogEntry("release", msg.obj, t, idx))
        rec.owner = None
        if rec.enter_queue:
            grant(*rec.enter_queue.popleft())

    def fault(why: str) -> None:
        log.append(LogEntry("fault", msg.obj, t, idx, why))

    k = msg.kind
    if k == "MonEnterReq":
        if rec.owner is None:
            grant(t, 1)
        elif rec.owner[0] == t:
            rec.owner = (t, rec.owner[1] + 1)
            out.append(Message("GrantAck", msg.obj, (m.id, t), idx))
        else:
            rec.enter_queue.append((t, 1))
    elif k == "MonExitReq":
        if rec.owner is None or rec.owner[0] != t:
            fault("exit of a monitor not held")
        elif rec.owner[1] > 1:
            rec.owner = (t, rec.owner[1] - 1)
        else:
            release()
    elif k == "WaitReq":
        if rec.owner is None or rec.owner[0] != t:
            fault("wait without holding the monitor")
        else:
            rec.waiters.append((t, rec.owner[1]))
            release()
    elif k == "WaitTimeoutRemove":
        for i, (w, cnt) in enumerate(rec.waiters):
            if w == t:
                del rec.waiters[i]
                rec.enter_queue.append((w, cnt))
                log.append(LogEntry("wake", msg.obj, w, idx, "timeout"))
                if rec.owner is None:
                    grant(*rec.enter_queue.popleft())
                break
    elif k in ("Notify", "NotifyAll"):
        if rec.owner is None or rec.owner[0] != t:
            fault("notify without holding the monitor")
        else:
            n = len(rec.waiters) if k == "NotifyAll" else min(1, len(rec.waiters))
            for _ in range(n):
                w, cnt = rec.waiters.popleft()
                rec.enter_queue.append((w, cnt))
                log.append(LogEntry("wake", msg.obj, w, idx))
    else:
        fault(f"unexpected message {k}")
    return out, log


@dataclass
class SimResult:
    log: list[LogEntry]
    managers: list[ManagerState]
    arrivals: list[Message]
    stuck: list[int]
    dead: dict[int, bool] = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [e.text() for e in self.log]

    def grants(self, obj: int | None = None) -> list[tuple[int, int]]:
        """(thread, index) of each grant, optionally for one monitor."""
        return [(e.thread, e.index) for e in self.log if e.kind == "grant" and (obj is None or e.obj == obj)]

    def faults(self) -> list[LogEntry]:
        return [e for e in self.log if e.kind == "fault"]


def simulate(events: list[ClientEvent], n_managers: int = 1, seed: int | None = None,
             order: list[int] | None = None) -> SimResult:
    """Deliver each client's events in its own order; across clients, arrival follows the script,
    an explicit client order, or a seeded choice among clients able to send."""
    managers = [ManagerState(i) for i in range(n_managers)]
    queues: dict[int, deque] = {}
    for e in events:
        queues.setdefault(e.thread, deque()).append(e)
    state = {t: "ready" for t in queues}
    held: dict[int, list[int]] = {t: [] for t in queues}
    desc_dead: dict[int, bool] = {}
    rng = random.Random(seed) if seed is not None else None
    script = list(events)
    consumed = [False] * len(script)
    explicit = deque(order or [])
    log: list[LogEntry] = []
    arrivals: list[Message] = []
    clock = 0

    def can_send(t: int) -> bool:
        q = queues[t]
        if not q:
            return False
        if state[t] == "ready":
            return True
        return state[t] == "waiting" and q[0].op == "timeoutRemove"

    while True:
        senders = [t for t in sorted(queues) if can_send(t)]
        if not senders:
            break
        if explicit:
            t = explicit.popleft()
            if t not in senders:
                continue
        elif rng is not None:
            t = rng.choice(senders)
        else:
            t = next(ev.thread for i, ev in enumerate(script) if not consumed[i] and can_send(ev.thread))
        e = queues[t].popleft()
        consumed[next(i for i, ev in enumerate(script) if not consumed[i] and ev.thread == t)] = True
        obj = e.obj
        if obj is None:
            if not held[t]:
                log.append(LogEntry("fault", None, t, clock, f"{e.op} names no monitor"))
                continue
            obj = held[t][-1]
        if e.op in LOCAL_OPS:
            if e.op == "die":
                desc_dead[obj] = True
                continue
            if desc_dead.get(obj, False):
                continue  # already dead: nothing to wait for
            kind = "WaitReq"
        else:
            kind = _OPS[e.op]
        mgr = managers[assign_manager(obj, n_managers)]
        msg = Message(kind, obj, (0, t), clock)
        clock += 1
        mgr.mailbox.append(msg)
        arrivals.append(msg)
        if kind == "MonEnterReq":
            state[t] = "blocked_enter"
            held[t].append(obj)
        elif kind == "WaitReq":
            state[t] = "waiting"
        elif kind == "MonExitReq" and obj in held[t]:
            held[t].reverse()
            held[t].remove(obj)
            held[t].reverse()
        while mgr.mailbox:
            out, entries = handle(mgr, mgr.mailbox.popleft())
            log.extend(entries)
            for g in out:
                state[g.sender[1]] = "ready"
    stuck = sorted(t for t in queues if state[t] != "ready" or queues[t])
    for t in stuck:
        log.append(LogEntry("stuck", None, t, clock, state[t]))
    return SimResult(log, managers, arrivals, stuck, desc_dead)


def join_protocol(joiner: int, target: int, descriptor: int) -> tuple[list[ClientEvent], list[ClientEvent]]:
    """Client events for a join built on wait/notifyAll: (joiner events, target completion events)."""
    joiner_events = [
        ClientEvent(joiner, "enter", descriptor),
        ClientEvent(joiner, "waitalive", descriptor),
        ClientEvent(joiner, "exit", descriptor),
    ]
    target_events = [
        ClientEvent(target, "enter", descriptor),
        ClientEvent(target, "die", descriptor),
        ClientEvent(target, "notifyAll", descriptor),
        ClientEvent(target, "exit", descriptor),
    ]
    return joiner_events, target_events


def is_alive(result: SimResult, descriptor: int) -> bool:
    """A plain read of the descriptor's state."""
    return not result.dead.get(descriptor, False)


def grant_intervals(log: list[LogEntry]) -> dict[int, list[tuple[int, int, int]]]:
    """Per monitor: (thread, granted at, released at) spans; unreleased spans end at infinity."""
    open_: dict[int, tuple[int, int]] = {}
    out: dict[int, list[tuple[int, int, int]]] = {}
    for e in log:
        if e.kind == "grant":
            open_[e.obj] = (e.thread, e.index)
        elif e.kind == "release" and e.obj in open_:
            t, start = open_.pop(e.obj)
            out.setdefault(e.obj, []).append((t, start, e.index))
    for obj, (t, start) in open_.items():
        out.setdefault(obj, []).append((t, start, 1 << 62))
    return out
