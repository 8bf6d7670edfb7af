"""Write-back policy comparison: eager per-write write-back versus a bounded write buffer."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .engine import RunResult, Schedule, SeededRandom, run
from .machine import heap_fingerprint
from .syntax import Program
from .trace import SYNC_KINDS, Trace

CSV_HEADER = ("policy", "seed", "writebacks", "fetches", "invalidations", "bulkRuns", "syncActions")


@dataclass(frozen=True)
class PolicyConfig:
    policy: str = "buffered"  # "eager" | "buffered"
    threshold: int = 16

    def __post_init__(self) -> None:
        if self.policy not in ("eager", "buffered"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.threshold < 1:
            raise ValueError("threshold must be at least 1")

    @property
    def label(self) -> str:
        return "eager" if self.policy == "eager" else f"buffered:{self.threshold}"

    @classmethod
    def parse(cls, text: str) -> "PolicyConfig":
        text = text.strip()
        if text == "eager":
            return cls("eager", 1)
        head, _, n = text.partition(":")
        if head != "buffered":
            raise ValueError(f"bad policy {text!r}; expected eager or buffered[:N]")
        return cls("buffered", int(n) if n else 16)


@dataclass(frozen=True)
class OpMetrics:
    writebacks: int
    fetches: int
    invalidations: int
    bulkRuns: int
    syncActions: int


def _field_index(p: Program, cls: str, fld: str) -> int:
    cdef = p.cls(cls)
    return cdef.field_names().index(fld) if cdef else -1


def metrics(tr: Trace, p: Program, classes: dict[int, str]) -> OpMetrics:
    """Counts over non-initialization actions; a bulk run is two or more write-backs of one object's
    fields in declaration order with no other action on that core between them."""
    wb = fe = inv = sync = bulk = 0
    run_len: dict[int, int] = {}
    prev: dict[int, tuple[int, int]] = {}
    for a in tr.actions():
        if a.prologue:
            continue
        k = a.kind
        if k in SYNC_KINDS:
            sync += 1
        if k != "B":
            prev.pop(a.core, None)
        if k == "F":
            fe += 1
        elif k == "I":
            inv += 1
        elif k == "B":
            wb += 1
            idx = _field_index(p, classes[a.ref], a.fld)
            last = prev.get(a.core)
            if last is not None and last == (a.ref, idx - 1):
                run_len[a.core] += 1
                if run_len[a.core] == 2:
                    bulk += 1
            else:
                run_len[a.core] = 1
            prev[a.core] = (a.ref, idx)
    return OpMetrics(wb, fe, inv, bulk, sync)


def run_with_policy(p: Program, cfg: PolicyConfig, schedule: Schedule | None = None, **kw) -> tuple[RunResult, OpMetrics]:
    capacity = cfg.threshold if cfg.policy == "buffered" else kw.pop("capacity", 16)
    kw.pop("capacity", None)
    res = run(p, schedule or SeededRandom(0), capacity=capacity, policy=cfg.policy, **kw)
    classes = {r: a.cls for r, a in res.state.allocs.items()}
    return res, metrics(res.trace, p, classes)


@dataclass
class CompareRow:
    policy: str
    seed: int
    metrics: OpMetrics
    fingerprint: tuple
    status: str

    def csv_fields(self) -> tuple:
        m = self.metrics
        return (self.policy, self.seed, m.writebacks, m.fetches, m.invalidations, m.bulkRuns, m.syncActions)


def compare(p: Program, seeds: list[int], configs: list[PolicyConfig], **kw) -> list[CompareRow]:
    rows = []
    for cfg in configs:
        for seed in seeds:
            res, m = run_with_policy(p, cfg, SeededRandom(seed), **kw)
            rows.append(CompareRow(cfg.label, seed, m, heap_fingerprint(res.state), res.status))
    return rows


def to_csv(rows: list[CompareRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()
