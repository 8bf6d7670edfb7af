from __future__ import annotations

import json

import pytest

from djcsim.engine import SeededRandom, run
from djcsim.syntax import Nat
from djcsim.trace import (
    MalformedTrace,
    ProvenanceError,
    Trace,
    TraceFormatError,
    action_invalidated,
    action_written_back,
    cache_action_seen,
    po,
    program_order,
    synchronization_order,
    synchronizes_with,
    value_written,
    write_back_fetched,
    write_seen,
)

from conftest import program


@pytest.fixture(scope="module")
def kit():
    return run(program("kit.djc"), SeededRandom(1), cores=2).trace


@pytest.fixture(scope="module")
def mon():
    return run(program("mon.djc"), SeededRandom(2), cores=2).trace


def lines(tr):
    return tr.dumps().splitlines()


def test_dump_load_round_trip(kit):
    again = Trace.loads(kit.dumps())
    assert again.dumps() == kit.dumps()
    assert [a.uid for a in again] == [a.uid for a in kit]


def test_meta_header_first(kit):
    assert "meta" in json.loads(lines(kit)[0])


def test_duplicate_uid_rejected(kit):
    ls = lines(kit)
    with pytest.raises(TraceFormatError, match="duplicate"):
        Trace.loads("\n".join(ls + [ls[-1]]))


def test_positions_must_increase(kit):
    ls = lines(kit)
    rec = json.loads(ls[-1])
    rec["uid"] += 1000
    rec["step"] = 0
    with pytest.raises(TraceFormatError, match="increase"):
        Trace.loads("\n".join(ls + [json.dumps(rec)]))


@pytest.mark.parametrize("patch", [{"kind": "X"}, {"target": "q7"}, {"uid": "x"}, {"prov": [1]}])
def test_bad_records_rejected(kit, patch):
    ls = lines(kit)
    rec = json.loads(ls[-1])
    rec.update(patch)
    with pytest.raises(TraceFormatError):
        Trace.loads("\n".join(ls[:-1] + [json.dumps(rec)]))


def test_non_json_line_rejected():
    with pytest.raises(TraceFormatError, match="line 1"):
        Trace.loads("{nope")


def test_program_order_is_per_thread_position(kit):
    for t, uids in program_order(kit).items():
        assert all(kit.by_uid(u).thread == t for u in uids)
        assert [kit.pos(u) for u in uids] == sorted(kit.pos(u) for u in uids)
    a, b = program_order(kit)[1][:2]
    assert po(kit, a, b) and not po(kit, b, a)


def test_synchronization_order_follows_indices(kit):
    so = [kit.by_uid(u).so for u in synchronization_order(kit)]
    assert so == sorted(so) and len(set(so)) == len(so)


def test_sync_edges(mon, kit):
    kinds = {e.kind for e in synchronizes_with(mon)}
    assert {"U-L", "Fi-J", "Sp-S", "In-S", "B-F"} <= kinds
    assert "Vw-Vr" in {e.kind for e in synchronizes_with(kit)}
    for e in synchronizes_with(mon, include_cache=False):
        assert mon.pos(e.src) < mon.pos(e.dst) and not e.cache_edge


def test_unlock_happens_before_next_lock(mon):
    hb = mon.happens_before()
    for e in synchronizes_with(mon):
        if e.kind == "U-L":
            assert hb(e.src, e.dst) and not hb(e.dst, e.src)


def test_prologue_happens_before_every_start(kit):
    hb = kit.happens_before()
    for s in (a for a in kit if a.kind == "S"):
        assert all(hb(p.uid, s.uid) for p in kit.prologue)


def test_happens_before_is_a_strict_partial_order(mon):
    hb = mon.happens_before()
    n = len(mon)
    for i in range(n):
        assert not hb.idx(i, i)
        for j in range(n):
            if hb.idx(i, j):
                assert not hb.idx(j, i)
                assert hb.masks[i] & ~hb.masks[j] == 0


def test_cyclic_happens_before_is_malformed(mon):
    tr = Trace.loads(mon.dumps())
    # the later unlock is moved ahead of the earlier lock in sync order
    ls = [a for a in tr if a.kind == "L"]
    late_u = [a for a in tr if a.kind == "U" and a.thread == ls[1].thread][0]
    late_u.so = -1
    tr.invalidate()
    with pytest.raises(MalformedTrace):
        tr.happens_before()


def test_provenance_accessors(kit):
    r = next(a for a in kit if a.kind == "R")
    assert kit.by_uid(write_seen(kit, r.uid)).var == r.var
    assert value_written(kit, write_seen(kit, r.uid)) == r.value
    assert kit.by_uid(cache_action_seen(kit, r.uid)).kind in ("F", "W")
    f = next(a for a in kit if a.kind == "F")
    assert all(kit.by_uid(b).kind == "B" for b in write_back_fetched(kit, f.uid).values())
    b = next(a for a in kit if a.kind == "B" and not a.prologue)
    assert kit.by_uid(action_written_back(kit, b.uid)).kind == "W"
    for i in (a for a in kit if a.kind == "I"):
        assert all(kit.by_uid(u).kind in ("F", "W", "B", "In") for u in action_invalidated(kit, i.uid).values())
    with pytest.raises(ProvenanceError):
        write_seen(kit, f.uid)
    with pytest.raises(ProvenanceError):
        write_seen(kit, 10**9)


def test_written_values_are_recorded(kit):
    ws = [a for a in kit if a.kind == "W"]
    assert ws and all(a.value is not None for a in ws)
    assert any(isinstance(a.value, Nat) for a in ws)
