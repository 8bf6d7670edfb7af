from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from djcsim.syncmgr import (
    ClientEvent,
    Message,
    ManagerState,
    ScriptError,
    assign_manager,
    format_script,
    grant_intervals,
    handle,
    is_alive,
    join_protocol,
    parse_script,
    simulate,
)

from conftest import CORPUS


def sim(text: str, **kw):
    return simulate(parse_script(text), **kw)


def test_free_monitor_is_granted_at_once():
    m = ManagerState(0)
    out, log = handle(m, Message("MonEnterReq", 3, (0, 1), 0))
    assert [g.kind for g in out] == ["GrantAck"] and m.records[3].owner == (1, 1)
    assert log[0].text() == "grant r3 -> t1 @0"


def test_fifo_script():
    res = simulate(parse_script((CORPUS / "fifo.script").read_text()))
    assert res.lines() == [
        "grant r7 -> t1 @0",
        "release r7 by t1 @3",
        "grant r7 -> t2 @3",
        "release r7 by t2 @4",
        "grant r7 -> t3 @4",
        "release r7 by t3 @5",
    ]
    assert not res.stuck and not res.faults()


def test_notify_wakes_the_oldest_waiter():
    res = sim("t1 enter r5\nt1 wait r5\nt2 enter r5\nt2 wait r5\nt3 enter r5\nt3 notify r5\nt3 exit r5\n"
              "t1 exit r5\nt2 exit r5\n")
    wakes = [e.thread for e in res.log if e.kind == "wake"]
    assert wakes == [1]
    assert 2 in res.stuck


def test_notify_all_wakes_every_waiter_in_order():
    res = sim("t1 enter r5\nt1 wait r5\nt2 enter r5\nt2 wait r5\nt3 enter r5\nt3 notifyAll r5\nt3 exit r5\n"
              "t1 exit r5\nt2 exit r5\n")
    assert [e.thread for e in res.log if e.kind == "wake"] == [1, 2]
    assert [t for t, _ in res.grants()] == [1, 2, 3, 1, 2]
    assert not res.stuck


def test_reentrant_enter_counts():
    res = sim("t1 enter r2\nt1 enter r2\nt2 enter r2\nt1 exit r2\nt1 exit r2\nt2 exit r2\n")
    assert [t for t, _ in res.grants()] == [1, 2]
    assert [e.kind for e in res.log].count("release") == 2


def test_wait_restores_the_entry_count():
    res = sim("t1 enter r2\nt1 enter r2\nt1 wait r2\nt2 enter r2\nt2 notify r2\nt2 exit r2\n"
              "t1 exit r2\nt1 exit r2\n")
    assert not res.stuck and not res.faults()
    assert res.managers[0].records[2].owner is None


@pytest.mark.parametrize("script", ["t1 exit r2\n", "t1 notify r2\n", "t1 wait r2\n",
                                    "t1 enter r2\nt2 exit r2\nt1 exit r2\n"])
def test_faults(script):
    assert sim(script).faults()


def test_op_without_a_monitor_faults():
    assert sim("t1 exit\n").faults()


def test_timeout_removal_requeues_the_waiter():
    res = sim("t1 enter r4\nt1 wait r4\nt1 timeoutRemove r4\nt1 exit r4\n")
    assert [e.detail for e in res.log if e.kind == "wake"] == ["timeout"]
    assert [t for t, _ in res.grants()] == [1, 1] and not res.stuck


def test_join_on_a_live_thread_waits_for_it():
    j, t = join_protocol(1, 2, 9)
    res = simulate(j + t)
    assert not res.stuck and not res.faults()
    assert [e.thread for e in res.log if e.kind == "wake"] == [1]
    assert not is_alive(res, 9)


def test_join_on_a_dead_thread_does_not_wait():
    j, t = join_protocol(1, 2, 9)
    res = simulate(t + j)
    assert not res.stuck and not [e for e in res.log if e.kind == "wake"]
    assert [m.kind for m in res.arrivals].count("WaitReq") == 0


def test_is_alive_before_death():
    res = sim("t1 enter r9\nt1 exit r9\n")
    assert is_alive(res, 9)


def test_hundred_enter_exit_pairs():
    text = "".join(f"t{1 + i % 4} enter r1\nt{1 + i % 4} exit r1\n" for i in range(100))
    res = sim(text)
    assert len(res.grants()) == 100
    spans = sorted(grant_intervals(res.log)[1], key=lambda s: s[1])
    assert all(a[2] <= b[1] for a, b in zip(spans, spans[1:]))


def test_monitors_are_partitioned_across_managers():
    res = sim("t1 enter r2\nt2 enter r3\nt1 exit r2\nt2 exit r3\n", n_managers=2)
    assert {m.obj for m in res.managers[0].handled} == {2}
    assert {m.obj for m in res.managers[1].handled} == {3}
    assert assign_manager(7, 3) == 1
    with pytest.raises(ValueError):
        assign_manager(1, 0)


@pytest.mark.parametrize("bad", ["t1 grab r2", "x1 enter r2", "t1 enter 2", "t1"])
def test_script_errors(bad):
    with pytest.raises(ScriptError, match="line 1"):
        parse_script(bad)


def test_script_round_trip_and_comments():
    ev = parse_script("// hi\nt1 enter r2  // go\n\nt1 exit r2\n")
    assert ev == [ClientEvent(1, "enter", 2), ClientEvent(1, "exit", 2)]
    assert parse_script(format_script(ev)) == ev


@settings(max_examples=100, deadline=None)
@given(st.permutations(range(1, 11)))
def test_grants_follow_arrival_order(order):
    events = [ClientEvent(t, "enter", 1) for t in order] + [ClientEvent(t, "exit", 1) for t in order]
    res = simulate(events)
    assert [t for t, _ in res.grants()] == list(order)
    spans = sorted(grant_intervals(res.log)[1], key=lambda s: s[1])
    assert all(a[2] <= b[1] for a, b in zip(spans, spans[1:]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_seeded_arrivals_never_overlap(seed, managers):
    text = "".join(f"t{t} enter r{r}\nt{t} exit r{r}\n" for t in range(1, 6) for r in (1, 2, 3))
    res = sim(text, n_managers=managers, seed=seed)
    assert len(res.grants()) == 15 and not res.stuck
    for spans in grant_intervals(res.log).values():
        spans.sort(key=lambda s: s[1])
        assert all(a[2] <= b[1] for a, b in zip(spans, spans[1:]))
