from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from djcsim.checker import check
from djcsim.engine import (
    Decision,
    ExhaustiveBounded,
    InvalidChoice,
    MigrateDirective,
    Replay,
    SeededRandom,
    explore,
    format_decisions,
    lift,
    migrate,
    par_step,
    parse_decisions,
    replay,
    run,
    spawn,
)
from djcsim.gen import generate
from djcsim.machine import START, ThreadTerm, buffer_write, fetch_object, initial_state
from djcsim.rules import HEAP_WRITERS, SYNC_RULES, RuleInstance, RuleNotEnabled, demand, premises_hold
from djcsim.syntax import Lit, Nat, Ref, load_program, parse_expr, substitute

from conftest import program

SRC = """
class D { a: Nat; b: Nat; }
class T { run(): Unit = () }
class Main { run(): Unit = () }
"""


def two_threads(body0: str, body1: str, cores: int = 2):
    """Main on core 0 and a T on core 1, both started, sharing objects d and e."""
    s = initial_state(load_program(SRC), cores=cores)
    d, e = s.allocate("D", 1, 0), s.allocate("D", 1, 0)
    t = s.allocate("T", 1, 0, lifecycle="started")
    s.heap[1].lifecycle = "started"
    b = {"d": Lit(Ref(d)), "e": Lit(Ref(e))}
    s.threads[1].body = substitute(parse_expr(body0), b)
    s.threads[t] = ThreadTerm(1, t, substitute(parse_expr(body1), b))
    return s, d, e, t


def body_kinds(tr):
    return [a.kind for a in tr if not a.prologue]


def test_empty_main_is_start_then_finish():
    res = run(load_program(SRC))
    assert res.status == "finished" and body_kinds(res.trace) == ["S", "Fi"]
    assert res.state.heap[1].lifecycle == "finished"


@pytest.mark.parametrize("seed", range(5))
def test_counter_traces_are_well_formed(seed):
    res = run(program("mon.djc"), SeededRandom(seed), cores=2)
    assert res.ok and check(res.trace).ok


def test_deadlock_names_both_threads():
    res = run(program("deadlock.djc"), SeededRandom(0), cores=4)
    assert res.status == "deadlock"
    assert len(res.blocked) == 2 and all("monitor" in why for why in res.blocked.values())


def test_spawning_twice_is_refused():
    p = load_program("class T { run(): Unit = () } class Main { run(): Unit = let t: T = new T() in { t.start(); t.start(); () } }")
    res = run(p)
    assert res.status == "stuck" and "already spawned" in res.blocked[1]
    assert body_kinds(res.trace).count("Sp") == 1


def test_two_dirty_fields_are_written_back_before_spawn():
    p = load_program("""
    class D { a: Nat; b: Nat; }
    class T { run(): Unit = () }
    class Main { run(): Unit = let d: D = new D(0, 0) in let t: T = new T() in {
        d.a := 1; d.b := 2; t.start(); () } }""")
    kinds = body_kinds(run(p).trace)
    sp = kinds.index("Sp")
    last_w = max(i for i, k in enumerate(kinds[:sp]) if k == "W")
    assert kinds[last_w + 1:sp].count("B") == 2


def test_spawn_places_the_child_on_an_idle_core():
    p = load_program("class T { run(): Unit = () } class Main { run(): Unit = new T().start() }")
    s = initial_state(p, cores=4)
    while True:
        ri = demand(s, s.threads[1]).rules[0]
        if ri.rule == "Spawn":
            break
        _, s = lift(s, s.threads[1], ri)
    trs, s2 = spawn(s, s.threads[1], ri.target)
    child = s2.threads[ri.target]
    assert child.body is START and child.core == 1
    assert [a.kind for a in trs[-1].actions] == ["Sp"]
    with pytest.raises(RuleNotEnabled):
        spawn(s2, s2.threads[1], ri.target)


def test_lift_touches_only_its_own_core():
    s, d, e, t = two_threads("d.a", "e.a")
    fetch_object(s, 1, e, t)
    tr, s2 = lift(s, s.threads[1], RuleInstance("Fetch", 1, 0, d))
    assert tr.cores == (0,) and s2.caches[1] == s.caches[1]


def test_parallel_reads_on_two_cores():
    s, d, e, t = two_threads("d.a", "d.a")
    fetch_object(s, 0, d, 1)
    fetch_object(s, 1, d, t)
    tr, s2 = par_step(s, [RuleInstance("Field", 1, 0, (d, "a")), RuleInstance("Field", t, 1, (d, "a"))])
    assert [a.kind for a in tr.actions] == ["R", "R"] and s2.heap == s.heap


def test_one_heap_writer_may_run_beside_a_read():
    s, d, e, t = two_threads("d.a", "e.a")
    fetch_object(s, 0, d, 1)
    fetch_object(s, 1, e, t)
    buffer_write(s, 1, e, "b", Nat(4), t)
    tr, s2 = par_step(s, [RuleInstance("Field", 1, 0, (d, "a")), RuleInstance("WriteBack", t, 1, (e, "b"))])
    assert [a.kind for a in tr.actions] == ["R", "B"]
    assert s2.heap[e].fields["b"].value == Nat(4)


def test_two_monitor_enters_cannot_share_a_transition():
    s, d, e, t = two_threads("d.monitorenter", "e.monitorenter")
    pair = [RuleInstance("MonitorEnter", 1, 0, d), RuleInstance("MonitorEnter", t, 1, e)]
    with pytest.raises(InvalidChoice):
        par_step(s, pair)
    _, s = par_step(s, pair[:1])
    _, s = par_step(s, pair[1:])
    assert s.heap[d].lock == (1, 1) and s.heap[e].lock == (t, 1)


def test_two_steps_on_one_core_are_rejected():
    s, d, e, t = two_threads("d.a", "e.a")
    s.threads[t].core = 0
    with pytest.raises(InvalidChoice):
        par_step(s, [RuleInstance("Fetch", 1, 0, d), RuleInstance("Fetch", t, 0, e)])


def test_migration_waits_for_clean_buffers_and_then_refetches():
    s, d, e, t = two_threads("d.a", "()", cores=3)
    fetch_object(s, 0, d, 1)
    buffer_write(s, 0, d, "a", Nat(1), 1)
    assert not premises_hold(s, RuleInstance("Migrate", 1, 0, 2))
    _, s = lift(s, s.threads[1], RuleInstance("WriteBack", 1, 0, (d, "a")))
    tr, s = migrate(s, s.threads[1], 2)
    assert [a.kind for a in tr.actions] == ["M"] and s.threads[1].core == 2
    assert demand(s, s.threads[1]).rules[0].rule == "Fetch"


def test_migration_directive_parse():
    assert MigrateDirective.parse("t3@40:c7") == MigrateDirective(40, 3, 7)
    with pytest.raises(ValueError):
        MigrateDirective.parse("3@40:7")


def test_decision_text_round_trip():
    d = Decision(4, 1, "Field", "r3.f", 2)
    assert Decision.parse(d.text()) == d
    assert parse_decisions(format_decisions([d, d])) == [d, d]
    with pytest.raises(ValueError):
        Decision.parse("step x")


def test_decision_without_thread_field_uses_the_core_resident():
    d = Decision.parse("step 0: core 0 rule Start target r1")
    s = initial_state(load_program(SRC))
    assert d.instance(s).thread == 1


@pytest.mark.parametrize("parallel", [False, True])
def test_replay_reproduces_the_trace(parallel):
    p = program("kit.djc")
    res = run(p, SeededRandom(7, parallel=parallel), cores=3)
    again = replay(p, res.decisions, cores=3)
    assert again.trace.dumps() == res.trace.dumps()


def test_replay_rejects_a_disabled_decision():
    p = program("kit.djc")
    bad = [Decision(0, 0, "Finish", "r1", 1)]
    with pytest.raises(RuleNotEnabled):
        run(p, Replay(bad))


def test_same_seed_same_trace():
    p = program("counter.djc")
    assert run(p, SeededRandom(3)).trace.dumps() == run(p, SeededRandom(3)).trace.dumps()


def test_budget_stops_the_run():
    res = run(program("counter.djc"), SeededRandom(0), budget=50)
    assert res.status == "budget" and res.steps == 50


def test_exhaustive_schedule_goes_through_explore():
    with pytest.raises(ValueError):
        run(program("racy.djc"), ExhaustiveBounded(10))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5000), st.integers(0, 1000), st.integers(1, 6))
def test_parallel_transitions_respect_the_one_writer_discipline(pseed, seed, cores):
    res = run(generate(pseed)[1], SeededRandom(seed, parallel=True), cores=cores)
    for tr in res.trace.transitions:
        assert len(set(tr.cores)) == len(tr.cores) <= 4
        assert sum(r in HEAP_WRITERS for r in tr.rules) <= 1
        assert sum(r in SYNC_RULES for r in tr.rules) <= 1
        assert sum(a.so is not None for a in tr.actions) <= 1


def test_explore_single_thread_has_one_outcome():
    res = explore(load_program("class Main { f: Nat; run(): Unit = { this.f := 1; () } }"), 100)
    assert not res.partial and len(res.outcomes) == 1


def test_explore_racy_writes_give_both_outcomes():
    res = explore(program("racy.djc"), 200)
    values = {dict(((o, f), v) for o, f, v in fp)[("main/1", "f")] for fp in res.fingerprints}
    assert values == {"1", "2"}


def test_explore_without_spontaneous_steps_is_narrower():
    res = explore(program("racy.djc"), 200, spontaneous=False)
    assert len(res.outcomes) == 1


def test_explore_monitor_counter_always_two():
    res = explore(program("mon.djc"), 300)
    assert not res.partial
    assert {dict(((o, f), v) for o, f, v in fp)[("main/1", "f")] for fp in res.fingerprints} == {"2"}


def test_explore_reports_partial_when_depth_is_short():
    assert explore(program("mon.djc"), 5).partial


def test_explore_outcome_traces_are_well_formed():
    for o in explore(program("racy.djc"), 200).outcomes.values():
        assert check(o.trace).ok


def test_explore_with_migrations_stays_well_formed():
    res = explore(program("racy.djc"), 200, cores=2, migrations=True, max_states=20_000)
    assert res.outcomes and all(check(o.trace).ok for o in res.outcomes.values())


def test_a_thread_moves_only_after_it_has_started():
    p = load_program("class T { run(): Unit = () } class Main { run(): Unit = { new T().start(); () } }")
    s = initial_state(p, cores=3)
    while not any(tt.body is START for tt in s.threads.values()):
        _, s = lift(s, s.threads[1], demand(s, s.threads[1]).rules[0])
    child = next(t for t, tt in s.threads.items() if tt.body is START)
    assert not premises_hold(s, RuleInstance("Migrate", child, s.threads[child].core, 2))
    res = run(p, SeededRandom(0), cores=3, migrations=[MigrateDirective.parse(f"t{child}@0:c2")])
    kinds = [a.kind for a in res.trace if a.thread == child and not a.prologue]
    assert res.ok and kinds.index("S") < kinds.index("M") and check(res.trace).ok
