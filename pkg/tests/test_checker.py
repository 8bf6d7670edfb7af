from __future__ import annotations

import pytest

from djcsim.checker import (
    ALL_RULES,
    WFH_RULES,
    MissingCheckpoints,
    check,
    check_wfh,
    dumps_checkpoints,
    loads_checkpoints,
    parse_rule_filter,
)
from djcsim.engine import MigrateDirective, SeededRandom, run
from djcsim.gen import generate

from conftest import program
from mutations import MUTATIONS, base_trace, clone, mutate, rebuild


@pytest.fixture(scope="module")
def bases():
    return {False: base_trace(), True: base_trace(migrate=True)}


def test_mutation_kit_covers_every_rule():
    assert set(MUTATIONS) == set(ALL_RULES)


@pytest.mark.parametrize("migrate", [False, True])
def test_base_traces_are_clean(bases, migrate):
    rep = check(bases[migrate])
    assert rep.ok, rep.dumps()
    assert set(rep.checked) == set(ALL_RULES)


@pytest.mark.parametrize("rule", ALL_RULES)
def test_each_mutation_is_flagged_by_its_rule(bases, rule):
    tr = mutate(rule, bases)
    rep = check(tr)
    assert rule in rep.rules(), f"{MUTATIONS[rule][0].__doc__}: got {sorted(rep.rules())}"


@pytest.mark.parametrize("rule", ALL_RULES)
def test_mutation_leaves_the_base_untouched(bases, rule):
    before = bases[MUTATIONS[rule][1]].dumps()
    mutate(rule, bases)
    assert bases[MUTATIONS[rule][1]].dumps() == before


def test_removing_the_fetch_before_a_remote_read(bases):
    tr = clone(bases[False])
    acts = [a for a in tr.actions() if not a.prologue]
    r = next(a for a in acts if a.kind == "R" and tr.by_uid(a.prov["W"]).kind == "W"
             and tr.by_uid(a.prov["W"]).core != a.core)
    f = tr.by_uid(r.prov["Cs"])
    assert f.kind == "F"
    r.prov["Cs"] = None
    tr = rebuild(tr, [a for a in acts if a is not f])
    assert "WF-16" in check(tr).rules()


def test_read_of_an_absent_write(bases):
    tr = clone(bases[False])
    next(a for a in tr if a.kind == "R").prov["W"] = 10**9
    tr.checkpoints = None
    assert "WF-1" in check(tr).rules()


def test_rule_filter_restricts_the_report(bases):
    tr = mutate("WF-16", bases)
    assert check(tr, ["WF-16"]).rules() == {"WF-16"}
    assert check(tr, ["WF-1"]).checked == ("WF-1",)


def test_parse_rule_filter():
    assert parse_rule_filter(None) == ALL_RULES
    assert parse_rule_filter("wf-5, WFH-2") == ("WF-5", "WFH-2")
    with pytest.raises(ValueError):
        parse_rule_filter("WF-21")


def test_state_rules_need_checkpoints(bases):
    tr = clone(bases[False])
    tr.checkpoints = None
    assert not set(check(tr).checked) & set(WFH_RULES)
    with pytest.raises(MissingCheckpoints):
        check(tr, ["WFH-1"])
    with pytest.raises(MissingCheckpoints):
        check_wfh(tr)


def test_checkpoint_file_round_trip(bases):
    cps = bases[True].checkpoints
    text = dumps_checkpoints(cps)
    again = loads_checkpoints(text)
    assert dumps_checkpoints(again) == text
    assert check_wfh(bases[True], checkpoints=again).ok


def test_checking_is_pure(bases):
    tr = mutate("WF-5", bases)
    snapshot = tr.dumps()
    assert check(tr).dumps() == check(tr).dumps()
    assert tr.dumps() == snapshot


@pytest.mark.parametrize("seed", range(8))
def test_generated_programs_are_clean_with_checkpoints(seed):
    p = generate(seed)[1]
    res = run(p, SeededRandom(seed, parallel=seed % 2 == 1), cores=3, checkpoints=True)
    rep = check(res.trace)
    assert rep.ok, rep.dumps()


@pytest.mark.parametrize("name", ["counter.djc", "vol.djc", "crit5.djc", "deadlock_join.djc"])
def test_corpus_traces_are_clean(name):
    res = run(program(name), SeededRandom(3), cores=4, checkpoints=True,
              migrations=[MigrateDirective.parse("t1@20:c3")])
    assert check(res.trace).ok
