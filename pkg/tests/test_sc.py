from __future__ import annotations

import pytest

from djcsim.engine import explore
from djcsim.sc import is_drf, sc_outcomes
from djcsim.syntax import load_program

from conftest import CORPUS, program


def field_values(outcomes, obj="main/1", fld="f"):
    return {dict(((o, f), v) for o, f, v in fp)[(obj, fld)] for fp in outcomes}


def test_single_write():
    res = sc_outcomes(load_program("class Main { f: Nat; run(): Unit = { this.f := 1; () } }"))
    assert not res.partial and field_values(res.outcomes, "main") == {"1"}


def test_racy_writes_have_two_outcomes():
    assert field_values(sc_outcomes(program("racy.djc")).outcomes) == {"1", "2"}


def test_monitor_counter_has_one_outcome():
    assert field_values(sc_outcomes(program("mon.djc")).outcomes) == {"2"}


def test_racy_program_has_a_witness():
    v = is_drf(program("racy.djc"))
    assert v.drf is False and v.witness is not None
    assert "f" in str(v.witness)


@pytest.mark.parametrize("name", ["mon.djc", "vol.djc", "counter.djc"])
def test_synchronized_programs_are_race_free(name):
    assert is_drf(program(name), 2000).drf is True


def test_short_search_is_partial():
    res = sc_outcomes(program("mon.djc"), 3)
    assert res.partial
    assert is_drf(program("mon.djc"), 3).drf is None


def test_deadlocking_program_is_counted():
    assert sc_outcomes(program("deadlock.djc")).deadlocks > 0


@pytest.mark.parametrize("path", sorted((CORPUS / "drf").glob("*.djc")), ids=lambda p: p.stem)
def test_race_free_corpus_has_only_sc_outcomes(path):
    p = load_program(path.read_text())
    assert is_drf(p).drf is True
    sc = sc_outcomes(p)
    ex = explore(p, 400)
    assert not sc.partial and not ex.partial
    assert ex.fingerprints <= sc.outcomes
    assert all(o.status == "finished" for o in ex.outcomes.values())
