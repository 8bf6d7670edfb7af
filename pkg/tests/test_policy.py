from __future__ import annotations

import csv
import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from djcsim.engine import SeededRandom
from djcsim.gen import generate
from djcsim.policy import CSV_HEADER, PolicyConfig, compare, run_with_policy, to_csv
from djcsim.syntax import load_program

from conftest import program

EAGER, BUFFERED = PolicyConfig("eager", 1), PolicyConfig("buffered", 16)


def test_critical_section_write_backs():
    _, eager = run_with_policy(program("crit5.djc"), EAGER)
    _, buffered = run_with_policy(program("crit5.djc"), BUFFERED)
    assert (eager.writebacks, buffered.writebacks) == (5, 1)


def test_single_write_is_one_write_back_under_both():
    p = load_program("class Main { f: Nat; run(): Unit = { this.f := 1; () } }")
    assert [run_with_policy(p, c)[1].writebacks for c in (EAGER, BUFFERED)] == [1, 1]


def test_buffer_overflow_spills_then_flushes():
    fields = " ".join(f"f{i}: Nat;" for i in range(20))
    writes = " ".join(f"this.f{i} := 1;" for i in range(20))
    p = load_program(f"class Main {{ {fields} run(): Unit = {{ {writes} () }} }}")
    res, m = run_with_policy(p, BUFFERED)
    assert m.writebacks == 20
    kinds = [a.kind for a in res.trace if not a.prologue and a.kind in "WB"]
    assert kinds[:17] == ["W"] * 16 + ["B"]
    assert kinds[-4:] == ["B"] * 4


def test_bulk_runs_count_consecutive_fields():
    p = load_program("class Main { a: Nat; b: Nat; c: Nat; run(): Unit = { this.a := 1; this.b := 1; this.c := 1; () } }")
    assert run_with_policy(p, BUFFERED)[1].bulkRuns == 1
    assert run_with_policy(p, EAGER)[1].bulkRuns == 0


def test_eager_buffers_hold_at_most_one_entry():
    res, _ = run_with_policy(program("counter.djc"), EAGER, SeededRandom(4), cores=3, checkpoints=True)
    assert res.trace.checkpoints
    for cp in res.trace.checkpoints:
        assert all(len(b) <= 1 for b in cp["state"]["buffers"].values())


@pytest.mark.parametrize("name", ["counter.djc", "crit5.djc", "vol.djc", "kit.djc"])
def test_policies_agree_on_the_final_heap(name):
    rows = compare(program(name), [0, 1, 2], [EAGER, BUFFERED], cores=4)
    by_seed: dict = {}
    for r in rows:
        assert r.status == "finished"
        by_seed.setdefault(r.seed, []).append(r)
    for eager, buffered in by_seed.values():
        assert eager.fingerprint == buffered.fingerprint
        assert eager.metrics.writebacks >= buffered.metrics.writebacks


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(0, 100))
def test_eager_never_writes_back_less(pseed, seed):
    p = generate(pseed)[1]
    _, me = run_with_policy(p, EAGER, SeededRandom(seed), cores=2)
    _, mb = run_with_policy(p, BUFFERED, SeededRandom(seed), cores=2)
    assert me.writebacks >= mb.writebacks


def test_csv_layout():
    rows = compare(program("crit5.djc"), [0, 1], [EAGER, BUFFERED, PolicyConfig("buffered", 2)])
    parsed = list(csv.reader(io.StringIO(to_csv(rows))))
    assert tuple(parsed[0]) == CSV_HEADER
    assert len(parsed) == 1 + 3 * 2
    assert [r[0] for r in parsed[1:]] == ["eager"] * 2 + ["buffered:16"] * 2 + ["buffered:2"] * 2


def test_policy_config_parse():
    assert PolicyConfig.parse("eager") == EAGER
    assert PolicyConfig.parse("buffered") == BUFFERED
    assert PolicyConfig.parse("buffered:4").threshold == 4
    for bad in ("lazy", "buffered:0"):
        with pytest.raises(ValueError):
            PolicyConfig.parse(bad)
