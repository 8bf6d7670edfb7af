from __future__ import annotations

import subprocess
import sys

import pytest

from djcsim.cli import main
from djcsim.trace import Trace

from conftest import CORPUS
from mutations import base_trace, mutate


def djc(name: str) -> str:
    return str(CORPUS / name)


def test_run_writes_trace_and_summary(tmp_path, capsys):
    out = tmp_path / "t.jsonl"
    assert main(["run", djc("mon.djc"), "--cores", "2", "--trace", str(out)]) == 0
    text = capsys.readouterr().out
    assert "status: finished" in text and "t1=finished" in text
    assert len(Trace.read(str(out))) > 0
    assert (tmp_path / "t.jsonl.schedule").read_text().startswith("step 0:")


def test_run_with_check_reports_zero(tmp_path, capsys):
    assert main(["run", djc("kit.djc"), "--trace", str(tmp_path / "t"), "--check", "--checkpoints"]) == 0
    assert "violations: 0" in capsys.readouterr().out


def test_deadlock_exit_code(tmp_path, capsys):
    assert main(["run", djc("deadlock.djc"), "--cores", "4", "--trace", str(tmp_path / "t")]) == 3
    assert capsys.readouterr().out.count("blocked t") == 2


def test_budget_exit_code(tmp_path):
    assert main(["run", djc("counter.djc"), "--budget", "10", "--trace", str(tmp_path / "t")]) == 4


def test_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.djc"
    bad.write_text("class Main { run(): Unit = ( }")
    assert main(["run", str(bad)]) == 2
    assert "bad.djc:1:" in capsys.readouterr().err


def test_missing_file_exit_code(capsys):
    assert main(["run", "/nonexistent.djc"]) == 2


def test_too_many_cores(capsys):
    assert main(["run", djc("mon.djc"), "--cores", "513"]) == 2
    assert "512" in capsys.readouterr().err


def test_environment_sets_defaults(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DJCSIM_CORES", "600")
    assert main(["run", djc("mon.djc"), "--trace", str(tmp_path / "t")]) == 2
    monkeypatch.setenv("DJCSIM_CORES", "lots")
    assert main(["run", djc("mon.djc")]) == 2
    monkeypatch.setenv("DJCSIM_CORES", "2")
    assert main(["run", djc("mon.djc"), "--trace", str(tmp_path / "t")]) == 0


def test_check_fresh_and_mutated(tmp_path, capsys):
    good = tmp_path / "good.jsonl"
    main(["run", djc("kit.djc"), "--cores", "2", "--trace", str(good), "--checkpoints"])
    capsys.readouterr()
    assert main(["check", str(good)]) == 0
    assert capsys.readouterr().out == ""
    bad = tmp_path / "bad.jsonl"
    mutate("WF-16", {False: base_trace(), True: base_trace(migrate=True)}).write(str(bad))
    assert main(["check", str(bad)]) == 1
    assert '"rule":"WF-16"' in capsys.readouterr().out
    assert main(["check", str(bad), "--rules", "WF-1"]) == 0
    assert main(["check", str(bad), "--rules", "WF-99"]) == 2


def test_check_state_rules_without_checkpoints(tmp_path):
    tr = tmp_path / "t.jsonl"
    main(["run", djc("mon.djc"), "--trace", str(tr)])
    assert main(["check", str(tr), "--rules", "WFH-1"]) == 2


def test_check_rejects_a_malformed_trace(tmp_path):
    tr = tmp_path / "t.jsonl"
    tr.write_text('{"uid": 1}\n')
    assert main(["check", str(tr)]) == 2


def test_replay_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["run", djc("kit.djc"), "--cores", "3", "--seed", "5", "--schedule", "parallel", "--trace", str(a)]) == 0
    assert main(["run", djc("kit.djc"), "--cores", "3", "--schedule", f"replay:{a}.schedule", "--trace", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_explore_racy(capsys):
    assert main(["explore", djc("racy.djc")]) == 0
    out = capsys.readouterr().out
    assert "main/1.f=1" in out and "main/1.f=2" in out


def test_explore_with_sc(capsys):
    assert main(["explore", djc("mon.djc"), "--sc"]) == 0
    out = capsys.readouterr().out
    assert "not sequentially consistent: 0" in out and "data-race-free: yes" in out


def test_explore_partial(capsys):
    assert main(["explore", djc("mon.djc"), "--depth", "4"]) == 4
    assert "(partial)" in capsys.readouterr().out


def test_compare_crit5(capsys):
    assert main(["compare", djc("crit5.djc"), "--seeds", "0-1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "policy,seed,writebacks,fetches,invalidations,bulkRuns,syncActions"
    rows = [ln.split(",") for ln in lines[1:]]
    assert [(r[0], r[2]) for r in rows] == [("eager", "5")] * 2 + [("buffered:16", "1")] * 2


def test_syncmgr_fifo(capsys):
    assert main(["syncmgr", djc("fifo.script")]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "grant r7 -> t1 @0"


def test_syncmgr_fault_exit(tmp_path):
    s = tmp_path / "x.script"
    s.write_text("t1 exit r2\n")
    assert main(["syncmgr", str(s)]) == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "djcsim", "syncmgr", djc("fifo.script")],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "grant r7 -> t3 @4" in out.stdout


def test_unknown_schedule(capsys):
    assert main(["run", djc("mon.djc"), "--schedule", "bogus"]) == 2


def test_bad_migration_directive(capsys):
    assert main(["run", djc("mon.djc"), "--migrate", "nope"]) == 2


@pytest.mark.parametrize("argv", [[], ["frobnicate"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
