import json
import subprocess
import sys

import pytest

from combinfer.cli import main

SMALL = ["--K", "3", "--budget", "12", "--iters", "4", "--eval-batches", "2", "--eval-size", "20"]


def test_indivisible_budget_exits_2(capsys):
    assert main(["anneal", "--K", "5", "--budget", "288"]) == 2
    assert "not divisible" in capsys.readouterr().err


def test_unknown_flag_exits_2():
    assert main(["anneal", "--bogus"]) == 2
    assert main([]) == 2


def test_anneal_writes_jsonl(tmp_path):
    out = tmp_path / "m.jsonl"
    assert main(["anneal", "--variant", "nvir-star", *SMALL, "--seed", "7", "--out", str(out), "--dump-trace"]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 5
    assert json.loads(lines[-1])["seed"] == 7
    trace = json.loads((tmp_path / "m.jsonl.trace.json").read_text())
    assert set(trace) == {"trace", "densities", "log_weight"}


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("COMBINFER_SEED", "13")
    out = tmp_path / "m.jsonl"
    assert main(["anneal", *SMALL, "--out", str(out)]) == 0
    assert json.loads(out.read_text().splitlines()[-1])["seed"] == 13
    monkeypatch.setenv("COMBINFER_SEED", "abc")
    assert main(["anneal", *SMALL, "--out", str(out)]) == 2


def test_check_suite_passes(capsys):
    assert main(["check", "--suite", "propose-weight"]) == 0
    record = json.loads(capsys.readouterr().out)
    assert record["suite"] == "propose-weight" and record["status"] == "PASS"


def test_failed_suite_exits_1(monkeypatch):
    from combinfer import checks

    monkeypatch.setitem(checks.SUITES, "resample", lambda: checks.SuiteResult("resample", False, {}))
    assert main(["check", "--suite", "resample"]) == 1


def test_gibbs_toy_and_dump(tmp_path, capsys):
    out = tmp_path / "g.jsonl"
    assert main(["gibbs-toy", "--sweeps", "1", "--iters", "2", "--seed", "1", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3
    assert main(["gibbs-toy", "--sweeps", "0"]) == 2
    capsys.readouterr()
    assert main(["dump", "--K", "3", "--budget", "6", "--seed", "2"]) == 0
    blob = json.loads(capsys.readouterr().out)
    assert blob["trace"]["entries"][0]["address"] == "x/3"


@pytest.mark.parametrize(
    "argv",
    [
        ["anneal", *SMALL, "--seed", "4"],
        ["gibbs-toy", "--sweeps", "1", "--iters", "3", "--seed", "4"],
        ["dump", "--K", "2", "--budget", "4", "--seed", "4"],
    ],
)
def test_fixed_seed_output_is_byte_identical(argv):
    runs = [
        subprocess.run([sys.executable, "-m", "combinfer", *argv], capture_output=True, check=True).stdout
        for _ in range(2)
    ]
    assert runs[0] == runs[1] and runs[0]
