import json
import subprocess
import sys

import numpy as np
import pytest

from gridstate.bench import (
    ConfigError,
    ExperimentConfig,
    parse_estimator,
    parse_seeds,
    records_jsonl,
    run_benchmark,
    summarize,
    summary_csv,
)
from gridstate.cli import main


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "gridstate.cli", *args], capture_output=True,
                          text=True)


# --- harness -------------------------------------------------------------------


def test_parse_estimator_and_seeds():
    assert parse_estimator("wls") == ("wls", None)
    assert parse_estimator("multistart:4") == ("multistart", 4)
    assert parse_estimator("lasso:0.5") == ("lasso", 0.5)
    for bad in ("newton", "multistart:x", "lasso:-1"):
        with pytest.raises(ConfigError):
            parse_estimator(bad)
    assert parse_seeds("0..3") == (0, 1, 2, 3)
    assert parse_seeds("4,1") == (4, 1)
    with pytest.raises(ConfigError):
        parse_seeds("a..b")


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(noise="faulty")
    with pytest.raises(ConfigError):
        ExperimentConfig(noise="pink")
    with pytest.raises(ConfigError):
        ExperimentConfig(d_factor=1.5)
    assert ExperimentConfig(noise="faulty", p_f=0.1).budget_factor() == 0.9
    assert ExperimentConfig(noise="faulty", p_f=0.01).budget_factor() == 0.99
    assert ExperimentConfig(noise="faulty", p_f=0.1, d_factor=0.8).budget_factor() == 0.8


def test_summary_is_recomputable_from_records():
    cfg = ExperimentConfig(case="case14", noise="gaussian", estimator="wls,multistart:2",
                           seeds=(0, 1, 2))
    records = run_benchmark(cfg)
    assert [(r["estimator"], r["seed"]) for r in records] == [
        ("wls", 0), ("wls", 1), ("wls", 2), ("multistart:2", 0), ("multistart:2", 1),
        ("multistart:2", 2)]
    raw = [json.loads(line) for line in records_jsonl(records).splitlines()]
    assert all("runtime" not in r for r in raw)
    rows = summarize(raw)
    for row in rows:
        d2 = [r["d2"] for r in raw if r["estimator"] == row["estimator"]]
        assert row["d2_mean"] == pytest.approx(np.mean(d2))
        assert row["d2_std"] == pytest.approx(np.std(d2, ddof=1))
    assert summary_csv(rows) == summary_csv(summarize(records))
    assert "runtime_mean" in summary_csv(summarize(records), timing=True)


def test_benchmark_needs_two_seeds():
    with pytest.raises(ConfigError):
        run_benchmark(ExperimentConfig(seeds=(0,)))


def test_thread_count_does_not_change_output(monkeypatch):
    cfg = ExperimentConfig(case="case14", noise="gaussian", estimator="wls", seeds=(0, 1, 2))
    one = records_jsonl(run_benchmark(cfg))
    monkeypatch.setenv("GRIDSTATE_THREADS", "3")
    assert records_jsonl(run_benchmark(cfg)) == one


# --- command line ------------------------------------------------------------------


def test_estimate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        assert main(["estimate", "--case", "case14", "--noise", "faulty", "--pf", "0.1",
                     "--seed", "3", "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rec = json.loads(a.read_text())
    assert rec["status"] == "ok" and "runtime" not in rec


def test_timing_flag_adds_runtime(tmp_path):
    out = tmp_path / "t.json"
    assert main(["estimate", "--case", "case2", "--timing", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["runtime"] >= 0


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["estimate", "--case", str(tmp_path / "missing.m")]) == 2
    assert main(["estimate", "--noise", "faulty"]) == 2
    assert main(["estimate", "--estimator", "magic"]) == 2
    assert main(["benchmark", "--seeds", "0"]) == 2
    assert main(["track", str(tmp_path / "nowhere")]) == 2
    assert "gridstate:" in capsys.readouterr().err


def test_robust_beyond_desk_scale_is_config_error(tmp_path):
    from gridstate import bench

    old = bench.ROBUST_MAX_BUSES
    bench.ROBUST_MAX_BUSES = 13
    try:
        assert main(["estimate", "--case", "case14", "--estimator", "robust"]) == 2
    finally:
        bench.ROBUST_MAX_BUSES = old


def test_simulate_then_estimate_from_file(tmp_path):
    ms = tmp_path / "m.jsonl"
    assert main(["simulate", "--case", "case14", "--noise", "gaussian", "--seed", "2",
                 "--out", str(ms)]) == 0
    out = tmp_path / "e.json"
    assert main(["estimate", "--case", "case14", "--measurements", str(ms), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["n_measurements"] == 82


def test_relax_export_and_solve(tmp_path):
    sdpa = tmp_path / "p.sdpa"
    out = tmp_path / "r.json"
    assert main(["relax", "--case", "case2", "--export-sdpa", str(sdpa), "--solve",
                 "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["status"] == "optimal" and abs(res["bound"]) < 1e-4 and res["rank_one"]
    assert sdpa.read_text().splitlines()[2] == str(res["moments"])


def test_track_command(tmp_path):
    stream = tmp_path / "s"
    assert main(["simulate", "--case", "case14", "--steps", "6", "--jump-at", "3",
                 "--out", str(stream)]) == 0
    out = tmp_path / "t.csv"
    assert main(["track", str(stream), "--case", "case14", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 7
    assert [r.split(",")[-1] for r in rows[1:]] == ["0", "0", "0", "1", "0", "0"]


def test_subprocess_entry_point():
    a = run_cli("estimate", "--case", "case2", "--estimator", "multistart:4")
    b = run_cli("estimate", "--case", "case2", "--estimator", "multistart:4")
    assert a.returncode == 0 and a.stdout == b.stdout
    assert run_cli("estimate", "--case", "nope").returncode == 2
