from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from selora.cli import load_report, main
from selora.harness import rank_report

GOLDEN = json.loads((Path(__file__).parent / "golden" / "schemas.json").read_text())

SMALL_RUN = {
    "task": {"kind": "linear_teacher", "layer_dims": [[6, 6], [6, 6]], "true_ranks": [1, 3], "n_samples": 100},
    "train": {"total_steps": 80, "batch_size": 16, "learning_rate": 0.01, "eval_every": 40},
    "policy": {"lambda": 1.02, "test_interval": 20},
}


def write_config(tmp_path, doc=SMALL_RUN, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p



def header(path):
    return path.read_text().splitlines()[0]


def assert_run_dir_schema(d: Path):
    run = json.loads((d / "run.json").read_text())
    assert sorted(run) == GOLDEN["run.json"]
    assert sorted(run["eval_losses"][0]) == GOLDEN["run.json:eval_losses[]"]
    assert sorted(run["rank_trajectory"][0]) == GOLDEN["run.json:rank_trajectory[]"]
    assert sorted(run["layers"][0]) == GOLDEN["run.json:layers[]"]
    for line in (d / "events.jsonl").read_text().splitlines():
        assert sorted(json.loads(line)) == GOLDEN["events.jsonl"]
    eff = json.loads((d / "effective_config.json").read_text())
    assert sorted(eff) == GOLDEN["effective_config.json"]
    assert sorted(eff["policy"]) == GOLDEN["effective_config.json:policy"]
    assert sorted(eff["train"]) == GOLDEN["effective_config.json:train"]
    for name in ("loss_curve.csv", "rank_trajectory.csv"):
        assert header(d / name) == GOLDEN[name]


class TestRun:
    def test_writes_all_files_with_golden_schemas(self, tmp_path):
        out = tmp_path / "run"
        assert main(["run", "--config", str(write_config(tmp_path)), "--out", str(out), "-q"]) == 0
        assert_run_dir_schema(out)
        rows = list(csv.reader((out / "loss_curve.csv").open()))
        assert len(rows) == 81 and rows[1][0] == "1"
        events = (out / "events.jsonl").read_text().splitlines()
        assert len(events) == len(json.loads((out / "run.json").read_text())["expansion_events"])

    def test_repeat_runs_are_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        for d in ("a", "b"):
            assert main(["run", "--config", str(cfg), "--out", str(tmp_path / d), "-q"]) == 0
        for name in ("run.json", "events.jsonl", "loss_curve.csv", "rank_trajectory.csv", "effective_config.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_refuses_to_overwrite_without_force(self, tmp_path, capsys):
        cfg, out = write_config(tmp_path), tmp_path / "run"
        assert main(["run", "--config", str(cfg), "--out", str(out), "-q"]) == 0
        assert main(["run", "--config", str(cfg), "--out", str(out), "-q"]) == 1
        assert "--force" in capsys.readouterr().err
        assert main(["run", "--config", str(cfg), "--out", str(out), "--force", "-q"]) == 0

    def test_seed_and_orientation_flags_reach_effective_config(self, tmp_path):
        out = tmp_path / "run"
        args = ["run", "--config", str(write_config(tmp_path)), "--out", str(out), "--seed", "5",
                "--ratio-orientation", "paper-literal", "-q"]
        assert main(args) == 0
        eff = json.loads((out / "effective_config.json").read_text())
        assert eff["train"]["seed"] == 5 and eff["task"]["seed"] == 5
        assert eff["policy"]["ratio_orientation"] == "paper-literal"
        # the literal ratio is at most 1, so nothing can pass lambda > 1
        assert (out / "events.jsonl").read_text() == ""

    def test_config_error_exit_1(self, tmp_path, capsys):
        bad = write_config(tmp_path, {"task": {"kind": "linear_teacher"}, "policy": {"lambda": 0}})
        assert main(["run", "--config", str(bad), "--out", str(tmp_path / "r"), "-q"]) == 1
        assert "policy.lambda" in capsys.readouterr().err

    def test_missing_config_exit_1(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "r"), "-q"]) == 1

    def test_numerical_abort_exit_2_with_diagnostic(self, tmp_path):
        doc = json.loads(json.dumps(SMALL_RUN))
        doc["train"]["inject_nonfinite_at_step"] = 30
        out = tmp_path / "run"
        assert main(["run", "--config", str(write_config(tmp_path, doc)), "--out", str(out), "-q"]) == 2
        diag = json.loads((out / "diagnostic.json").read_text())
        assert sorted(diag) == GOLDEN["diagnostic.json"] and diag["step"] == 30
        assert not (out / "run.json").exists()


class TestSweep:
    def test_three_lambdas_three_dirs_one_summary(self, tmp_path):
        doc = dict(SMALL_RUN, sweep={"lambdas": [1.05, 1.1, 1.3]})
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", str(write_config(tmp_path, doc)), "--out", str(out), "-q"]) == 0
        dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert dirs == ["lambda_1.05", "lambda_1.1", "lambda_1.3"]
        for d in dirs:
            assert_run_dir_schema(out / d)
        assert header(out / "sweep_summary.csv") == GOLDEN["sweep_summary.csv"]
        rows = list(csv.DictReader((out / "sweep_summary.csv").open()))
        totals = [int(r["total_final_rank"]) for r in rows]
        assert totals == sorted(totals, reverse=True)

    def test_parallel_jobs_match_serial(self, tmp_path):
        doc = dict(SMALL_RUN, sweep={"lambdas": [1.02, 1.5]})
        cfg = write_config(tmp_path, doc)
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s1"), "-q"]) == 0
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s2"), "--jobs", "2", "-q"]) == 0
        for d in ("lambda_1.02", "lambda_1.5"):
            assert (tmp_path / "s1" / d / "run.json").read_bytes() == (tmp_path / "s2" / d / "run.json").read_bytes()

    def test_missing_lambda_list_is_config_error(self, tmp_path):
        assert main(["sweep", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "s"), "-q"]) == 1

    def test_empty_lambda_list_is_config_error(self, tmp_path):
        doc = dict(SMALL_RUN, sweep={"lambdas": []})
        assert main(["sweep", "--config", str(write_config(tmp_path, doc)), "--out", str(tmp_path / "s"), "-q"]) == 1


class TestReport:
    def test_table_matches_rank_report_and_csv_header(self, tmp_path, capsys):
        out = tmp_path / "run"
        main(["run", "--config", str(write_config(tmp_path)), "--out", str(out), "-q"])
        capsys.readouterr()
        assert main(["report", str(out)]) == 0
        text = capsys.readouterr().out
        rows = rank_report(load_report(out))
        for r in rows:
            assert any(line.split()[:3] == [r.layer_id, str(r.final_rank), str(r.param_count)] for line in text.splitlines())
        assert header(out / "rank_report.csv") == GOLDEN["rank_report.csv"]
        csv_rows = list(csv.DictReader((out / "rank_report.csv").open()))
        assert [(c["layer_id"], int(c["final_rank"]), int(c["param_count"]), float(c["share"])) for c in csv_rows] == [
            (r.layer_id, r.final_rank, r.param_count, r.share) for r in rows
        ]

    def test_zero_expansion_run(self, tmp_path, capsys):
        doc = json.loads(json.dumps(SMALL_RUN))
        doc["train"]["total_steps"] = 10
        out = tmp_path / "run"
        main(["run", "--config", str(write_config(tmp_path, doc)), "--out", str(out), "-q"])
        capsys.readouterr()
        assert main(["report", str(out)]) == 0
        text = capsys.readouterr().out
        assert "no expansions" in text
        assert all(line.split()[1] == "1" for line in text.splitlines()[1:3])

    def test_incomplete_dir_exit_1(self, tmp_path):
        (tmp_path / "half").mkdir()
        assert main(["report", str(tmp_path / "half")]) == 1


def test_selftest_passes(capsys):
    assert main(["selftest", "-q"]) == 0
    assert capsys.readouterr().out.count("PASS") == 3
