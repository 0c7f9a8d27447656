"""
Tests for the jetplan command line
"""
import json
import os
import time
from pathlib import Path

import pandas as pd
import pytest
from click.testing import CliRunner

from src.cli.main import cli, load_config
from src.utils.config import get_fresh_settings
from src.utils.exceptions import ConfigError

AUTHORITY = Path(__file__).resolve().parents[1] / "scenarios" / "authority.json"

SMALL = {
    "name": "small",
    "arena": {"xmin": 0.0, "xmax": 6.0, "ymin": 0.0, "ymax": 6.0},
    "robots": [{"pose": {"x": 1.0, "y": 1.0, "theta": 0.0}}],
    "objects": [{"label": "far", "state": [5.0, 5.0, 0.0, 0.0]}],
    "params": {"dt": 0.1, "T": 1.0, "max_components": 4, "refit_sample_budget": 300},
    "duration": 0.2,
    "deterministic_objects": True,
}


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def small_path(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL, indent=2))
    return path


def _write(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload, indent=2))
    return path


class TestValidate:
    def test_ok_and_normalized_copy(self, runner, small_path, tmp_path):
        target = tmp_path / "normalized" / "small.json"
        result = runner.invoke(cli, ["validate", str(small_path), "--write", str(target)])
        assert result.exit_code == 0, result.output
        assert "ok (1 robots, 1 objects, 2 steps)" in result.output
        assert load_config(target).model_dump_json() == load_config(small_path).model_dump_json()

    def test_objects_outnumber_robots(self, runner, tmp_path):
        config = dict(SMALL, objects=[{"state": [5.0, 5.0, 0.0, 0.0]}, {"state": [5.0, 4.0, 0.0, 0.0]}])
        result = runner.invoke(cli, ["validate", str(_write(tmp_path, "bad.json", config))])
        assert result.exit_code == 2
        assert "outnumber" in result.output

    def test_missing_file(self, runner, tmp_path):
        result = runner.invoke(cli, ["validate", str(tmp_path / "nope.json")])
        assert result.exit_code == 2
        assert "cannot read config" in result.output

    def test_invalid_json_reports_line(self, tmp_path):
        path = _write(tmp_path, "broken.json", '{\n  "name": "x",\n  "robots": [\n}')
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert "invalid JSON" in str(info.value)
        assert info.value.line == 4


class TestRun:
    def test_writes_outputs(self, runner, small_path, tmp_path):
        out = tmp_path / "run"
        result = runner.invoke(cli, ["run", str(small_path), "--seed", "4", "--out", str(out)])
        assert result.exit_code == 0, result.output
        for name in ("steps.csv", "steps.jsonl", "plans.csv", "summary.json", "manifest.json"):
            assert (out / name).exists(), name
        steps = pd.read_csv(out / "steps.csv")
        assert list(steps["step"]) == [0, 1]
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seed"] == 4
        assert summary["completed"] is True
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "run"

    def test_same_seed_gives_identical_files(self, runner, small_path, tmp_path):
        outs = [tmp_path / "first", tmp_path / "second"]
        for out in outs:
            result = runner.invoke(cli, ["run", str(small_path), "--seed", "4", "--out", str(out)])
            assert result.exit_code == 0, result.output
        for name in ("steps.csv", "steps.jsonl", "plans.csv", "summary.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
        manifests = [json.loads((out / "manifest.json").read_text()) for out in outs]
        assert "created_at" not in manifests[0]
        for manifest in manifests:
            manifest.pop("output_dir")
        assert manifests[0] == manifests[1]

    def test_refuses_non_empty_output(self, runner, small_path, tmp_path):
        out = tmp_path / "taken"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        result = runner.invoke(cli, ["run", str(small_path), "--out", str(out)])
        assert result.exit_code == 2
        assert (out / "keep.txt").exists()

    def test_bad_config(self, runner, tmp_path):
        config = dict(SMALL, duration=-1.0)
        result = runner.invoke(cli, ["run", str(_write(tmp_path, "neg.json", config)),
                                     "--out", str(tmp_path / "never")])
        assert result.exit_code == 2
        assert not (tmp_path / "never").exists()


class TestCovStudy:
    def test_single_trial(self, runner, tmp_path):
        out = tmp_path / "cov"
        result = runner.invoke(cli, ["cov-study", "--p", "0.7", "--horizons", "2", "--trials", "1",
                                     "--seed", "3", "--out", str(out)])
        assert result.exit_code == 0, result.output
        norms = pd.read_csv(out / "norms_p0.7.csv")
        assert len(norms) == 1
        summary = json.loads((out / "summary.json").read_text())
        assert summary["studies"][0]["trials"] == 1

    def test_probability_must_be_positive(self, runner, tmp_path):
        result = runner.invoke(cli, ["cov-study", "--p", "0", "--out", str(tmp_path / "cov")])
        assert result.exit_code == 2

    def test_horizon_must_be_whole_steps(self, runner, tmp_path):
        result = runner.invoke(cli, ["cov-study", "--horizon-length", "0.25", "--trials", "1",
                                     "--out", str(tmp_path / "cov")])
        assert result.exit_code == 2


class TestAuthoritySweep:
    def test_single_speed(self, runner, small_path, tmp_path):
        out = tmp_path / "sweep"
        result = runner.invoke(cli, ["authority-sweep", str(small_path), "--speeds", "1.3", "--out", str(out)])
        assert result.exit_code == 0, result.output
        path = pd.read_csv(out / "path_00_v1.3.csv")
        assert len(path) == 2
        sweep = pd.read_csv(out / "sweep.csv")
        assert list(sweep["speed"]) == [1.3]
        assert sweep["excess_authority"].iloc[0] == pytest.approx(0.3)

    @pytest.mark.slow
    def test_more_authority_never_shortens_path(self, runner, tmp_path):
        config = json.loads(AUTHORITY.read_text())
        config["duration"] = config["params"]["T"]
        path = _write(tmp_path, "authority.json", config)
        out = tmp_path / "sweep"
        args = ["authority-sweep", str(path), "--speeds", "1.3", "--speeds", "1.8", "--speeds", "3.3",
                "--out", str(out)]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
        sweep = pd.read_csv(out / "sweep.csv")
        assert list(sweep["speed"]) == [1.3, 1.8, 3.3]
        for column in ("path_length", "max_lateral_deviation"):
            values = sweep[column].to_numpy()
            assert all(b >= a - 1e-6 for a, b in zip(values, values[1:])), column

    def test_needs_one_robot(self, runner, tmp_path):
        robots = [{"pose": {"x": 1.0, "y": 1.0}}, {"pose": {"x": 1.0, "y": 2.0}}]
        path = _write(tmp_path, "two.json", dict(SMALL, robots=robots))
        result = runner.invoke(cli, ["authority-sweep", str(path), "--out", str(tmp_path / "sweep")])
        assert result.exit_code == 2
        assert "exactly one robot" in result.output


class TestBatch:
    def test_two_seeds(self, runner, small_path, tmp_path):
        out = tmp_path / "batch"
        result = runner.invoke(cli, ["batch", str(small_path), "--seeds", "2", "--workers", "1",
                                     "--out", str(out)])
        assert result.exit_code == 0, result.output
        table = pd.read_csv(out / "batch.csv")
        assert list(table["seed"]) == [0, 1]
        summary = json.loads((out / "summary.json").read_text())
        assert summary["completed"] == 2
        assert summary["discovery_rate"] == 0.0


REPLICA = Path(__file__).resolve().parents[1] / "scenarios" / "multi_robot.json"


@pytest.mark.slow
@pytest.mark.timeout(900)
def test_multi_robot_replica(runner, tmp_path, monkeypatch):
    monkeypatch.setenv("JETPLAN_HEATMAP_EVERY", "0")
    monkeypatch.setenv("JETPLAN_PLAN_LOG_EVERY", "0")
    get_fresh_settings()
    out = tmp_path / "replica"
    workers = max(1, min(20, os.cpu_count() or 1))
    started = time.perf_counter()
    result = runner.invoke(cli, ["batch", str(REPLICA), "--seeds", "20", "--first-seed", "0",
                                 "--workers", str(workers), "--out", str(out)])
    elapsed = time.perf_counter() - started
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "batch.csv")
    assert len(table) == 20
    assert table["completed"].all()
    assert table["all_discovered"].astype(bool).mean() >= 0.9
    verified = table["jensen_satisfied_fraction"].dropna()
    assert (verified == 1.0).all()
    assert elapsed < 600.0
