"""Tests for run configuration files and run records."""

import json

import pytest

from eigensde.config import RunConfig, RunRecord
from eigensde.errors import ConfigError


def write_config(tmp_path, payload):
    path = tmp_path / "run_config.json"
    path.write_text(json.dumps(payload))
    return path


class TestRunConfig:

    def test_flags_override_file(self, tmp_path):
        run = RunConfig.load(write_config(tmp_path, {"seed": 3, "train": {"epochs": 5, "lr": 0.01}}))
        assert run.resolve_seed(None) == 3
        assert run.resolve_seed(8) == 8
        assert run.merged("train", {"epochs": 2, "lr": None}) == {"epochs": 2, "lr": 0.01}

    def test_missing_seed(self):
        with pytest.raises(ConfigError):
            RunConfig().resolve_seed(None)

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(write_config(tmp_path, {"optimizer": {}}))

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            RunConfig.load(path)

    def test_paths(self, tmp_path):
        run = RunConfig.load(write_config(tmp_path, {"paths": {"data": "d.jsonl"}}))
        assert str(run.path("data", None)) == "d.jsonl"
        assert run.path("out", None, required=False) is None
        with pytest.raises(ConfigError):
            run.path("checkpoint", None)


class TestRunRecord:

    def test_record_beside_file(self, tmp_path):
        path = RunRecord("generate", argv=["generate", "--seed", "1"]).update(seed=1).write(tmp_path / "data.jsonl")
        assert path.name == "data.run.json"
        record = json.loads(path.read_text())
        assert record["command"] == "generate"
        assert record["seed"] == 1
        assert record["argv"] == ["generate", "--seed", "1"]
        assert "git" in record and "wall_time_s" in record

    def test_record_in_directory(self, tmp_path):
        path = RunRecord("eval", argv=[]).write(tmp_path / "eval")
        assert path == tmp_path / "eval" / "run.json"
