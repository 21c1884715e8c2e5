from __future__ import annotations

import json
from pathlib import Path

import pytest

from ltcausal.cli import main
from ltcausal.data import load_dataset

from test_experiment import tiny_experiment_config


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    rc = main([
        "gen-data", "--classes", "10", "--n-max", "12", "--ratio", "0.5",
        "--rho", "0.8", "--seed", "1", "--test-per-class", "4", "--out", str(out),
    ])
    assert rc == 0
    return out


class TestGenData:
    def test_dataset_written(self, data_dir):
        ds = load_dataset(data_dir)
        assert ds.class_count == 10
        assert ds.profile.counts[0] == 12
        assert len(ds.test_samples) == 40
        assert ds.split_assignment  # splits assigned at generation time


class TestBuildConfounders:
    def test_oracle_masker(self, data_dir, tmp_path):
        out = tmp_path / "dict"
        rc = main([
            "build-confounders", "--data", str(data_dir), "--out", str(out),
            "--masker", "oracle", "--l", "4", "--seed", "0",
        ])
        assert rc == 0
        sidecar = json.loads((out / "prototypes.json").read_text())
        assert sidecar["l"] == 4
        assert (out / "confounders.bin").exists()


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-exp")
    cfg = tiny_experiment_config(root / "out")
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestTrainEvalRun:
    def test_train_stage1_then_stage2(self, config_file):
        assert main(["train", "--stage", "1", "--config", str(config_file)]) == 0
        assert main(["train", "--stage", "2", "--config", str(config_file)]) == 0

    def test_run_and_eval(self, config_file, tmp_path):
        assert main(["run", "--config", str(config_file)]) == 0
        cfg = json.loads(config_file.read_text())
        out_root = Path(cfg["output_dir"])
        stage_dirs = sorted((out_root / "stages").glob("stage2-*"))
        data_dirs = sorted((out_root / "stages").glob("dataset-*"))
        report = tmp_path / "report.json"
        rc = main([
            "eval", "--ckpt", str(stage_dirs[0]), "--data", str(data_dirs[0]),
            "--groups", "families", "--out", str(report),
        ])
        assert rc == 0
        data = json.loads(report.read_text())
        assert 0.0 <= data["acc_all"] <= 1.0

    def test_sweep(self, config_file, tmp_path):
        rows = tmp_path / "rows.json"
        rows.write_text(json.dumps([{}, {"patch_intervention": True}]))
        assert main(["sweep", "--config", str(config_file), "--rows", str(rows)]) == 0
        cfg = json.loads(config_file.read_text())
        summary = json.loads((Path(cfg["output_dir"]) / "summary.json").read_text())
        assert len(summary["rows"]) == 2


class TestFailureExitCodes:
    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"unknown_section": {}}')
        rc = main(["run", "--config", str(bad)])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_eval_missing_checkpoint(self, data_dir, tmp_path):
        rc = main([
            "eval", "--ckpt", str(tmp_path / "ghost"), "--data", str(data_dir),
            "--out", str(tmp_path / "r.json"),
        ])
        assert rc == 1

    def test_sweep_with_failing_row_exits_nonzero(self, config_file):
        import tempfile

        with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
            json.dump([{"refinement": True}], fh)
            rows = fh.name
        assert main(["sweep", "--config", str(config_file), "--rows", rows]) == 1
