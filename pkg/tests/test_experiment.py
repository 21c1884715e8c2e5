from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np
import pytest

from ltcausal.evaluate import MetricsReport
from ltcausal.experiment import (
    DEFAULT_ABLATION_ROWS,
    ablation_sweep,
    hash_tree,
    row_name,
    run_experiment,
    sha256_file,
)
from ltcausal.train import load_checkpoint


def tiny_experiment_config(out_dir: Path, **overrides) -> dict:
    cfg = {
        "dataset": {
            "classes": 10,
            "n_max": 12,
            "ratio": 0.5,
            "rho": 0.8,
            "seed": 1,
            "test_per_class": 4,
        },
        "model": {"embed_dim": 32, "depth": 1, "heads": 2},
        "intervention": {"l": 4},
        "train": {"stage1_epochs": 2, "stage2_epochs": 1, "batch_size": 32},
        "output_dir": str(out_dir),
    }
    for key, value in overrides.items():
        cfg.setdefault(key, {}).update(value) if isinstance(value, dict) else cfg.update(
            {key: value}
        )
    return cfg


def _strip_volatile(manifest: dict) -> dict:
    data = copy.deepcopy(manifest)
    data.pop("run", None)
    return data


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = tiny_experiment_config(out)
    manifest = run_experiment(cfg)
    return cfg, manifest


class TestRunExperiment:
    def test_all_stages_present(self, completed_run):
        _, manifest = completed_run
        assert manifest.data["stage_order"] == [
            "dataset", "confounders", "stage1", "stage2", "eval",
        ]
        for name in manifest.data["artifacts"]:
            assert Path(manifest.data["artifacts"][name]["path"]).exists()

    def test_report_readable_and_fingerprinted(self, completed_run):
        cfg, manifest = completed_run
        report = MetricsReport.load(manifest.artifact_path("eval") / "report.json")
        assert 0.0 <= report.acc_all <= 1.0
        assert report.config_fingerprint == manifest.data["config_hash"]

    def test_rerun_cache_hits_identical_manifest(self, completed_run):
        cfg, manifest = completed_run
        again = run_experiment(cfg)
        assert set(again.data["run"]["cached_stages"]) == set(again.data["stage_order"])
        assert _strip_volatile(again.data) == _strip_volatile(manifest.data)
        assert again.path != manifest.path  # sibling run directories

    def test_artifact_hashes_match_disk(self, completed_run):
        _, manifest = completed_run
        for name, entry in manifest.data["artifacts"].items():
            assert hash_tree(entry["path"]) == entry["sha256"], name

    def test_stage2_disabled_changes_budget_and_artifacts(self, tmp_path):
        cfg = tiny_experiment_config(
            tmp_path / "erm",
            train={
                "stage1_epochs": 2,
                "stage2_epochs": 1,
                "batch_size": 32,
                "toggles": {
                    "patch_intervention": False,
                    "feature_intervention": False,
                    "counterfactual": False,
                    "refinement": False,
                },
            },
        )
        manifest = run_experiment(cfg)
        assert "stage2" not in manifest.data["artifacts"]
        assert "confounders" not in manifest.data["artifacts"]
        # the unused stage-2 budget folds into stage 1
        state = load_checkpoint(manifest.artifact_path("stage1"))
        assert state.epoch == 3
        assert state.head == "linear"

    def test_until_truncates(self, tmp_path):
        cfg = tiny_experiment_config(tmp_path / "trunc")
        manifest = run_experiment(cfg, until="dataset")
        assert manifest.data["stage_order"] == ["dataset"]


class TestAblationSweep:
    def test_default_rows_cover_toggle_lattice(self):
        names = [row_name({k: v for k, v in row.items()}) for row in DEFAULT_ABLATION_ROWS]
        assert names == [
            "base",
            "patch",
            "feat",
            "patch+feat",
            "patch+feat+cf",
            "patch+feat+cf+refine",
        ]

    def test_sweep_with_duplicate_row(self, tmp_path):
        cfg = tiny_experiment_config(tmp_path / "sweep")
        rows = [
            {},
            {"patch_intervention": True, "name": "pi"},
            {"patch_intervention": True, "name": "pi-again"},
        ]
        summary = ablation_sweep(cfg, rows=rows)
        assert [r["name"] for r in summary["rows"]] == ["base", "pi", "pi-again"]
        for row in summary["rows"]:
            assert "error" not in row
            # traceability: the stored hash matches the report on disk
            assert sha256_file(row["report_path"]) == row["report_sha256"]
            assert Path(row["manifest_path"]).exists()
        # identical rows -> identical metrics under deterministic execution
        assert summary["rows"][1]["acc_all"] == summary["rows"][2]["acc_all"]
        assert summary["rows"][1]["acc_tail"] == summary["rows"][2]["acc_tail"]
        assert (tmp_path / "sweep" / "summary.json").exists()
        assert (tmp_path / "sweep" / "summary.txt").read_text().startswith("row")

    def test_empty_row_list(self, tmp_path):
        cfg = tiny_experiment_config(tmp_path / "empty")
        summary = ablation_sweep(cfg, rows=[])
        assert summary["rows"] == []

    def test_row_failure_recorded_and_sweep_continues(self, tmp_path):
        cfg = tiny_experiment_config(tmp_path / "failing")
        rows = [
            {"refinement": True},  # invalid: refinement without counterfactual
            {},
        ]
        summary = ablation_sweep(cfg, rows=rows)
        assert "error" in summary["rows"][0]
        assert "error" not in summary["rows"][1]

    def test_summary_numbers_match_reports(self, tmp_path):
        cfg = tiny_experiment_config(tmp_path / "trace")
        summary = ablation_sweep(cfg, rows=[{}])
        row = summary["rows"][0]
        report = MetricsReport.load(row["report_path"])
        assert row["acc_all"] == report.acc_all
        assert row["acc_tail"] == report.acc_tail
