from __future__ import annotations

import numpy as np
import pytest

from ltcausal.data import SyntheticSample
from ltcausal.errors import DataError
from ltcausal.evaluate import (
    MetricsReport,
    SimilarityGroups,
    confusion_analysis,
    evaluate,
    export_diagnostics,
)


class ScriptedModel:
    """Replays a fixed logits table in sample order."""

    def __init__(self, logits: np.ndarray):
        self.logits = np.asarray(logits, dtype=np.float32)
        self.cursor = 0

    def forward_inference(self, images):
        n = len(images)
        chunk = self.logits[self.cursor : self.cursor + n]
        self.cursor += n
        return chunk


def _one_hot(labels, classes):
    out = np.zeros((len(labels), classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


@pytest.fixture()
def balanced_samples():
    rng = np.random.default_rng(0)
    samples = []
    for c in range(10):
        for _ in range(5):
            samples.append(
                SyntheticSample(
                    image=rng.uniform(size=(8, 8, 3)).astype(np.float32), label=c
                )
            )
    return samples


SPLITS = {c: ("head" if c < 3 else "tail" if c >= 7 else "mid") for c in range(10)}
GROUPS = SimilarityGroups(groups={c: c // 2 for c in range(10)})


class TestEvaluate:
    def test_oracle_predictor_all_ones(self, balanced_samples):
        labels = [s.label for s in balanced_samples]
        model = ScriptedModel(_one_hot(labels, 10))
        report = evaluate(model, balanced_samples, SPLITS, groups=GROUPS)
        assert report.acc_all == 1.0
        assert report.acc_head == 1.0 and report.acc_mid == 1.0 and report.acc_tail == 1.0
        assert report.per_class_recall == [1.0] * 10

    def test_constant_head_predictor(self, balanced_samples):
        model = ScriptedModel(_one_hot([0] * len(balanced_samples), 10))
        report = evaluate(model, balanced_samples, SPLITS)
        assert report.acc_all == pytest.approx(0.1)
        assert report.acc_tail == 0.0

    def test_acc_all_equals_mean_recall_on_balanced(self, balanced_samples):
        rng = np.random.default_rng(3)
        model = ScriptedModel(rng.normal(size=(len(balanced_samples), 10)))
        report = evaluate(model, balanced_samples, SPLITS)
        assert report.acc_all == pytest.approx(
            float(np.mean(report.per_class_recall)), abs=1e-9
        )

    def test_empty_group_reported_absent(self, balanced_samples):
        splits = {c: "head" if c < 5 else "tail" for c in range(10)}  # no mid classes
        labels = [s.label for s in balanced_samples]
        report = evaluate(ScriptedModel(_one_hot(labels, 10)), balanced_samples, splits)
        assert report.acc_mid is None
        assert report.acc_head == 1.0

    def test_group_acc_within_member_recall_range(self, balanced_samples):
        rng = np.random.default_rng(5)
        model = ScriptedModel(rng.normal(size=(len(balanced_samples), 10)))
        report = evaluate(model, balanced_samples, SPLITS)
        for name in ("head", "mid", "tail"):
            members = [c for c, g in SPLITS.items() if g == name]
            recalls = [report.per_class_recall[c] for c in members]
            acc = getattr(report, f"acc_{name}")
            assert min(recalls) <= acc <= max(recalls)

    def test_shuffle_invariance(self, balanced_samples, tiny_model):
        # aggregate metrics cannot depend on the presentation order
        small = [
            SyntheticSample(
                image=np.random.default_rng(i).uniform(size=(32, 32, 3)).astype(np.float32),
                label=i % 10,
            )
            for i in range(40)
        ]
        report_a = evaluate(tiny_model, small, SPLITS)
        rng = np.random.default_rng(0)
        shuffled = [small[i] for i in rng.permutation(len(small))]
        report_b = evaluate(tiny_model, shuffled, SPLITS)
        assert report_a.acc_all == report_b.acc_all
        assert report_a.per_class_recall == report_b.per_class_recall

    def test_empty_test_set(self):
        with pytest.raises(DataError):
            evaluate(ScriptedModel(np.zeros((0, 10))), [], SPLITS)


class TestConfusionAnalysis:
    def test_zero_errors(self):
        labels = np.arange(10)
        similar, nonsimilar = confusion_analysis(labels, labels, GROUPS, SPLITS)
        assert sum(similar.values()) == 0 and sum(nonsimilar.values()) == 0

    def test_single_in_group_error(self):
        labels = np.array([8])
        preds = np.array([9])  # same group (9 // 2 == 8 // 2), true class is tail
        similar, nonsimilar = confusion_analysis(preds, labels, GROUPS, SPLITS)
        assert similar == {"head": 0, "mid": 0, "tail": 1}
        assert sum(nonsimilar.values()) == 0

    def test_counts_sum_to_errors(self):
        rng = np.random.default_rng(7)
        labels = rng.integers(0, 10, size=500)
        preds = rng.integers(0, 10, size=500)
        similar, nonsimilar = confusion_analysis(preds, labels, GROUPS, SPLITS)
        errors = int((labels != preds).sum())
        assert sum(similar.values()) + sum(nonsimilar.values()) == errors

    def test_prediction_out_of_range(self):
        with pytest.raises(DataError):
            confusion_analysis(np.array([11]), np.array([0]), GROUPS, SPLITS)


class TestSimilarityGroups:
    def test_from_families_partition(self):
        groups = SimilarityGroups.from_families(("a", "a", "b", "c", "b"))
        assert groups.groups == {0: 0, 1: 0, 2: 1, 3: 2, 4: 1}

    def test_from_json(self, tmp_path):
        path = tmp_path / "groups.json"
        path.write_text('{"0": 0, "1": 0, "2": 1}')
        groups = SimilarityGroups.from_json(path)
        assert groups.groups == {0: 0, 1: 0, 2: 1}


class TestReportPersistence:
    def test_roundtrip_lossless(self, tmp_path, balanced_samples):
        rng = np.random.default_rng(9)
        model = ScriptedModel(rng.normal(size=(len(balanced_samples), 10)))
        report = evaluate(
            model, balanced_samples, SPLITS, groups=GROUPS,
            config_fingerprint="abc123", seed=4,
        )
        path = report.save(tmp_path / "report.json")
        loaded = MetricsReport.load(path)
        assert loaded == report

    def test_fp_fields_consistent(self, balanced_samples):
        rng = np.random.default_rng(11)
        model = ScriptedModel(rng.normal(size=(len(balanced_samples), 10)))
        report = evaluate(model, balanced_samples, SPLITS, groups=GROUPS)
        errors = round((1 - report.acc_all) * len(balanced_samples))
        assert sum(report.similar_fp.values()) + sum(report.nonsimilar_fp.values()) == errors


class TestExportDiagnostics:
    def test_shapes_and_determinism(self, tiny_model, tiny_dataset, tmp_path):
        samples = tiny_dataset.test_samples[:12]
        manifest = export_diagnostics(tiny_model, samples, tmp_path / "a")
        assert manifest["count"] == 12
        assert manifest["feature_dim"] == tiny_model.config.embed_dim
        assert manifest["attention_grid"] == [8, 8]
        feats = np.frombuffer((tmp_path / "a" / "features.bin").read_bytes(), dtype="<f4")
        assert feats.size == 12 * tiny_model.config.embed_dim

        export_diagnostics(tiny_model, samples, tmp_path / "b")
        for name in ("features.bin", "attention.bin", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
