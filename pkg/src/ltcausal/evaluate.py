"""Evaluation protocol: overall/head/mid/tail accuracy, per-class recall, and
the similar vs non-similar false-positive confusion split."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SyntheticSample, images_as_array
from .errors import DataError, ParameterError

SPLIT_NAMES = ("head", "mid", "tail")


@dataclass
class SimilarityGroups:
    """Total partition of class ids into similarity groups."""

    groups: dict[int, int]

    @classmethod
    def from_families(cls, families: tuple[str, ...] | list[str]) -> "SimilarityGroups":
        """Classes sharing a generator shape family count as similar."""
        ids: dict[str, int] = {}
        groups = {}
        for c, fam in enumerate(families):
            if fam not in ids:
                ids[fam] = len(ids)
            groups[c] = ids[fam]
        return cls(groups=groups)

    @classmethod
    def from_json(cls, path: str | Path) -> "SimilarityGroups":
        raw = json.loads(Path(path).read_text())
        return cls(groups={int(k): int(v) for k, v in raw.items()})


@dataclass
class MetricsReport:
    acc_all: float
    acc_head: float | None
    acc_mid: float | None
    acc_tail: float | None
    per_class_recall: list[float]
    similar_fp: dict[str, int] = field(default_factory=dict)
    nonsimilar_fp: dict[str, int] = field(default_factory=dict)
    config_fingerprint: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        return cls(**raw)

    def save(self, path: str | Path) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def predict(model, samples: list[SyntheticSample], batch_size: int = 256) -> np.ndarray:
    """Top-1 predictions through the model's inference path."""
    images = images_as_array(samples)
    preds = []
    for start in range(0, len(samples), batch_size):
        logits = model.forward_inference(images[start : start + batch_size])
        logits = np.asarray(logits.detach().cpu().numpy() if hasattr(logits, "detach") else logits)
        preds.append(logits.argmax(axis=-1))
    return np.concatenate(preds)


def confusion_analysis(
    predictions: np.ndarray,
    labels: np.ndarray,
    groups: SimilarityGroups,
    split_assignment: dict[int, str],
) -> tuple[dict[str, int], dict[str, int]]:
    """Count misclassifications per head/mid/tail of the TRUE class, split by
    whether the predicted class shares the true class's similarity group."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    class_count = len(groups.groups)
    if predictions.min(initial=0) < 0 or predictions.max(initial=0) >= class_count:
        raise DataError("prediction outside the valid class range")
    similar = {name: 0 for name in SPLIT_NAMES}
    nonsimilar = {name: 0 for name in SPLIT_NAMES}
    for pred, true in zip(predictions, labels):
        if pred == true:
            continue
        split = split_assignment.get(int(true), "mid")
        if groups.groups[int(pred)] == groups.groups[int(true)]:
            similar[split] += 1
        else:
            nonsimilar[split] += 1
    return similar, nonsimilar


def evaluate(
    model,
    test_samples: list[SyntheticSample],
    split_assignment: dict[int, str],
    groups: SimilarityGroups | None = None,
    config_fingerprint: str = "",
    seed: int = 0,
    batch_size: int = 256,
) -> MetricsReport:
    """Top-1 metrics: acc_all is global accuracy; each group accuracy is the
    mean per-class recall over the group's classes (absent when empty)."""
    if not test_samples:
        raise DataError("empty test set")
    labels = np.asarray([s.label for s in test_samples])
    class_count = int(labels.max()) + 1
    if split_assignment:
        class_count = max(class_count, max(split_assignment) + 1)
    preds = predict(model, test_samples, batch_size=batch_size)

    correct = preds == labels
    acc_all = float(correct.mean())
    recall = []
    for c in range(class_count):
        sel = labels == c
        recall.append(float(correct[sel].mean()) if sel.any() else float("nan"))

    def group_acc(name: str) -> float | None:
        members = [c for c, g in split_assignment.items() if g == name and not np.isnan(recall[c])]
        if not members:
            return None
        return float(np.mean([recall[c] for c in members]))

    similar_fp: dict[str, int] = {}
    nonsimilar_fp: dict[str, int] = {}
    if groups is not None:
        similar_fp, nonsimilar_fp = confusion_analysis(preds, labels, groups, split_assignment)

    return MetricsReport(
        acc_all=acc_all,
        acc_head=group_acc("head"),
        acc_mid=group_acc("mid"),
        acc_tail=group_acc("tail"),
        per_class_recall=recall,
        similar_fp=similar_fp,
        nonsimilar_fp=nonsimilar_fp,
        config_fingerprint=config_fingerprint,
        seed=seed,
    )


def export_diagnostics(model, samples: list[SyntheticSample], out_dir: str | Path) -> dict:
    """Dump penultimate features and attention rollout maps as raw blobs.

    Written files: features.bin (float32, N x d), attention.bin (float32,
    N x grid x grid), and manifest.json describing both. Deterministic for a
    fixed checkpoint, so re-exports are bit-identical.
    """
    import torch

    from .model import attention_rollout

    if not samples:
        raise ParameterError("no samples to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = images_as_array(samples)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = model.forward_features(images.copy())
        feats = feats.detach().cpu().numpy().astype("<f4")
        maps = attention_rollout(model, images).astype("<f4")
    finally:
        if was_training:
            model.train()
    (out / "features.bin").write_bytes(np.ascontiguousarray(feats).tobytes())
    (out / "attention.bin").write_bytes(np.ascontiguousarray(maps).tobytes())
    manifest = {
        "count": len(samples),
        "feature_dim": int(feats.shape[1]),
        "attention_grid": [int(maps.shape[1]), int(maps.shape[2])],
        "files": {"features": "features.bin", "attention": "attention.bin"},
        "labels": [int(s.label) for s in samples],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
