from __future__ import annotations

import numpy as np
import pytest

from ltcausal.data import (
    ImbalanceProfile,
    LongTailDataset,
    SyntheticSample,
    assign_splits,
    build_imbalance_profile,
    generate_synthetic_dataset,
)
from ltcausal.model import BackboneConfig, build_model


@pytest.fixture(scope="session")
def tiny_dataset() -> LongTailDataset:
    """Small confounded benchmark: ~123 train / 100 test images."""
    profile = build_imbalance_profile(10, 30, 0.1)
    ds = generate_synthetic_dataset(
        profile, confound_strength=0.9, seed=7, test_per_class=10
    )
    return assign_splits(ds, 0.3, 0.3)


@pytest.fixture(scope="session")
def tiny_backbone() -> BackboneConfig:
    return BackboneConfig(embed_dim=32, depth=2, heads=2)


@pytest.fixture(scope="session")
def tiny_model(tiny_backbone):
    return build_model(tiny_backbone, seed=0)


def make_manual_dataset(samples: list[SyntheticSample], class_count: int) -> LongTailDataset:
    """Assemble a LongTailDataset directly from handmade samples."""
    counts = [0] * class_count
    for s in samples:
        counts[s.label] += 1
    size = samples[0].image.shape[0] if samples else 8
    channels = samples[0].image.shape[2] if samples else 3
    return LongTailDataset(
        samples=samples,
        test_samples=[],
        profile=ImbalanceProfile.from_counts(counts),
        split_assignment={},
        seed=0,
        class_families=(),
        val_indices=(),
        image_size=size,
        channels=channels,
        texture_families=0,
    )
