"""Two-stage causal debiasing for long-tailed image classification.

Stage 1 learns background-robust representations via patch-level and
feature-level backdoor interventions; stage 2 calibrates the classifier's
logit bias with Fourier-domain counterfactual augmentation whose per-class
strength adapts to held-out accuracy. Includes a synthetic confounded
benchmark with exact foreground masks and a config-driven experiment runner.
"""

__version__ = "0.1.0"

from .counterfactual import (
    BalancedCounterfactualSet,
    SpectralPair,
    StrengthTable,
    amplitude_mix,
    build_balanced_set,
    counterfactual_augment,
    fft_decompose,
    fft_recompose,
    update_strength,
)
from .data import (
    ImbalanceProfile,
    LongTailDataset,
    SyntheticSample,
    assign_splits,
    build_imbalance_profile,
    generate_synthetic_dataset,
    ingest_image_folder,
    load_dataset,
    save_dataset,
)
from .confounder import (
    ConfounderDictionary,
    ConfounderImage,
    PrototypeDictionary,
    build_confounder_dictionary,
    build_prototype_dictionary,
    derive_mask_saliency,
    extract_confounder,
    make_variant_dictionary,
)
from .evaluate import MetricsReport, SimilarityGroups, confusion_analysis, evaluate
from .model import BackboneConfig, PatchSequence, ViTClassifier, build_model, patch_intervene
from .train import (
    Toggles,
    TrainConfig,
    TrainState,
    loss_cls,
    loss_finetune,
    train_stage1,
    train_stage2,
)

__all__ = [
    "__version__",
    "BackboneConfig",
    "BalancedCounterfactualSet",
    "ConfounderDictionary",
    "ConfounderImage",
    "ImbalanceProfile",
    "LongTailDataset",
    "MetricsReport",
    "PatchSequence",
    "PrototypeDictionary",
    "SimilarityGroups",
    "SpectralPair",
    "StrengthTable",
    "SyntheticSample",
    "Toggles",
    "TrainConfig",
    "TrainState",
    "ViTClassifier",
    "amplitude_mix",
    "assign_splits",
    "build_balanced_set",
    "build_confounder_dictionary",
    "build_imbalance_profile",
    "build_model",
    "build_prototype_dictionary",
    "confusion_analysis",
    "counterfactual_augment",
    "derive_mask_saliency",
    "evaluate",
    "extract_confounder",
    "fft_decompose",
    "fft_recompose",
    "generate_synthetic_dataset",
    "ingest_image_folder",
    "load_dataset",
    "loss_cls",
    "loss_finetune",
    "make_variant_dictionary",
    "patch_intervene",
    "save_dataset",
    "train_stage1",
    "train_stage2",
    "update_strength",
]
