"""Class-agnostic background dictionary and its clustered prototype form.

Background-only images come from zeroing each sample's foreground (exact mask
when the generator provides one, input-gradient saliency otherwise). Their
backbone features are clustered with k-means++ into a small prototype matrix
that the deconfounded head marginalizes over.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import LongTailDataset, SyntheticSample
from .errors import EmptyDictionaryError, ParameterError, UnsupportedModelError
from .kmeans import kmeans
from .model import ViTClassifier


@dataclass
class ConfounderImage:
    pixels: np.ndarray  # (H, W, Ch), foreground zeroed
    source_sample_id: int


@dataclass
class ConfounderDictionary:
    entries: list[ConfounderImage]

    @property
    def size(self) -> int:
        return len(self.entries)

    def images(self) -> np.ndarray:
        return np.stack([e.pixels for e in self.entries]).astype(np.float32)


@dataclass
class PrototypeDictionary:
    prototypes: np.ndarray  # (l, d) float32
    cluster_assignment: dict[int, int]
    l: int
    d: int
    backbone_fingerprint: str = ""
    seed: int = 0


def extract_confounder(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the foreground: image * (1 - mask), mask broadcast over channels."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2]:
        raise ParameterError(
            f"mask shape {mask.shape} does not match image spatial dims {image.shape[:2]}"
        )
    if not np.isin(mask, (0, 1)).all():
        raise ParameterError("mask must be binary")
    keep = (1 - mask).astype(image.dtype)
    return image * keep[..., None]


def derive_mask_saliency(model: ViTClassifier, image: np.ndarray, threshold_q: float) -> np.ndarray:
    """Foreground = pixels whose input-gradient magnitude clears the q-quantile.

    Saliency is the L2 norm over channels of d(score)/d(pixel) for the
    predicted class. Models that cannot supply input gradients raise
    ``UnsupportedModelError``.
    """
    if not (0.0 < threshold_q < 1.0):
        raise ParameterError(f"threshold_q must be in (0, 1), got {threshold_q}")
    try:
        x = torch.as_tensor(np.asarray(image), dtype=torch.float32).unsqueeze(0)
        x.requires_grad_(True)
        was_training = model.training
        model.eval()
        try:
            logits = model(x)
        finally:
            if was_training:
                model.train()
        score = logits[0, int(logits.argmax())]
        (grad,) = torch.autograd.grad(score, x, allow_unused=True)
    except (RuntimeError, TypeError, AttributeError) as exc:
        raise UnsupportedModelError(f"model cannot provide input gradients: {exc}") from exc
    if grad is None:
        saliency = np.zeros(image.shape[:2], dtype=np.float64)
    else:
        saliency = np.linalg.norm(grad[0].detach().numpy(), axis=-1)
    cut = np.quantile(saliency, threshold_q)
    return (saliency > cut).astype(np.uint8)


def oracle_masker():
    """Masker using the generator's exact per-sample foreground masks."""

    def _mask(sample: SyntheticSample) -> np.ndarray | None:
        return sample.mask

    return _mask


def saliency_masker(model: ViTClassifier, threshold_q: float = 0.8):
    """Masker falling back to input-gradient saliency for unmasked samples."""

    def _mask(sample: SyntheticSample) -> np.ndarray | None:
        return derive_mask_saliency(model, sample.image, threshold_q)

    return _mask


def build_confounder_dictionary(
    dataset: LongTailDataset,
    masker,
    fraction: float = 1.0,
    seed: int = 0,
) -> ConfounderDictionary:
    """One background-only entry per selected training sample (no dedup)."""
    if not dataset.samples:
        raise EmptyDictionaryError("dataset has no training samples")
    if not (0.0 < fraction <= 1.0):
        raise ParameterError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset.samples)
    rng = np.random.default_rng(seed)
    take = max(1, round(fraction * n))
    chosen = sorted(rng.choice(n, size=take, replace=False).tolist())

    entries: list[ConfounderImage] = []
    for i in chosen:
        mask = masker(dataset.samples[i])
        if mask is None:
            continue
        pixels = extract_confounder(dataset.samples[i].image, mask)
        entries.append(ConfounderImage(pixels=pixels.astype(np.float32), source_sample_id=i))
    if not entries:
        raise EmptyDictionaryError("no usable masks; cannot build confounder dictionary")
    return ConfounderDictionary(entries=entries)


@torch.no_grad()
def confounder_features(
    dictionary: ConfounderDictionary, backbone: ViTClassifier, batch_size: int = 256
) -> np.ndarray:
    """Pre-classifier embedding of every entry via the clean forward path."""
    feats = []
    images = dictionary.images()
    was_training = backbone.training
    backbone.eval()
    try:
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            feats.append(backbone.forward_features(chunk).cpu().numpy())
    finally:
        if was_training:
            backbone.train()
    return np.concatenate(feats, axis=0)


def build_prototype_dictionary(
    confounders: ConfounderDictionary,
    backbone: ViTClassifier,
    l: int,
    max_iters: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
    fingerprint: str = "",
) -> PrototypeDictionary:
    """Cluster confounder features into l prototypes (k-means++ then Lloyd)."""
    if l > confounders.size:
        raise ParameterError(f"l={l} exceeds dictionary size {confounders.size}")
    feats = confounder_features(confounders, backbone)
    result = kmeans(feats, l, max_iters=max_iters, tol=tol, seed=seed)
    return PrototypeDictionary(
        prototypes=result.centers.astype(np.float32),
        cluster_assignment={i: int(result.labels[i]) for i in range(len(result.labels))},
        l=l,
        d=feats.shape[1],
        backbone_fingerprint=fingerprint,
        seed=seed,
    )


VARIANT_KINDS = ("random", "zero", "average", "confounder")


def make_variant_dictionary(
    kind: str,
    reference: PrototypeDictionary,
    full_image_features: np.ndarray | None = None,
    seed: int = 0,
) -> PrototypeDictionary:
    """Control dictionaries for the feature-level intervention study.

    random: i.i.d. normal rows rescaled to the reference's mean row norm;
    zero: all-zero rows; average: every row is the mean full-image feature;
    confounder: the reference itself.
    """
    if kind not in VARIANT_KINDS:
        raise ParameterError(f"unknown dictionary kind {kind!r}; choose from {VARIANT_KINDS}")
    if kind == "confounder":
        return reference
    shape = reference.prototypes.shape
    if kind == "zero":
        protos = np.zeros(shape, dtype=np.float32)
    elif kind == "random":
        rng = np.random.default_rng(seed)
        rows = rng.standard_normal(shape)
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        target = float(np.linalg.norm(reference.prototypes, axis=1).mean())
        protos = (rows / np.maximum(norms, 1e-12) * target).astype(np.float32)
    else:  # average
        if full_image_features is None:
            raise ParameterError("kind='average' requires full_image_features")
        mean = np.asarray(full_image_features).mean(axis=0)
        protos = np.tile(mean[None, :], (shape[0], 1)).astype(np.float32)
    return PrototypeDictionary(
        prototypes=protos,
        cluster_assignment={},
        l=shape[0],
        d=shape[1],
        backbone_fingerprint=reference.backbone_fingerprint,
        seed=seed,
    )


def save_prototypes(proto: PrototypeDictionary, path: str | Path) -> Path:
    """Raw little-endian float32 matrix blob plus a JSON sidecar."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prototypes.bin").write_bytes(
        np.ascontiguousarray(proto.prototypes, dtype="<f4").tobytes()
    )
    sidecar = {
        "l": proto.l,
        "d": proto.d,
        "backbone_fingerprint": proto.backbone_fingerprint,
        "seed": proto.seed,
        "cluster_assignment": {str(k): v for k, v in sorted(proto.cluster_assignment.items())},
    }
    (out / "prototypes.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return out


def load_prototypes(path: str | Path) -> PrototypeDictionary:
    root = Path(path)
    sidecar = json.loads((root / "prototypes.json").read_text())
    raw = np.frombuffer((root / "prototypes.bin").read_bytes(), dtype="<f4")
    protos = raw.reshape(sidecar["l"], sidecar["d"]).copy()
    return PrototypeDictionary(
        prototypes=protos,
        cluster_assignment={int(k): v for k, v in sidecar["cluster_assignment"].items()},
        l=sidecar["l"],
        d=sidecar["d"],
        backbone_fingerprint=sidecar["backbone_fingerprint"],
        seed=sidecar["seed"],
    )


def save_confounders(dictionary: ConfounderDictionary, path: str | Path) -> Path:
    """uint8 image blob plus a JSON sidecar with source ids and shape."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    images = dictionary.images()
    blob = np.round(images * 255.0).astype(np.uint8)
    (out / "confounders.bin").write_bytes(blob.tobytes())
    sidecar = {
        "count": dictionary.size,
        "shape": list(images.shape[1:]),
        "source_sample_ids": [e.source_sample_id for e in dictionary.entries],
    }
    (out / "confounders.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return out


def load_confounders(path: str | Path) -> ConfounderDictionary:
    root = Path(path)
    sidecar = json.loads((root / "confounders.json").read_text())
    shape = tuple(sidecar["shape"])
    raw = np.frombuffer((root / "confounders.bin").read_bytes(), dtype=np.uint8)
    images = raw.reshape(sidecar["count"], *shape).astype(np.float32) / 255.0
    return ConfounderDictionary(
        entries=[
            ConfounderImage(pixels=images[i], source_sample_id=sid)
            for i, sid in enumerate(sidecar["source_sample_ids"])
        ]
    )
