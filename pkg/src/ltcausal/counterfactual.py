"""Fourier-domain counterfactual augmentation and per-class strength control.

An augmented image keeps the source image's phase spectrum (its structure)
while pulling the amplitude spectrum (its style/texture statistics) toward a
randomly drawn partner. The mixing coefficient is bounded per class by an
adaptive strength that ramps up 0.1 per epoch while the class stays accurate
and backs off otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import LongTailDataset
from .errors import DataError, ParameterError


@dataclass
class SpectralPair:
    """Unnormalized per-channel 2-D DFT split into magnitude and angle."""

    amplitude: np.ndarray  # (H, W, Ch) non-negative
    phase: np.ndarray  # (H, W, Ch) in (-pi, pi]


def fft_decompose(image: np.ndarray) -> SpectralPair:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    spectrum = np.fft.fft2(image, axes=(0, 1))
    return SpectralPair(amplitude=np.abs(spectrum), phase=np.angle(spectrum))


def fft_recompose(pair: SpectralPair) -> np.ndarray:
    """Inverse transform of amplitude * exp(i*phase); imaginary residue dropped."""
    spectrum = pair.amplitude * np.exp(1j * pair.phase)
    return np.real(np.fft.ifft2(spectrum, axes=(0, 1)))


def amplitude_mix(amp_a: np.ndarray, amp_b: np.ndarray, lam: float) -> np.ndarray:
    """Elementwise (1 - lam) * amp_a + lam * amp_b."""
    if amp_a.shape != amp_b.shape:
        raise ParameterError(f"amplitude shapes differ: {amp_a.shape} vs {amp_b.shape}")
    if not (0.0 <= lam <= 1.0):
        raise ParameterError(f"lam must be in [0, 1], got {lam}")
    return (1.0 - lam) * amp_a + lam * amp_b


def counterfactual_augment(
    image: np.ndarray,
    partner: np.ndarray,
    strength: float,
    rng: np.random.Generator,
    clip: bool = True,
) -> np.ndarray:
    """Mix amplitudes with a partner at lambda ~ U(0, strength); keep own phase.

    The result is the real part of the inverse transform, clipped back to
    [0, 1] unless ``clip`` is disabled (pixel range can overshoot after
    amplitude surgery).
    """
    if image.shape != partner.shape:
        raise ParameterError(f"image shapes differ: {image.shape} vs {partner.shape}")
    if not (0.0 <= strength <= 1.0):
        raise ParameterError(f"strength must be in [0, 1], got {strength}")
    lam = float(rng.uniform(0.0, strength))
    if lam == 0.0:
        return np.array(image, dtype=np.float32, copy=True)
    own = fft_decompose(image)
    other = fft_decompose(partner)
    mixed = amplitude_mix(own.amplitude, other.amplitude, lam)
    out = fft_recompose(SpectralPair(amplitude=mixed, phase=own.phase))
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


@dataclass
class StrengthTable:
    """Per-class augmentation strength bounds, updated once per epoch."""

    levels: dict[int, float]
    epoch: int = 0
    gamma: float = 0.6
    step: float = 0.1

    @classmethod
    def initial(
        cls, class_count: int, value: float = 0.0, gamma: float = 0.6, step: float = 0.1
    ) -> "StrengthTable":
        if not (0.0 <= value <= 1.0):
            raise ParameterError(f"initial strength must be in [0, 1], got {value}")
        if not (0.0 < gamma < 1.0):
            raise ParameterError(f"gamma must be in (0, 1), got {gamma}")
        return cls(levels={c: value for c in range(class_count)}, gamma=gamma, step=step)


def update_strength(
    table: StrengthTable, per_class_acc: dict[int, float], gamma: float | None = None
) -> StrengthTable:
    """Raise each class's bound by one step when its accuracy clears the
    threshold, lower it otherwise; clamp to [0, 1] and advance the epoch."""
    thr = table.gamma if gamma is None else gamma
    new_levels: dict[int, float] = {}
    for c, level in table.levels.items():
        if c not in per_class_acc:
            raise ParameterError(f"per_class_acc missing class {c}")
        acc = per_class_acc[c]
        moved = level + table.step if acc >= thr else level - table.step
        new_levels[c] = min(1.0, max(0.0, moved))
    return replace(table, levels=new_levels, epoch=table.epoch + 1)


@dataclass
class BalancedSample:
    image: np.ndarray
    label: int
    is_augmented: bool
    source_id: int  # index of the content source in the training pool
    partner_id: int | None = None  # amplitude donor, None for originals


@dataclass
class BalancedCounterfactualSet:
    samples: list[BalancedSample]
    target_per_class: int

    def label_histogram(self, class_count: int) -> np.ndarray:
        hist = np.zeros(class_count, dtype=np.int64)
        for s in self.samples:
            hist[s.label] += 1
        return hist


def build_balanced_set(
    dataset: LongTailDataset,
    table: StrengthTable,
    target_per_class: int,
    rng: np.random.Generator,
    exclude_indices: tuple[int, ...] | list[int] = (),
    allow_subsample: bool = False,
) -> BalancedCounterfactualSet:
    """Pad every class to the target count with counterfactual variants.

    Originals are always included (subsampled only when explicitly allowed);
    padding resamples class members uniformly and mixes each with an amplitude
    partner drawn uniformly from the whole pool. Augmented samples keep the
    label of their content source.
    """
    excluded = set(exclude_indices)
    pool = [i for i in range(len(dataset.samples)) if i not in excluded]
    if not pool:
        raise DataError("training pool is empty")
    by_class: dict[int, list[int]] = {c: [] for c in range(dataset.class_count)}
    for i in pool:
        by_class[dataset.samples[i].label].append(i)

    max_count = max(len(v) for v in by_class.values())
    if target_per_class < max_count and not allow_subsample:
        raise ParameterError(
            f"target_per_class {target_per_class} below largest class {max_count}; "
            "pass allow_subsample=True to shrink head classes"
        )

    out: list[BalancedSample] = []
    for c in range(dataset.class_count):
        members = by_class[c]
        if not members:
            raise DataError(f"class {c} has no training samples")
        keep = members
        if len(members) > target_per_class:
            keep = sorted(rng.choice(members, size=target_per_class, replace=False).tolist())
        for i in keep:
            out.append(
                BalancedSample(
                    image=dataset.samples[i].image,
                    label=c,
                    is_augmented=False,
                    source_id=i,
                )
            )
        strength = table.levels.get(c, 0.0)
        for _ in range(target_per_class - len(keep)):
            src = int(rng.choice(members))
            partner = int(rng.choice(pool))
            image = counterfactual_augment(
                dataset.samples[src].image, dataset.samples[partner].image, strength, rng
            )
            out.append(
                BalancedSample(
                    image=image,
                    label=c,
                    is_augmented=True,
                    source_id=src,
                    partner_id=partner,
                )
            )
    return BalancedCounterfactualSet(samples=out, target_per_class=target_per_class)
