"""Long-tailed dataset synthesis, imbalance profiles, splits, and folder ingestion.

The synthetic benchmark renders one parametric shape per class (the causal
feature) on top of one of K procedural background textures (the spurious
feature). A confound strength ``rho`` controls how often a training image of
class ``c`` receives texture family ``c % K``; the paired test split is always
balanced with uniformly random textures, so texture shortcuts do not
generalize. Every sample carries an exact foreground mask.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, IngestionError, ParameterError

MANIFEST_VERSION = 1

# (family, parameters) per class; cycles with shrinking scale when C > 10.
_BASE_SHAPES: list[tuple[str, dict]] = [
    ("polygon", {"sides": 3}),
    ("polygon", {"sides": 4}),
    ("polygon", {"sides": 5}),
    ("polygon", {"sides": 6}),
    ("star", {"points": 5}),
    ("star", {"points": 6}),
    ("disc", {"ring": False}),
    ("disc", {"ring": True}),
    ("cross", {"diagonal": False}),
    ("cross", {"diagonal": True}),
]


@dataclass(frozen=True)
class ImbalanceProfile:
    """Per-class training counts following an exponential decay profile."""

    class_count: int
    n_max: int
    ratio: float
    counts: tuple[int, ...]

    @classmethod
    def from_counts(cls, counts: list[int] | tuple[int, ...]) -> "ImbalanceProfile":
        counts = tuple(int(c) for c in counts)
        n_max = max(counts) if counts else 0
        n_min = min(counts) if counts else 0
        ratio = (n_min / n_max) if n_max > 0 else 1.0
        return cls(class_count=len(counts), n_max=n_max, ratio=ratio, counts=counts)


def build_imbalance_profile(class_count: int, n_max: int, ratio: float) -> ImbalanceProfile:
    """Exponential profile: counts[j] = round(n_max * ratio**(j/(C-1))), clamped >= 1."""
    if class_count < 2:
        raise ParameterError(f"class_count must be >= 2, got {class_count}")
    if n_max < 1:
        raise ParameterError(f"n_max must be >= 1, got {n_max}")
    if not (0.0 < ratio <= 1.0):
        raise ParameterError(f"ratio must be in (0, 1], got {ratio}")
    counts = tuple(
        max(1, round(n_max * ratio ** (j / (class_count - 1)))) for j in range(class_count)
    )
    return ImbalanceProfile(class_count=class_count, n_max=n_max, ratio=ratio, counts=counts)


@dataclass
class SyntheticSample:
    """One image with its label, exact foreground mask, and texture family id."""

    image: np.ndarray  # (H, W, Ch) float32 in [0, 1]
    label: int
    mask: np.ndarray | None = None  # (H, W) uint8, 1 = foreground
    background_id: int | None = None


@dataclass
class LongTailDataset:
    samples: list[SyntheticSample]
    test_samples: list[SyntheticSample]
    profile: ImbalanceProfile
    split_assignment: dict[int, str]
    seed: int
    class_families: tuple[str, ...]
    val_indices: tuple[int, ...]
    image_size: int
    channels: int
    texture_families: int
    confound_strength: float = 0.0

    @property
    def class_count(self) -> int:
        return self.profile.class_count

    def train_labels(self) -> np.ndarray:
        return np.asarray([s.label for s in self.samples], dtype=np.int64)

    def class_indices(self, label: int) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.label == label]


def shape_table(class_count: int) -> list[tuple[str, dict]]:
    """Shape spec per class; repeats shrink so every class stays distinct."""
    table = []
    for c in range(class_count):
        family, params = _BASE_SHAPES[c % len(_BASE_SHAPES)]
        cycle = c // len(_BASE_SHAPES)
        entry = dict(params)
        entry["scale"] = 0.8**cycle
        table.append((family, entry))
    return table


def _points_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd rule rasterization; handles non-convex outlines (stars, crosses)."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        if not crosses.any():
            continue
        xint = np.full(px.shape, np.inf)
        np.divide(
            (py - y1) * (x2 - x1),
            (y2 - y1),
            out=xint,
            where=crosses,
        )
        inside ^= crosses & (px < x1 + xint)
    return inside


def _polygon_vertices(sides: int, cx: float, cy: float, radius: float, rot: float) -> np.ndarray:
    angles = rot + 2.0 * np.pi * np.arange(sides) / sides
    return np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)


def _star_vertices(points: int, cx: float, cy: float, radius: float, rot: float) -> np.ndarray:
    angles = rot + np.pi * np.arange(2 * points) / points
    radii = np.where(np.arange(2 * points) % 2 == 0, radius, 0.45 * radius)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def _cross_vertices(cx: float, cy: float, radius: float, rot: float) -> np.ndarray:
    w = 0.32 * radius
    r = radius
    arms = np.array(
        [
            (w, w), (w, r), (-w, r), (-w, w), (-r, w), (-r, -w),
            (-w, -w), (-w, -r), (w, -r), (w, -w), (r, -w), (r, w),
        ]
    )
    c, s = np.cos(rot), np.sin(rot)
    rotmat = np.array([[c, -s], [s, c]])
    return arms @ rotmat.T + np.array([cx, cy])


def render_mask(family: str, params: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one jittered shape instance into a binary foreground mask."""
    scale = params.get("scale", 1.0)
    cx = size / 2.0 + rng.uniform(-size / 8.0, size / 8.0)
    cy = size / 2.0 + rng.uniform(-size / 8.0, size / 8.0)
    radius = rng.uniform(0.28, 0.40) * size * scale
    rot = rng.uniform(-np.pi / 12.0, np.pi / 12.0)

    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5

    if family == "polygon":
        verts = _polygon_vertices(params["sides"], cx, cy, radius, rot)
        mask = _points_in_polygon(px, py, verts)
    elif family == "star":
        verts = _star_vertices(params["points"], cx, cy, radius, rot)
        mask = _points_in_polygon(px, py, verts)
    elif family == "disc":
        dist = np.hypot(px - cx, py - cy)
        if params.get("ring", False):
            mask = (dist <= radius) & (dist >= 0.55 * radius)
        else:
            mask = dist <= radius
    elif family == "cross":
        extra = np.pi / 4.0 if params.get("diagonal", False) else 0.0
        verts = _cross_vertices(cx, cy, radius, rot + extra)
        mask = _points_in_polygon(px, py, verts)
    else:
        raise ParameterError(f"unknown shape family {family!r}")
    return mask.astype(np.uint8)


def _family_tint(family_id: int, family_count: int, channels: int) -> np.ndarray:
    if channels == 1:
        return np.ones(1, dtype=np.float64)
    hue = (family_id % family_count) / max(1, family_count)
    rgb = colorsys.hsv_to_rgb(hue, 0.7, 1.0)
    return np.asarray(rgb[:channels], dtype=np.float64)


def render_texture(
    family_id: int, size: int, channels: int, rng: np.random.Generator, family_count: int
) -> np.ndarray:
    """Procedural background texture for one family; per-sample parameter jitter."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = family_id % 10
    if kind == 0:
        f = rng.uniform(2.0, 5.0)
        pattern = 0.5 + 0.5 * np.sin(2.0 * np.pi * f * ys / size + rng.uniform(0, 2 * np.pi))
    elif kind == 1:
        f = rng.uniform(2.0, 5.0)
        pattern = 0.5 + 0.5 * np.sin(2.0 * np.pi * f * xs / size + rng.uniform(0, 2 * np.pi))
    elif kind == 2:
        f = rng.uniform(2.0, 6.0)
        pattern = 0.5 + 0.5 * np.sin(np.pi * f * (xs + ys) / size + rng.uniform(0, 2 * np.pi))
    elif kind == 3:
        cell = int(rng.integers(3, 7))
        pattern = ((xs // cell + ys // cell) % 2).astype(np.float64)
    elif kind == 4:
        fx = rng.uniform(3.0, 6.0)
        fy = rng.uniform(3.0, 6.0)
        wave = (0.5 + 0.5 * np.sin(2 * np.pi * fx * xs / size + rng.uniform(0, 2 * np.pi))) * (
            0.5 + 0.5 * np.sin(2 * np.pi * fy * ys / size + rng.uniform(0, 2 * np.pi))
        )
        pattern = (wave > 0.55).astype(np.float64)
    elif kind == 5:
        cx = rng.uniform(0, size)
        cy = rng.uniform(0, size)
        period = rng.uniform(3.0, 7.0)
        dist = np.hypot(xs - cx, ys - cy)
        pattern = 0.5 + 0.5 * np.sin(2.0 * np.pi * dist / period)
    elif kind == 6:
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xs + np.sin(theta) * ys
        pattern = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    elif kind == 7:
        pattern = np.zeros((size, size))
        for _ in range(3):
            f = rng.uniform(0.5, 2.0)
            theta = rng.uniform(0, 2 * np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            pattern += np.sin(
                2 * np.pi * f * (np.cos(theta) * xs + np.sin(theta) * ys) / size + phase
            )
        pattern = (pattern - pattern.min()) / max(np.ptp(pattern), 1e-9)
    elif kind == 8:
        pattern = rng.uniform(0.0, 1.0, size=(size, size))
    else:
        pattern = 0.5 + rng.uniform(-0.05, 0.05, size=(size, size))

    tint = _family_tint(family_id, family_count, channels)
    level = 0.12 + 0.42 * pattern
    return (level[..., None] * tint[None, None, :]).astype(np.float64)


def render_sample(
    family: str,
    params: dict,
    texture_id: int,
    size: int,
    channels: int,
    shape_rng: np.random.Generator,
    texture_rng: np.random.Generator,
    texture_family_count: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Compose foreground shape over background texture; returns (image, mask).

    The foreground pixels depend only on ``shape_rng`` and the background only
    on ``texture_rng``, so redrawing the background never perturbs the object.
    """
    mask = render_mask(family, params, size, shape_rng)
    fill = shape_rng.uniform(0.65, 1.0, size=channels)
    background = render_texture(texture_id, size, channels, texture_rng, texture_family_count)
    fg = np.broadcast_to(fill[None, None, :], background.shape)
    image = np.where(mask[..., None] > 0, fg, background)
    # Snap to the uint8 grid so on-disk round trips are lossless.
    image = np.round(image * 255.0) / 255.0
    return image.astype(np.float32), mask


def _stratified_val_indices(
    labels: np.ndarray, class_count: int, fraction: float, seed: int
) -> tuple[int, ...]:
    if fraction <= 0.0:
        return ()
    rng = np.random.default_rng([seed, 2])
    held = []
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        k = max(1, round(fraction * idx.size))
        k = min(k, idx.size)
        held.extend(rng.choice(idx, size=k, replace=False).tolist())
    return tuple(sorted(int(i) for i in held))


def generate_synthetic_dataset(
    profile: ImbalanceProfile,
    confound_strength: float,
    seed: int,
    image_size: int = 32,
    channels: int = 3,
    texture_families: int = 10,
    test_per_class: int = 100,
    val_fraction: float = 0.1,
) -> LongTailDataset:
    """Render the confounded long-tail benchmark.

    With probability ``confound_strength`` a training image of class ``c``
    takes texture family ``c % texture_families``; otherwise the family is
    uniform. The test split is balanced with uniform textures throughout.
    Per-sample RNG streams derive from (seed, split, index), so generation is
    order-independent and bit-reproducible.
    """
    if not (0.0 <= confound_strength <= 1.0):
        raise ParameterError(f"confound_strength must be in [0, 1], got {confound_strength}")
    if seed < 0:
        raise ParameterError("seed must be non-negative")
    if image_size < 8:
        raise ParameterError("image_size must be >= 8")
    if channels not in (1, 3):
        raise ParameterError("channels must be 1 or 3")

    shapes = shape_table(profile.class_count)
    families = tuple(family for family, _ in shapes)
    k = texture_families

    samples: list[SyntheticSample] = []
    idx = 0
    for c, n_c in enumerate(profile.counts):
        family, params = shapes[c]
        for _ in range(n_c):
            shape_rng = np.random.default_rng([seed, 0, idx, 0])
            tex_rng = np.random.default_rng([seed, 0, idx, 1])
            coin = tex_rng.uniform()
            if coin < confound_strength:
                bg_id = c % k
            else:
                bg_id = int(tex_rng.integers(0, k))
            image, mask = render_sample(
                family, params, bg_id, image_size, channels, shape_rng, tex_rng, k
            )
            samples.append(SyntheticSample(image=image, label=c, mask=mask, background_id=bg_id))
            idx += 1

    test_samples: list[SyntheticSample] = []
    idx = 0
    for c in range(profile.class_count):
        family, params = shapes[c]
        for _ in range(test_per_class):
            shape_rng = np.random.default_rng([seed, 1, idx, 0])
            tex_rng = np.random.default_rng([seed, 1, idx, 1])
            bg_id = int(tex_rng.integers(0, k))
            image, mask = render_sample(
                family, params, bg_id, image_size, channels, shape_rng, tex_rng, k
            )
            test_samples.append(
                SyntheticSample(image=image, label=c, mask=mask, background_id=bg_id)
            )
            idx += 1

    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    val_indices = _stratified_val_indices(labels, profile.class_count, val_fraction, seed)

    return LongTailDataset(
        samples=samples,
        test_samples=test_samples,
        profile=profile,
        split_assignment={},
        seed=seed,
        class_families=families,
        val_indices=val_indices,
        image_size=image_size,
        channels=channels,
        texture_families=k,
        confound_strength=confound_strength,
    )


def assign_splits(dataset: LongTailDataset, head_frac: float, tail_frac: float) -> LongTailDataset:
    """Partition classes into head/mid/tail by descending training count.

    Position ``p`` in the sorted order is head when ``p < head_frac * C`` and
    tail when ``p >= (1 - tail_frac) * C``; ties break by ascending class id.
    """
    if head_frac < 0 or tail_frac < 0 or head_frac + tail_frac > 1.0 + 1e-12:
        raise ParameterError(f"invalid split fractions head={head_frac} tail={tail_frac}")
    c_total = dataset.class_count
    counts = np.zeros(c_total, dtype=np.int64)
    for s in dataset.samples:
        counts[s.label] += 1
    order = sorted(range(c_total), key=lambda c: (-counts[c], c))

    def _snap(x: float) -> float:
        return float(round(x)) if abs(x - round(x)) < 1e-9 else x

    head_cut = _snap(head_frac * c_total)
    tail_cut = _snap((1.0 - tail_frac) * c_total)
    assignment: dict[int, str] = {}
    for pos, c in enumerate(order):
        if pos < head_cut:
            assignment[c] = "head"
        elif pos >= tail_cut:
            assignment[c] = "tail"
        else:
            assignment[c] = "mid"
    return replace(dataset, split_assignment=assignment)


# ---------------------------------------------------------------------------
# Persistence: manifest.json + raw uint8 blobs per split.
# ---------------------------------------------------------------------------


def _images_to_blob(samples: list[SyntheticSample]) -> bytes:
    if not samples:
        return b""
    stack = np.stack([np.round(s.image * 255.0).astype(np.uint8) for s in samples])
    return stack.tobytes()


def save_dataset(dataset: LongTailDataset, path: str | Path) -> Path:
    """Write manifest.json plus train.bin / test.bin / masks.bin blobs."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    has_masks = all(s.mask is not None for s in dataset.samples) and bool(dataset.samples)
    manifest = {
        "version": MANIFEST_VERSION,
        "class_count": dataset.class_count,
        "counts": list(dataset.profile.counts),
        "n_max": dataset.profile.n_max,
        "ratio": dataset.profile.ratio,
        "image_size": dataset.image_size,
        "channels": dataset.channels,
        "texture_families": dataset.texture_families,
        "confound_strength": dataset.confound_strength,
        "seed": dataset.seed,
        "split_assignment": {str(c): g for c, g in sorted(dataset.split_assignment.items())},
        "class_families": list(dataset.class_families),
        "val_indices": list(dataset.val_indices),
        "train_labels": [int(s.label) for s in dataset.samples],
        "train_background_ids": [
            -1 if s.background_id is None else int(s.background_id) for s in dataset.samples
        ],
        "test_labels": [int(s.label) for s in dataset.test_samples],
        "test_background_ids": [
            -1 if s.background_id is None else int(s.background_id)
            for s in dataset.test_samples
        ],
        "has_masks": has_masks,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "train.bin").write_bytes(_images_to_blob(dataset.samples))
    (out / "test.bin").write_bytes(_images_to_blob(dataset.test_samples))
    if has_masks:
        masks = np.stack([s.mask for s in dataset.samples]).astype(np.uint8)
        (out / "masks.bin").write_bytes(masks.tobytes())
    return out


def _blob_to_images(raw: bytes, n: int, size: int, channels: int) -> np.ndarray:
    expected = n * size * size * channels
    arr = np.frombuffer(raw, dtype=np.uint8)
    if arr.size != expected:
        raise DataError(f"blob holds {arr.size} bytes, expected {expected}")
    return (arr.reshape(n, size, size, channels).astype(np.float32)) / 255.0


def load_dataset(path: str | Path) -> LongTailDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())

    size = manifest["image_size"]
    channels = manifest["channels"]
    train_labels = manifest["train_labels"]
    test_labels = manifest["test_labels"]
    train_images = _blob_to_images(
        (root / "train.bin").read_bytes(), len(train_labels), size, channels
    )
    test_images = _blob_to_images(
        (root / "test.bin").read_bytes(), len(test_labels), size, channels
    )
    masks = None
    if manifest.get("has_masks"):
        raw = np.frombuffer((root / "masks.bin").read_bytes(), dtype=np.uint8)
        masks = raw.reshape(len(train_labels), size, size)

    train_bg = manifest["train_background_ids"]
    test_bg = manifest["test_background_ids"]
    samples = [
        SyntheticSample(
            image=train_images[i],
            label=int(train_labels[i]),
            mask=None if masks is None else masks[i],
            background_id=None if train_bg[i] < 0 else int(train_bg[i]),
        )
        for i in range(len(train_labels))
    ]
    test_samples = [
        SyntheticSample(
            image=test_images[i],
            label=int(test_labels[i]),
            mask=None,
            background_id=None if test_bg[i] < 0 else int(test_bg[i]),
        )
        for i in range(len(test_labels))
    ]
    profile = ImbalanceProfile(
        class_count=manifest["class_count"],
        n_max=manifest["n_max"],
        ratio=manifest["ratio"],
        counts=tuple(manifest["counts"]),
    )
    return LongTailDataset(
        samples=samples,
        test_samples=test_samples,
        profile=profile,
        split_assignment={int(c): g for c, g in manifest["split_assignment"].items()},
        seed=manifest["seed"],
        class_families=tuple(manifest["class_families"]),
        val_indices=tuple(manifest["val_indices"]),
        image_size=size,
        channels=channels,
        texture_families=manifest["texture_families"],
        confound_strength=manifest.get("confound_strength", 0.0),
    )


# ---------------------------------------------------------------------------
# External image-folder ingestion.
# ---------------------------------------------------------------------------

INGEST_MANIFEST_KEYS = ("class_count", "image_size", "channels", "entries")


def ingest_image_folder(path: str | Path, manifest: dict | str | Path | None = None) -> LongTailDataset:
    """Load labeled images listed in an ingest manifest; masks stay absent.

    The manifest (dict, or JSON file defaulting to ``<path>/manifest.json``)
    must provide class_count, image_size, channels, and an ``entries`` list of
    ``{"file": relpath, "label": int}`` records.
    """
    from PIL import Image

    root = Path(path)
    if manifest is None:
        manifest = root / "manifest.json"
    if isinstance(manifest, (str, Path)):
        mpath = Path(manifest)
        if not mpath.exists():
            raise IngestionError(f"manifest not found: {mpath}")
        manifest = json.loads(mpath.read_text())
    for key in INGEST_MANIFEST_KEYS:
        if key not in manifest:
            raise IngestionError(f"ingest manifest missing key {key!r}")

    class_count = int(manifest["class_count"])
    size = int(manifest["image_size"])
    channels = int(manifest["channels"])
    if channels not in (1, 3):
        raise IngestionError(f"channels must be 1 or 3, got {channels}")

    samples: list[SyntheticSample] = []
    for entry in manifest["entries"]:
        fname = entry.get("file")
        label = entry.get("label")
        if fname is None or label is None:
            raise IngestionError(f"entry missing file/label: {entry!r}")
        if not (0 <= int(label) < class_count):
            raise IngestionError(f"label {label} outside [0, {class_count}) for {fname!r}")
        fpath = root / fname
        if not fpath.exists():
            raise IngestionError(f"missing image file: {fname!r}")
        with Image.open(fpath) as img:
            img = img.convert("RGB" if channels == 3 else "L")
            if img.size != (size, size):
                raise IngestionError(
                    f"image {fname!r} has size {img.size}, expected {(size, size)}"
                )
            arr = np.asarray(img, dtype=np.float32) / 255.0
        if channels == 1:
            arr = arr[..., None]
        samples.append(SyntheticSample(image=arr, label=int(label)))

    counts = [0] * class_count
    for s in samples:
        counts[s.label] += 1
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    seed = int(manifest.get("seed", 0))
    val_indices = _stratified_val_indices(labels, class_count, 0.1, seed)
    return LongTailDataset(
        samples=samples,
        test_samples=[],
        profile=ImbalanceProfile.from_counts(counts),
        split_assignment={},
        seed=seed,
        class_families=(),
        val_indices=val_indices,
        image_size=size,
        channels=channels,
        texture_families=0,
    )


def images_as_array(samples: list[SyntheticSample]) -> np.ndarray:
    """Stack sample images into one (N, H, W, Ch) float32 array."""
    if not samples:
        raise DataError("no samples to stack")
    return np.stack([s.image for s in samples]).astype(np.float32)
