"""Experiment configuration: JSON file format, schema validation, hashing.

A config file is a JSON document with the sections below; omitted keys take
defaults, unknown keys are rejected. Hashes are computed over the canonical
(defaults-merged, key-sorted, whitespace-free) form, so formatting never
changes a hash and every semantically meaningful field does.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .errors import ConfigurationError
from .model import BackboneConfig
from .train import Toggles, TrainConfig

DEFAULT_CONFIG: dict = {
    "dataset": {
        "classes": 10,
        "n_max": 200,
        "ratio": 0.1,
        "rho": 0.9,
        "seed": 0,
        "image_size": 32,
        "channels": 3,
        "texture_families": 10,
        "test_per_class": 100,
        "head_frac": 0.3,
        "tail_frac": 0.3,
        "val_fraction": 0.1,
    },
    "model": {
        "patch_size": 4,
        "embed_dim": 64,
        "depth": 4,
        "heads": 4,
        "mlp_ratio": 2.0,
        "dropout": 0.0,
    },
    "intervention": {
        "masker": "oracle",
        "l": 8,
        "m": None,  # None -> num_patches // 4
        "selection_fraction": 1.0,
        "saliency_quantile": 0.8,
        "seed": 0,
    },
    "calibration": {
        "gamma": 0.6,
        "l_init": 0.0,
        "step": 0.1,
        "alpha_gf": 1.0,
        "target_per_class": None,  # None -> profile n_max
    },
    "train": {
        "stage1_epochs": 40,
        "stage2_epochs": 15,
        "batch_size": 64,
        "lr": 0.01,
        "lr_schedule": "cosine",
        "momentum": 0.9,
        "seed": 0,
        "stage2_lr_scale": 0.1,
        "toggles": {
            "patch_intervention": True,
            "feature_intervention": True,
            "counterfactual": True,
            "refinement": True,
        },
    },
    "eval": {
        "groups": "families",
        "export_diagnostics": False,
    },
    "output_dir": "runs/experiment",
}


def _obj(properties: dict, required: list[str] | None = None) -> dict:
    return {
        "type": "object",
        "properties": properties,
        "additionalProperties": False,
        **({"required": required} if required else {}),
    }


SCHEMA: dict = _obj(
    {
        "dataset": _obj(
            {
                "classes": {"type": "integer", "minimum": 2},
                "n_max": {"type": "integer", "minimum": 1},
                "ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "rho": {"type": "number", "minimum": 0, "maximum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "image_size": {"type": "integer", "minimum": 8},
                "channels": {"type": "integer", "enum": [1, 3]},
                "texture_families": {"type": "integer", "minimum": 1},
                "test_per_class": {"type": "integer", "minimum": 1},
                "head_frac": {"type": "number", "minimum": 0, "maximum": 1},
                "tail_frac": {"type": "number", "minimum": 0, "maximum": 1},
                "val_fraction": {"type": "number", "minimum": 0, "maximum": 0.5},
            }
        ),
        "model": _obj(
            {
                "patch_size": {"type": "integer", "minimum": 1},
                "embed_dim": {"type": "integer", "minimum": 4},
                "depth": {"type": "integer", "minimum": 0},
                "heads": {"type": "integer", "minimum": 1},
                "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
                "dropout": {"type": "number", "minimum": 0, "maximum": 1},
            }
        ),
        "intervention": _obj(
            {
                "masker": {"type": "string", "enum": ["oracle", "saliency"]},
                "l": {"type": "integer", "minimum": 1},
                "m": {"type": ["integer", "null"], "minimum": 0},
                "selection_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "saliency_quantile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer", "minimum": 0},
            }
        ),
        "calibration": _obj(
            {
                "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "l_init": {"type": "number", "minimum": 0, "maximum": 1},
                "step": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "alpha_gf": {"type": "number", "minimum": 0},
                "target_per_class": {"type": ["integer", "null"], "minimum": 1},
            }
        ),
        "train": _obj(
            {
                "stage1_epochs": {"type": "integer", "minimum": 1},
                "stage2_epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "lr_schedule": {"type": "string", "enum": ["cosine", "step"]},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "stage2_lr_scale": {"type": "number", "exclusiveMinimum": 0},
                "toggles": _obj(
                    {
                        "patch_intervention": {"type": "boolean"},
                        "feature_intervention": {"type": "boolean"},
                        "counterfactual": {"type": "boolean"},
                        "refinement": {"type": "boolean"},
                    }
                ),
            }
        ),
        "eval": _obj(
            {
                "groups": {
                    "oneOf": [
                        {"type": "string", "enum": ["families"]},
                        {
                            "type": "object",
                            "patternProperties": {r"^\d+$": {"type": "integer"}},
                            "additionalProperties": False,
                        },
                    ]
                },
                "export_diagnostics": {"type": "boolean"},
            }
        ),
        "output_dir": {"type": "string"},
    }
)


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free serialization used for all hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def short_hash(obj, length: int = 12) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ExperimentConfig:
    """Validated, defaults-merged experiment configuration."""

    def __init__(self, raw: dict | None = None):
        raw = raw or {}
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigurationError(f"invalid config: {exc.message}") from exc
        self.data = _deep_merge(DEFAULT_CONFIG, raw)
        if self.data["dataset"]["head_frac"] + self.data["dataset"]["tail_frac"] > 1.0:
            raise ConfigurationError("head_frac + tail_frac must not exceed 1")
        toggles = self.data["train"]["toggles"]
        if toggles["refinement"] and not toggles["counterfactual"]:
            raise ConfigurationError("refinement requires the counterfactual toggle")

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        return cls(raw)

    @classmethod
    def from_any(cls, source) -> "ExperimentConfig":
        if isinstance(source, ExperimentConfig):
            return source
        if isinstance(source, (str, Path)):
            return cls.from_file(source)
        return cls(source)

    def __getitem__(self, key: str):
        return self.data[key]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    @property
    def hash(self) -> str:
        return short_hash(self.data, length=16)

    # Typed views -----------------------------------------------------------

    def backbone_config(self) -> BackboneConfig:
        ds, md = self.data["dataset"], self.data["model"]
        return BackboneConfig(
            image_size=ds["image_size"],
            patch_size=md["patch_size"],
            embed_dim=md["embed_dim"],
            depth=md["depth"],
            heads=md["heads"],
            mlp_ratio=md["mlp_ratio"],
            class_count=ds["classes"],
            dropout=md["dropout"],
            channels=ds["channels"],
        )

    def toggles(self) -> Toggles:
        return Toggles(**self.data["train"]["toggles"])

    def stage1_train_config(self, epochs: int | None = None) -> TrainConfig:
        tr, cal = self.data["train"], self.data["calibration"]
        return TrainConfig(
            stage=1,
            epochs=epochs if epochs is not None else tr["stage1_epochs"],
            batch_size=tr["batch_size"],
            lr=tr["lr"],
            lr_schedule=tr["lr_schedule"],
            momentum=tr["momentum"],
            alpha_gf=cal["alpha_gf"],
            gamma=cal["gamma"],
            seed=tr["seed"],
            toggles=self.toggles(),
            intervention_tokens=self.data["intervention"]["m"],
            strength_init=cal["l_init"],
            strength_step=cal["step"],
            target_per_class=cal["target_per_class"],
        )

    def stage2_train_config(self) -> TrainConfig:
        tr, cal = self.data["train"], self.data["calibration"]
        return TrainConfig(
            stage=2,
            epochs=tr["stage2_epochs"],
            batch_size=tr["batch_size"],
            lr=tr["lr"] * tr["stage2_lr_scale"],
            lr_schedule=tr["lr_schedule"],
            momentum=tr["momentum"],
            alpha_gf=cal["alpha_gf"],
            gamma=cal["gamma"],
            seed=tr["seed"],
            toggles=self.toggles(),
            intervention_tokens=self.data["intervention"]["m"],
            strength_init=cal["l_init"],
            strength_step=cal["step"],
            target_per_class=cal["target_per_class"],
        )
