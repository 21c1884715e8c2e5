"""Config-driven experiment pipeline with content-hash stage caching.

Stages run in order: dataset -> confounders -> stage1 -> stage2 -> eval.
Each stage's output directory is keyed by a hash of its inputs (config slice
plus upstream artifact hashes), so reruns with unchanged inputs are cache
hits. Every run writes an immutable manifest listing all artifacts with
content hashes; reruns create sibling manifests.

Arms without the counterfactual stage fold the stage-2 epoch budget into
stage 1, keeping every toggle combination at the same total epoch budget.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

try:  # installed package metadata; fall back when running from a checkout
    from importlib.metadata import version as _pkg_version

    CODE_VERSION = _pkg_version("ltcausal")
except Exception:  # pragma: no cover
    CODE_VERSION = "0.1.0"

from .config import ExperimentConfig, short_hash
from .confounder import (
    build_confounder_dictionary,
    build_prototype_dictionary,
    load_confounders,
    load_prototypes,
    oracle_masker,
    saliency_masker,
    save_confounders,
    save_prototypes,
)
from .data import (
    assign_splits,
    build_imbalance_profile,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
)
from .errors import ConfigurationError, LtCausalError
from .evaluate import MetricsReport, SimilarityGroups, evaluate, export_diagnostics
from .model import backbone_fingerprint, build_model
from .train import load_checkpoint, model_from_state, save_checkpoint, train_stage1, train_stage2

STAGE_ORDER = ("dataset", "confounders", "stage1", "stage2", "eval")
_MARKER = ".complete.json"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(path: str | Path) -> str:
    """Stable content hash of a directory: sorted relative paths + file hashes."""
    root = Path(path)
    if root.is_file():
        return sha256_file(root)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file() and p.name != _MARKER):
        h.update(str(f.relative_to(root)).encode())
        h.update(sha256_file(f).encode())
    return h.hexdigest()


def _stage_dir(out_root: Path, name: str, input_hash: str) -> Path:
    return out_root / "stages" / f"{name}-{input_hash}"


def _is_complete(stage_dir: Path, input_hash: str) -> bool:
    marker = stage_dir / _MARKER
    if not marker.exists():
        return False
    try:
        return json.loads(marker.read_text()).get("input_hash") == input_hash
    except json.JSONDecodeError:
        return False


def _mark_complete(stage_dir: Path, input_hash: str) -> None:
    (stage_dir / _MARKER).write_text(json.dumps({"input_hash": input_hash}))


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


@dataclass
class RunManifest:
    path: Path
    data: dict

    def artifact_path(self, name: str) -> Path:
        return Path(self.data["artifacts"][name]["path"])


def _utcnow() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def run_experiment(config, force: bool = False, until: str = "eval") -> RunManifest:
    """Execute the pipeline for one config; returns the run manifest.

    ``until`` truncates the pipeline after the named stage. Stage failures
    abort with the stage name while completed artifacts stay on disk for
    inspection and reuse.
    """
    if until not in STAGE_ORDER:
        raise ConfigurationError(f"unknown stage {until!r}; choose from {STAGE_ORDER}")
    cfg = ExperimentConfig.from_any(config)
    out_root = Path(cfg["output_dir"])
    out_root.mkdir(parents=True, exist_ok=True)
    started = _utcnow()
    artifacts: dict[str, dict] = {}
    toggles = cfg.toggles()
    cached_stages: list[str] = []

    def _run_stage(name: str, input_hash: str, builder) -> Path:
        stage_dir = _stage_dir(out_root, name, input_hash)
        if not force and _is_complete(stage_dir, input_hash):
            cached_stages.append(name)
        else:
            _fresh_dir(stage_dir)
            try:
                builder(stage_dir)
            except LtCausalError:
                raise
            except Exception as exc:
                raise LtCausalError(f"stage {name!r} failed: {exc}") from exc
            _mark_complete(stage_dir, input_hash)
        artifacts[name] = {"path": str(stage_dir), "sha256": hash_tree(stage_dir)}
        return stage_dir

    # dataset ---------------------------------------------------------------
    ds_cfg = cfg["dataset"]
    ds_hash = short_hash({"dataset": ds_cfg})

    def _build_dataset(stage_dir: Path) -> None:
        profile = build_imbalance_profile(ds_cfg["classes"], ds_cfg["n_max"], ds_cfg["ratio"])
        dataset = generate_synthetic_dataset(
            profile,
            confound_strength=ds_cfg["rho"],
            seed=ds_cfg["seed"],
            image_size=ds_cfg["image_size"],
            channels=ds_cfg["channels"],
            texture_families=ds_cfg["texture_families"],
            test_per_class=ds_cfg["test_per_class"],
            val_fraction=ds_cfg["val_fraction"],
        )
        dataset = assign_splits(dataset, ds_cfg["head_frac"], ds_cfg["tail_frac"])
        save_dataset(dataset, stage_dir)

    def _finalize() -> RunManifest:
        run_id = (
            _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S.%f")
            + f"-{cfg.hash[:8]}"
        )
        manifest_data = {
            "config": cfg.to_dict(),
            "config_hash": cfg.hash,
            "code_version": CODE_VERSION,
            "stage_order": [s for s in STAGE_ORDER if s in artifacts],
            "artifacts": artifacts,
            "run": {
                "id": run_id,
                "started": started,
                "finished": _utcnow(),
                "cached_stages": cached_stages,
            },
        }
        run_dir = out_root / "runs" / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = run_dir / "manifest.json"
        manifest_path.write_text(json.dumps(manifest_data, indent=2, sort_keys=True))
        return RunManifest(path=manifest_path, data=manifest_data)

    ds_dir = _run_stage("dataset", ds_hash, _build_dataset)
    if until == "dataset":
        return _finalize()
    dataset = load_dataset(ds_dir)

    backbone = cfg.backbone_config()
    train_seed = cfg["train"]["seed"]
    fingerprint = backbone_fingerprint(backbone, train_seed)

    # confounders -------------------------------------------------------------
    conf_dir = None
    need_confounders = toggles.patch_intervention or toggles.feature_intervention
    if need_confounders:
        iv_cfg = cfg["intervention"]
        conf_hash = short_hash(
            {
                "intervention": iv_cfg,
                "model": cfg["model"],
                "train_seed": train_seed,
                "dataset": artifacts["dataset"]["sha256"],
            }
        )

        def _build_confounders(stage_dir: Path) -> None:
            feature_model = build_model(backbone, seed=train_seed)
            if iv_cfg["masker"] == "oracle":
                masker = oracle_masker()
            else:
                masker = saliency_masker(feature_model, iv_cfg["saliency_quantile"])
            dictionary = build_confounder_dictionary(
                dataset,
                masker,
                fraction=iv_cfg["selection_fraction"],
                seed=iv_cfg["seed"],
            )
            save_confounders(dictionary, stage_dir)
            prototypes = build_prototype_dictionary(
                dictionary,
                feature_model,
                l=iv_cfg["l"],
                seed=iv_cfg["seed"],
                fingerprint=fingerprint,
            )
            save_prototypes(prototypes, stage_dir)

        conf_dir = _run_stage("confounders", conf_hash, _build_confounders)
    if until == "confounders":
        return _finalize()

    # stage 1 -----------------------------------------------------------------
    stage1_epochs = cfg["train"]["stage1_epochs"]
    if not toggles.counterfactual:  # equal total budget across toggle arms
        stage1_epochs += cfg["train"]["stage2_epochs"]
    s1_inputs = {
        "model": cfg["model"],
        "train": cfg["train"],
        "intervention_m": cfg["intervention"]["m"],
        "epochs": stage1_epochs,
        "dataset": artifacts["dataset"]["sha256"],
        "confounders": artifacts.get("confounders", {}).get("sha256"),
    }
    s1_hash = short_hash(s1_inputs)

    def _build_stage1(stage_dir: Path) -> None:
        confounders = load_confounders(conf_dir) if need_confounders else None
        prototypes = load_prototypes(conf_dir) if toggles.feature_intervention else None
        state = train_stage1(
            dataset,
            cfg.stage1_train_config(epochs=stage1_epochs),
            backbone,
            confounders=confounders,
            prototypes=prototypes,
            log_path=stage_dir / "train_log.jsonl",
        )
        save_checkpoint(state, stage_dir)

    s1_dir = _run_stage("stage1", s1_hash, _build_stage1)
    if until == "stage1":
        return _finalize()

    # stage 2 -----------------------------------------------------------------
    final_ckpt_dir = s1_dir
    if toggles.counterfactual and cfg["train"]["stage2_epochs"] > 0:
        s2_inputs = {
            "calibration": cfg["calibration"],
            "train": cfg["train"],
            "stage1": artifacts["stage1"]["sha256"],
            "dataset": artifacts["dataset"]["sha256"],
        }
        s2_hash = short_hash(s2_inputs)

        def _build_stage2(stage_dir: Path) -> None:
            stage1_state = load_checkpoint(s1_dir)
            state = train_stage2(
                stage1_state,
                dataset,
                cfg.stage2_train_config(),
                log_path=stage_dir / "train_log.jsonl",
            )
            save_checkpoint(state, stage_dir)

        final_ckpt_dir = _run_stage("stage2", s2_hash, _build_stage2)
    if until == "stage2":
        return _finalize()

    # eval ----------------------------------------------------------------------
    eval_inputs = {
        "eval": cfg["eval"],
        "checkpoint": artifacts["stage2" if "stage2" in artifacts else "stage1"]["sha256"],
        "dataset": artifacts["dataset"]["sha256"],
    }
    eval_hash = short_hash(eval_inputs)

    def _build_eval(stage_dir: Path) -> None:
        state = load_checkpoint(final_ckpt_dir)
        model = model_from_state(state, use_best=True)
        groups = resolve_groups(cfg["eval"]["groups"], dataset)
        report = evaluate(
            model,
            dataset.test_samples,
            dataset.split_assignment,
            groups=groups,
            config_fingerprint=cfg.hash,
            seed=train_seed,
        )
        report.save(stage_dir / "report.json")
        if cfg["eval"]["export_diagnostics"]:
            export_diagnostics(model, dataset.test_samples[:64], stage_dir / "diagnostics")

    _run_stage("eval", eval_hash, _build_eval)
    return _finalize()


def resolve_groups(spec, dataset) -> SimilarityGroups:
    """Similarity groups from the generator's shape families or an explicit map."""
    if spec == "families":
        if not dataset.class_families:
            raise ConfigurationError(
                "groups='families' needs a generated dataset; supply an explicit map"
            )
        return SimilarityGroups.from_families(dataset.class_families)
    return SimilarityGroups(groups={int(k): int(v) for k, v in spec.items()})


TOGGLE_SHORT = {
    "patch_intervention": "patch",
    "feature_intervention": "feat",
    "counterfactual": "cf",
    "refinement": "refine",
}

DEFAULT_ABLATION_ROWS: list[dict] = [
    {},
    {"patch_intervention": True},
    {"feature_intervention": True},
    {"patch_intervention": True, "feature_intervention": True},
    {"patch_intervention": True, "feature_intervention": True, "counterfactual": True},
    {
        "patch_intervention": True,
        "feature_intervention": True,
        "counterfactual": True,
        "refinement": True,
    },
]


def row_name(toggles: dict) -> str:
    enabled = [TOGGLE_SHORT[k] for k in TOGGLE_SHORT if toggles.get(k)]
    return "+".join(enabled) if enabled else "base"


def ablation_sweep(base_config, rows: list[dict] | None = None, force: bool = False) -> dict:
    """Run one experiment per toggle row; collect a merged comparison table.

    Per-row failures are recorded and the sweep continues. The summary links
    every number back to its MetricsReport file and run manifest.
    """
    base = ExperimentConfig.from_any(base_config)
    if rows is None:
        rows = DEFAULT_ABLATION_ROWS
    out_root = Path(base["output_dir"])
    out_root.mkdir(parents=True, exist_ok=True)

    table: list[dict] = []
    for row in rows:
        toggles = {key: bool(row.get(key, False)) for key in TOGGLE_SHORT}
        name = row.get("name") or row_name(toggles)
        derived = base.to_dict()
        derived["train"]["toggles"] = toggles
        # rows share one stage store: hash-keyed stage dirs keep them disjoint
        # while the dataset/confounder builds are reused across rows
        entry: dict = {"name": name, "toggles": toggles}
        try:
            manifest = run_experiment(derived, force=force)
            report_path = manifest.artifact_path("eval") / "report.json"
            report = MetricsReport.load(report_path)
            entry.update(
                {
                    "acc_all": report.acc_all,
                    "acc_head": report.acc_head,
                    "acc_mid": report.acc_mid,
                    "acc_tail": report.acc_tail,
                    "report_path": str(report_path),
                    "report_sha256": sha256_file(report_path),
                    "manifest_path": str(manifest.path),
                }
            )
        except Exception as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        table.append(entry)

    summary = {"rows": table, "base_config_hash": base.hash}
    (out_root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out_root / "summary.txt").write_text(format_sweep_table(table))
    return summary


def format_sweep_table(rows: list[dict]) -> str:
    header = f"{'row':<24} {'acc@all':>8} {'acc@head':>9} {'acc@mid':>8} {'acc@tail':>9}"
    lines = [header, "-" * len(header)]
    for entry in rows:
        if "error" in entry:
            lines.append(f"{entry['name']:<24} ERROR: {entry['error']}")
            continue

        def _fmt(v):
            return "  n/a" if v is None else f"{v:.3f}"

        lines.append(
            f"{entry['name']:<24} {_fmt(entry['acc_all']):>8} {_fmt(entry['acc_head']):>9} "
            f"{_fmt(entry['acc_mid']):>8} {_fmt(entry['acc_tail']):>9}"
        )
    return "\n".join(lines) + "\n"
