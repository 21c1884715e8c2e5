"""Command-line entry point.

Subcommands: gen-data, build-confounders, train, eval, run, sweep.
Exit code 0 only on full success.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import LtCausalError


def _add_gen_data(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("gen-data", help="synthesize a confounded long-tail dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--n-max", type=int, default=200)
    p.add_argument("--ratio", type=float, default=0.1)
    p.add_argument("--rho", type=float, default=0.9, help="confound strength in [0, 1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--texture-families", type=int, default=10)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--head-frac", type=float, default=0.3)
    p.add_argument("--tail-frac", type=float, default=0.3)
    p.add_argument("--val-fraction", type=float, default=0.1)


def _cmd_gen_data(args: argparse.Namespace) -> int:
    from .data import assign_splits, build_imbalance_profile, generate_synthetic_dataset, save_dataset

    profile = build_imbalance_profile(args.classes, args.n_max, args.ratio)
    dataset = generate_synthetic_dataset(
        profile,
        confound_strength=args.rho,
        seed=args.seed,
        image_size=args.image_size,
        channels=args.channels,
        texture_families=args.texture_families,
        test_per_class=args.test_per_class,
        val_fraction=args.val_fraction,
    )
    dataset = assign_splits(dataset, args.head_frac, args.tail_frac)
    out = save_dataset(dataset, args.out)
    print(f"wrote dataset ({len(dataset.samples)} train / {len(dataset.test_samples)} test) to {out}")
    return 0


def _add_build_confounders(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("build-confounders", help="build confounder + prototype dictionaries")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--masker", choices=["oracle", "saliency"], default="oracle")
    p.add_argument("--l", type=int, default=8, help="prototype dictionary size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=1.0, help="training-sample selection fraction")
    p.add_argument("--quantile", type=float, default=0.8, help="saliency foreground quantile")
    p.add_argument("--config", default=None, help="experiment config supplying the model section")


def _cmd_build_confounders(args: argparse.Namespace) -> int:
    from .config import ExperimentConfig
    from .confounder import (
        build_confounder_dictionary,
        build_prototype_dictionary,
        oracle_masker,
        saliency_masker,
        save_confounders,
        save_prototypes,
    )
    from .data import load_dataset
    from .model import backbone_fingerprint, build_model

    cfg = ExperimentConfig.from_any(args.config) if args.config else ExperimentConfig()
    dataset = load_dataset(args.data)
    backbone = cfg.backbone_config()
    if backbone.class_count != dataset.class_count or backbone.image_size != dataset.image_size:
        # model section must match the data it embeds
        from dataclasses import replace

        backbone = replace(
            backbone,
            class_count=dataset.class_count,
            image_size=dataset.image_size,
            channels=dataset.channels,
        )
    seed = cfg["train"]["seed"]
    model = build_model(backbone, seed=seed)
    masker = oracle_masker() if args.masker == "oracle" else saliency_masker(model, args.quantile)
    dictionary = build_confounder_dictionary(dataset, masker, fraction=args.fraction, seed=args.seed)
    save_confounders(dictionary, args.out)
    prototypes = build_prototype_dictionary(
        dictionary, model, l=args.l, seed=args.seed,
        fingerprint=backbone_fingerprint(backbone, seed),
    )
    save_prototypes(prototypes, args.out)
    print(f"wrote {dictionary.size} confounders and {prototypes.l} prototypes to {args.out}")
    return 0


def _add_train(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="run one training stage from a config")
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.add_argument("--force", action="store_true", help="ignore cached stage outputs")


def _cmd_train(args: argparse.Namespace) -> int:
    from .config import ExperimentConfig
    from .experiment import run_experiment

    cfg = ExperimentConfig.from_file(args.config)
    if args.resume is None:
        manifest = run_experiment(cfg, force=args.force, until=f"stage{args.stage}")
        stage = f"stage{args.stage}"
        print(f"{stage} checkpoint: {manifest.artifact_path(stage)}")
        print(f"manifest: {manifest.path}")
        return 0
    return _resume_training(cfg, args.stage, Path(args.resume))


def _resume_training(cfg, stage: int, resume_dir: Path) -> int:
    from .confounder import load_confounders, load_prototypes
    from .data import load_dataset
    from .experiment import run_experiment
    from .train import load_checkpoint, save_checkpoint, train_stage1, train_stage2

    resume_state = load_checkpoint(resume_dir)
    manifest = run_experiment(cfg, until="confounders" if stage == 1 else "stage1")
    dataset = load_dataset(manifest.artifact_path("dataset"))
    out_dir = Path(cfg["output_dir"]) / f"resumed-stage{stage}"
    if stage == 1:
        toggles = cfg.toggles()
        confounders = prototypes = None
        if "confounders" in manifest.data["artifacts"]:
            conf_dir = manifest.artifact_path("confounders")
            confounders = load_confounders(conf_dir)
            if toggles.feature_intervention:
                prototypes = load_prototypes(conf_dir)
        epochs = cfg["train"]["stage1_epochs"]
        if not toggles.counterfactual:
            epochs += cfg["train"]["stage2_epochs"]
        state = train_stage1(
            dataset,
            cfg.stage1_train_config(epochs=epochs),
            cfg.backbone_config(),
            confounders=confounders,
            prototypes=prototypes,
            log_path=out_dir / "train_log.jsonl",
            resume=resume_state,
        )
    else:
        stage1_state = load_checkpoint(manifest.artifact_path("stage1"))
        state = train_stage2(
            stage1_state,
            dataset,
            cfg.stage2_train_config(),
            log_path=out_dir / "train_log.jsonl",
            resume=resume_state,
        )
    save_checkpoint(state, out_dir)
    print(f"resumed stage {stage} checkpoint: {out_dir}")
    return 0


def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument(
        "--groups",
        default="families",
        help="'families' or a JSON file mapping class id -> group id",
    )
    p.add_argument("--out", required=True, help="output report path (JSON)")


def _cmd_eval(args: argparse.Namespace) -> int:
    from .data import load_dataset
    from .evaluate import SimilarityGroups, evaluate
    from .experiment import resolve_groups
    from .train import load_checkpoint, model_from_state

    dataset = load_dataset(args.data)
    state = load_checkpoint(args.ckpt)
    model = model_from_state(state, use_best=True)
    if args.groups == "families":
        groups = resolve_groups("families", dataset)
    else:
        groups = SimilarityGroups.from_json(args.groups)
    report = evaluate(
        model,
        dataset.test_samples,
        dataset.split_assignment,
        groups=groups,
        seed=state.seed,
    )
    path = report.save(args.out)
    print(f"acc@all={report.acc_all:.3f} head={report.acc_head} mid={report.acc_mid} tail={report.acc_tail}")
    print(f"report: {path}")
    return 0


def _add_run(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("run", help="run the full pipeline for one config")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")


def _cmd_run(args: argparse.Namespace) -> int:
    from .evaluate import MetricsReport
    from .experiment import run_experiment

    manifest = run_experiment(args.config, force=args.force)
    report = MetricsReport.load(manifest.artifact_path("eval") / "report.json")
    print(
        f"acc@all={report.acc_all:.3f} head={report.acc_head} "
        f"mid={report.acc_mid} tail={report.acc_tail}"
    )
    print(f"manifest: {manifest.path}")
    return 0


def _add_sweep(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("sweep", help="run an ablation sweep over toggle rows")
    p.add_argument("--config", required=True)
    p.add_argument(
        "--rows",
        default=None,
        help="JSON file with a list of toggle dicts; defaults to the standard six rows",
    )
    p.add_argument("--force", action="store_true")


def _cmd_sweep(args: argparse.Namespace) -> int:
    from .experiment import ablation_sweep, format_sweep_table

    rows = None
    if args.rows is not None:
        rows = json.loads(Path(args.rows).read_text())
    summary = ablation_sweep(args.config, rows=rows, force=args.force)
    print(format_sweep_table(summary["rows"]))
    return 1 if any("error" in row for row in summary["rows"]) else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltcausal",
        description="Two-stage causal debiasing for long-tailed image classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(sub)
    _add_build_confounders(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_run(sub)
    _add_sweep(sub)
    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "build-confounders": _cmd_build_confounders,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except LtCausalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
