"""Two-stage training: intervention-based representation learning, then
counterfactual fine-tuning on an adaptively rebalanced set.

Stage 1 minimizes cross-entropy with optional patch-level intervention and the
deconfounded head. Stage 2 rebuilds a balanced counterfactual set every epoch
(strengths refreshed from held-out per-class accuracy when refinement is on)
and minimizes cross-entropy plus a logit-consistency penalty between each
sample and its counterfactual partner.

All batch shuffling and sampling derives from per-epoch reseeded generators,
so resuming from an epoch checkpoint reproduces the remaining run exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .confounder import ConfounderDictionary, PrototypeDictionary
from .counterfactual import StrengthTable, build_balanced_set, update_strength
from .data import LongTailDataset, SyntheticSample, images_as_array
from .errors import ConfigurationError, DataError, ParameterError, StateError, TrainingDiverged
from .model import BackboneConfig, ViTClassifier, build_model, patch_intervene


@dataclass
class Toggles:
    patch_intervention: bool = False
    feature_intervention: bool = False
    counterfactual: bool = False
    refinement: bool = False


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.01
    lr_schedule: str = "cosine"  # "cosine" | "step"
    momentum: float = 0.9
    optimizer: str = "sgd"
    alpha_gf: float = 1.0
    gamma: float = 0.6
    seed: int = 0
    toggles: Toggles = field(default_factory=Toggles)
    intervention_tokens: int | None = None  # None -> num_patches // 4
    strength_init: float = 0.0
    strength_step: float = 0.1
    target_per_class: int | None = None  # None -> profile n_max
    step_lr_decay: float = 0.1
    step_lr_every: int = 10

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ParameterError(f"stage must be 1 or 2, got {self.stage}")
        if self.alpha_gf < 0:
            raise ParameterError(f"alpha_gf must be >= 0, got {self.alpha_gf}")
        if self.seed < 0:
            raise ParameterError("seed must be non-negative")


def loss_cls(logits: torch.Tensor, labels: torch.Tensor | int) -> torch.Tensor:
    """Mean cross-entropy between logits and integer labels."""
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    if not torch.is_tensor(labels):
        labels = torch.tensor([labels], device=logits.device)
    elif labels.ndim == 0:
        labels = labels.unsqueeze(0)
    return F.cross_entropy(logits, labels)


def loss_finetune(
    logits: torch.Tensor,
    partner_logits: torch.Tensor,
    labels: torch.Tensor,
    alpha_gf: float,
) -> torch.Tensor:
    """Cross-entropy plus alpha * mean squared logit gap to the partner.

    The gap per pair is the squared L2 norm over the class dimension, averaged
    over the batch.
    """
    if logits.shape != partner_logits.shape:
        raise ParameterError(
            f"misaligned pair: {tuple(logits.shape)} vs {tuple(partner_logits.shape)}"
        )
    if alpha_gf < 0:
        raise ParameterError(f"alpha_gf must be >= 0, got {alpha_gf}")
    ce = loss_cls(logits, labels)
    gap = ((logits - partner_logits) ** 2).sum(dim=-1).mean()
    return ce + alpha_gf * gap


def _lr_at(config: TrainConfig, epoch: int, total: int) -> float:
    if config.lr_schedule == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, total)))
    if config.lr_schedule == "step":
        return config.lr * (config.step_lr_decay ** (epoch // config.step_lr_every))
    raise ConfigurationError(f"unknown lr schedule {config.lr_schedule!r}")


def _epoch_seed(seed: int, tag: int, epoch: int) -> int:
    return seed * 1_000_003 + tag * 131_071 + epoch


def _make_optimizer(model: ViTClassifier, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer != "sgd":
        raise ConfigurationError(f"unsupported optimizer {config.optimizer!r}")
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)


@torch.no_grad()
def per_class_accuracy(
    model: ViTClassifier,
    samples: list[SyntheticSample],
    class_count: int,
    batch_size: int = 256,
) -> dict[int, float]:
    """Top-1 accuracy per class; classes without samples report 0.0."""
    correct = np.zeros(class_count, dtype=np.int64)
    total = np.zeros(class_count, dtype=np.int64)
    images = images_as_array(samples)
    labels = np.asarray([s.label for s in samples])
    for start in range(0, len(samples), batch_size):
        chunk = images[start : start + batch_size]
        preds = model.forward_inference(chunk).argmax(dim=-1).cpu().numpy()
        for pred, label in zip(preds, labels[start : start + batch_size]):
            total[label] += 1
            correct[label] += int(pred == label)
    return {
        c: (correct[c] / total[c] if total[c] > 0 else 0.0) for c in range(class_count)
    }


@dataclass
class TrainState:
    """Serializable snapshot of a training run at an epoch boundary."""

    stage: int
    epoch: int  # epochs completed
    backbone: BackboneConfig
    model_state: dict
    optimizer_state: dict
    best_model_state: dict
    best_val: float
    best_epoch: int
    seed: int
    head: str  # "linear" | "deconfounded"
    prototype_l: int
    prototype_fingerprint: str = ""
    strength_levels: dict[int, float] | None = None
    strength_epoch: int = 0
    loss_history: list[dict] = field(default_factory=list)


def model_from_state(state: TrainState, use_best: bool = True) -> ViTClassifier:
    protos = None
    if state.head == "deconfounded":
        protos = np.zeros((state.prototype_l, state.backbone.embed_dim), dtype=np.float32)
    model = build_model(state.backbone, prototypes=protos, seed=state.seed)
    model.load_state_dict(state.best_model_state if use_best else state.model_state)
    return model


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model_state": state.model_state,
            "optimizer_state": state.optimizer_state,
            "best_model_state": state.best_model_state,
        },
        out / "weights.pt",
    )
    meta = {
        "stage": state.stage,
        "epoch": state.epoch,
        "backbone": asdict(state.backbone),
        "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "seed": state.seed,
        "head": state.head,
        "prototype_l": state.prototype_l,
        "prototype_fingerprint": state.prototype_fingerprint,
        "strength_levels": (
            None
            if state.strength_levels is None
            else {str(k): v for k, v in sorted(state.strength_levels.items())}
        ),
        "strength_epoch": state.strength_epoch,
        "loss_history": state.loss_history,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def load_checkpoint(path: str | Path) -> TrainState:
    root = Path(path)
    if not (root / "meta.json").exists() or not (root / "weights.pt").exists():
        raise StateError(f"no checkpoint under {root}")
    meta = json.loads((root / "meta.json").read_text())
    blobs = torch.load(root / "weights.pt", weights_only=True)
    levels = meta["strength_levels"]
    return TrainState(
        stage=meta["stage"],
        epoch=meta["epoch"],
        backbone=BackboneConfig(**meta["backbone"]),
        model_state=blobs["model_state"],
        optimizer_state=blobs["optimizer_state"],
        best_model_state=blobs["best_model_state"],
        best_val=meta["best_val"],
        best_epoch=meta["best_epoch"],
        seed=meta["seed"],
        head=meta["head"],
        prototype_l=meta["prototype_l"],
        prototype_fingerprint=meta["prototype_fingerprint"],
        strength_levels=None if levels is None else {int(k): v for k, v in levels.items()},
        strength_epoch=meta["strength_epoch"],
        loss_history=meta["loss_history"],
    )


class _LogWriter:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _split_train_val(
    dataset: LongTailDataset,
) -> tuple[list[int], list[SyntheticSample]]:
    val = set(dataset.val_indices)
    train_idx = [i for i in range(len(dataset.samples)) if i not in val]
    val_samples = [dataset.samples[i] for i in sorted(val)]
    return train_idx, val_samples


def _check_finite(loss: torch.Tensor, stage: int, epoch: int) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at stage {stage} epoch {epoch}")
    return value


def _macro_accuracy(acc: dict[int, float]) -> float:
    return float(np.mean(list(acc.values())))


def train_stage1(
    dataset: LongTailDataset,
    config: TrainConfig,
    backbone: BackboneConfig,
    confounders: ConfounderDictionary | None = None,
    prototypes: PrototypeDictionary | None = None,
    log_path: str | Path | None = None,
    resume: TrainState | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """De-confounded representation training; returns the best-val snapshot
    alongside the final one.

    ``stop_after`` interrupts the run at an epoch boundary without changing
    the schedule, producing a checkpoint a later call can resume exactly.
    """
    if not dataset.samples:
        raise DataError("cannot train on an empty dataset")
    toggles = config.toggles
    if toggles.feature_intervention and prototypes is None:
        raise ConfigurationError("feature_intervention requires a prototype dictionary")
    if toggles.patch_intervention and confounders is None:
        raise ConfigurationError("patch_intervention requires a confounder dictionary")

    protos = prototypes.prototypes if toggles.feature_intervention else None
    model = build_model(backbone, prototypes=protos, seed=config.seed)
    optimizer = _make_optimizer(model, config)

    start_epoch = 0
    history: list[dict] = []
    best_val = -1.0
    best_epoch = -1
    if resume is not None:
        if resume.stage != 1:
            raise StateError(f"resume state is for stage {resume.stage}, expected 1")
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch
        history = list(resume.loss_history)
        best_val = resume.best_val
        best_epoch = resume.best_epoch
        best_state = resume.best_model_state
    else:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    train_idx, val_samples = _split_train_val(dataset)
    if not train_idx:
        raise DataError("no training samples left after the validation split")
    images = images_as_array(dataset.samples)
    labels = torch.as_tensor(dataset.train_labels())
    m = config.intervention_tokens
    if m is None:
        m = backbone.num_patches // 4
    conf_images = None
    if toggles.patch_intervention:
        conf_images = torch.as_tensor(confounders.images())

    log = _LogWriter(log_path)
    train_ids = torch.as_tensor(train_idx)
    last_epoch = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(start_epoch, last_epoch):
        lr = _lr_at(config, epoch, config.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        gen = torch.Generator()
        gen.manual_seed(_epoch_seed(config.seed, 1, epoch))
        perm = train_ids[torch.randperm(len(train_ids), generator=gen)]

        model.train()
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(perm), config.batch_size):
            batch_idx = perm[start : start + config.batch_size]
            batch = torch.as_tensor(images[batch_idx.numpy()])
            seq = model.embed_patches(batch)
            if toggles.patch_intervention:
                pick = torch.randint(len(conf_images), (len(batch_idx),), generator=gen)
                s_seq = model.embed_patches(conf_images[pick])
                seq = patch_intervene(seq, s_seq, m, generator=gen)
            logits = model.head(model.forward_backbone(seq))
            loss = loss_cls(logits, labels[batch_idx])
            epoch_loss += _check_finite(loss, stage=1, epoch=epoch)
            batches += 1
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        record = {
            "stage": 1,
            "epoch": epoch,
            "train_loss": epoch_loss / max(1, batches),
            "lr": lr,
        }
        if val_samples:
            acc = per_class_accuracy(model, val_samples, dataset.class_count)
            record["val_macro_acc"] = _macro_accuracy(acc)
            record["val_per_class_acc"] = {str(c): acc[c] for c in sorted(acc)}
            if record["val_macro_acc"] > best_val:
                best_val = record["val_macro_acc"]
                best_epoch = epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        history.append(record)
        log.write(record)

    if best_epoch < 0:  # no validation slice: final state is the best state
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        best_epoch = last_epoch - 1
        best_val = float("nan")

    return TrainState(
        stage=1,
        epoch=last_epoch,
        backbone=backbone,
        model_state=model.state_dict(),
        optimizer_state=optimizer.state_dict(),
        best_model_state=best_state,
        best_val=best_val,
        best_epoch=best_epoch,
        seed=config.seed,
        head="deconfounded" if toggles.feature_intervention else "linear",
        prototype_l=0 if prototypes is None or not toggles.feature_intervention else prototypes.l,
        prototype_fingerprint=(
            prototypes.backbone_fingerprint
            if prototypes is not None and toggles.feature_intervention
            else ""
        ),
        loss_history=history,
    )


def train_stage2(
    stage1_checkpoint: TrainState | None,
    dataset: LongTailDataset,
    config: TrainConfig,
    log_path: str | Path | None = None,
    resume: TrainState | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """Counterfactual fine-tuning on per-epoch rebuilt balanced sets."""
    if stage1_checkpoint is None:
        raise StateError("stage 2 requires a stage-1 checkpoint")
    if not config.toggles.counterfactual:
        raise ConfigurationError("stage 2 requires the counterfactual toggle")
    if not dataset.samples:
        raise DataError("cannot fine-tune on an empty dataset")

    model = model_from_state(stage1_checkpoint, use_best=True)
    optimizer = _make_optimizer(model, config)
    class_count = dataset.class_count
    table = StrengthTable.initial(
        class_count,
        value=config.strength_init,
        gamma=config.gamma,
        step=config.strength_step,
    )
    target = config.target_per_class or dataset.profile.n_max

    start_epoch = 0
    history: list[dict] = []
    best_val = -1.0
    best_epoch = -1
    if resume is not None:
        if resume.stage != 2:
            raise StateError(f"resume state is for stage {resume.stage}, expected 2")
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch
        history = list(resume.loss_history)
        best_val = resume.best_val
        best_epoch = resume.best_epoch
        best_state = resume.best_model_state
        if resume.strength_levels is not None:
            table = StrengthTable(
                levels=dict(resume.strength_levels),
                epoch=resume.strength_epoch,
                gamma=config.gamma,
                step=config.strength_step,
            )
    else:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    _, val_samples = _split_train_val(dataset)
    log = _LogWriter(log_path)

    last_epoch = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(start_epoch, last_epoch):
        lr = _lr_at(config, epoch, config.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr

        acc = per_class_accuracy(model, val_samples, class_count) if val_samples else {}
        if config.toggles.refinement:
            if not val_samples:
                raise ConfigurationError("refinement requires a validation slice")
            table = update_strength(table, acc)
        for c in sorted(table.levels):
            log.write(
                {"epoch": epoch, "class": c, "L": table.levels[c], "acc": acc.get(c)}
            )

        np_rng = np.random.default_rng([config.seed, 3, epoch])
        balanced = build_balanced_set(
            dataset, table, target, np_rng, exclude_indices=dataset.val_indices
        )
        primary = np.stack([s.image for s in balanced.samples])
        partner = np.stack(
            [dataset.samples[s.source_id].image for s in balanced.samples]
        )
        lbl = torch.as_tensor([s.label for s in balanced.samples])

        gen = torch.Generator()
        gen.manual_seed(_epoch_seed(config.seed, 2, epoch))
        perm = torch.randperm(len(balanced.samples), generator=gen)

        model.train()
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size].numpy()
            stacked = torch.as_tensor(np.concatenate([primary[idx], partner[idx]]))
            both = model(stacked)
            logits, partner_logits = both[: len(idx)], both[len(idx) :]
            loss = loss_finetune(logits, partner_logits, lbl[idx], config.alpha_gf)
            epoch_loss += _check_finite(loss, stage=2, epoch=epoch)
            batches += 1
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        record = {
            "stage": 2,
            "epoch": epoch,
            "train_loss": epoch_loss / max(1, batches),
            "lr": lr,
            "strength": {str(c): table.levels[c] for c in sorted(table.levels)},
        }
        if val_samples:
            post_acc = per_class_accuracy(model, val_samples, class_count)
            record["val_macro_acc"] = _macro_accuracy(post_acc)
            if record["val_macro_acc"] > best_val:
                best_val = record["val_macro_acc"]
                best_epoch = epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        history.append(record)
        log.write(record)

    if best_epoch < 0:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        best_epoch = last_epoch - 1
        best_val = float("nan")

    return TrainState(
        stage=2,
        epoch=last_epoch,
        backbone=stage1_checkpoint.backbone,
        model_state=model.state_dict(),
        optimizer_state=optimizer.state_dict(),
        best_model_state=best_state,
        best_val=best_val,
        best_epoch=best_epoch,
        seed=config.seed,
        head=stage1_checkpoint.head,
        prototype_l=stage1_checkpoint.prototype_l,
        prototype_fingerprint=stage1_checkpoint.prototype_fingerprint,
        strength_levels=dict(table.levels),
        strength_epoch=table.epoch,
        loss_history=history,
    )
