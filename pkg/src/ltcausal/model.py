"""Small from-scratch vision transformer with two causal injection points.

Training-time background debiasing happens in two places: extra background
patch tokens can be appended to the input sequence (``patch_intervene``), and
the classification head can marginalize over a dictionary of background
prototypes before producing logits (``DeconfoundedHead``).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ParameterError


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    class_count: int = 10
    dropout: float = 0.0
    channels: int = 3

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ParameterError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ParameterError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


def backbone_fingerprint(config: BackboneConfig, seed: int) -> str:
    payload = json.dumps({"config": asdict(config), "seed": seed}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class PatchSequence:
    """Class token plus patch tokens, with their positional-table indices."""

    tokens: torch.Tensor  # (B, L, D), positional embedding already added
    position_ids: torch.Tensor  # (B, L) long

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


def patch_intervene(
    x_seq: PatchSequence,
    s_seq: PatchSequence,
    m: int,
    generator: torch.Generator | None = None,
) -> PatchSequence:
    """Append m background tokens sampled without replacement from ``s_seq``.

    Sampling excludes the class token; appended tokens keep the positional
    embedding of their original grid position. Labels are untouched.
    """
    if m == 0:
        return x_seq
    avail = s_seq.length - 1
    if m < 0 or m > avail:
        raise ParameterError(f"m={m} outside [0, {avail}] available confounder tokens")
    if x_seq.tokens.shape[-1] != s_seq.tokens.shape[-1]:
        raise ParameterError("sequences have mismatched embed dims")
    b = x_seq.tokens.shape[0]
    scores = torch.rand(b, avail, generator=generator)
    idx = scores.argsort(dim=1)[:, :m]  # uniform m-subset per batch element
    gather = idx.unsqueeze(-1).expand(-1, -1, s_seq.tokens.shape[-1])
    picked = s_seq.tokens[:, 1:, :].gather(1, gather)
    picked_ids = s_seq.position_ids[:, 1:].gather(1, idx)
    return PatchSequence(
        tokens=torch.cat([x_seq.tokens, picked], dim=1),
        position_ids=torch.cat([x_seq.position_ids, picked_ids], dim=1),
    )


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if need_weights:
            attn = (q @ k.transpose(-2, -1)) * self.scale
            attn = attn.softmax(dim=-1)
            attn = self.dropout(attn)
            out = (attn @ v).transpose(1, 2).reshape(b, n, d)
            return self.proj(out), attn
        out = torch.nn.functional.scaled_dot_product_attention(
            q, k, v, dropout_p=self.dropout.p if self.training else 0.0
        )
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out), None


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, dropout: float = 0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        out, attn = self.attn(self.norm1(x), need_weights=need_weights)
        x = x + out
        x = x + self.mlp(self.norm2(x))
        return x, attn


class LinearHead(nn.Module):
    """Plain classification head: LayerNorm then a linear map to logits."""

    def __init__(self, dim: int, class_count: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc = nn.Linear(dim, class_count)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(self.norm(feats))


class DeconfoundedHead(nn.Module):
    """Backdoor-adjusted head mixing background prototypes into the logits.

    Attention weights over the prototype rows are softmax-normalized per
    sample; the weighted prototype mixture enters additively next to the
    image feature before classification. The prototype matrix is a frozen
    buffer, never a parameter.
    """

    def __init__(self, dim: int, class_count: int, prototypes: torch.Tensor):
        super().__init__()
        if prototypes.ndim != 2 or prototypes.shape[1] != dim:
            raise ParameterError(
                f"prototypes must be (l, {dim}), got {tuple(prototypes.shape)}"
            )
        self.norm = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.feat_proj = nn.Linear(dim, dim)
        self.mix_proj = nn.Linear(dim, dim, bias=False)
        self.classifier = nn.Linear(dim, class_count)
        self.register_buffer("prototypes", prototypes.detach().clone())

    def prototype_mixture(
        self, feats: torch.Tensor, score_shift: float = 0.0
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (weights, mixture); weights are non-negative and sum to 1."""
        h = self.norm(feats)
        q = self.q_proj(h)
        k = self.k_proj(self.prototypes)
        scores = (q @ k.t()) / math.sqrt(q.shape[-1]) + score_shift
        mu = scores.softmax(dim=-1)
        mixture = mu @ self.prototypes
        return mu, mixture

    def forward(self, feats: torch.Tensor, score_shift: float = 0.0) -> torch.Tensor:
        mu, mixture = self.prototype_mixture(feats, score_shift=score_shift)
        fused = self.feat_proj(self.norm(feats)) + self.mix_proj(mixture)
        return self.classifier(fused)


class ViTClassifier(nn.Module):
    """Patch-embedding ViT encoder with a plain or deconfounded head."""

    def __init__(self, config: BackboneConfig, prototypes: np.ndarray | torch.Tensor | None = None):
        super().__init__()
        self.config = config
        d = config.embed_dim
        t = config.num_patches
        self.patch_proj = nn.Linear(config.patch_size**2 * config.channels, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1 + t, d))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.heads, config.mlp_ratio, config.dropout)
            for _ in range(config.depth)
        )
        if prototypes is None:
            self.head: nn.Module = LinearHead(d, config.class_count)
        else:
            protos = torch.as_tensor(np.asarray(prototypes), dtype=torch.float32)
            self.head = DeconfoundedHead(d, config.class_count, protos)

    @property
    def deconfounded(self) -> bool:
        return isinstance(self.head, DeconfoundedHead)

    def _as_batch(self, images: np.ndarray | torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images)) if not torch.is_tensor(images) else images
        if x.ndim == 3:
            x = x.unsqueeze(0)
        cfg = self.config
        if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ParameterError(
                f"expected images (*, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), "
                f"got {tuple(x.shape)}"
            )
        param = next(self.parameters())
        return x.to(dtype=param.dtype, device=param.device)

    def embed_patches(self, images: np.ndarray | torch.Tensor) -> PatchSequence:
        """Non-overlapping patchify, linear projection, positions, class token."""
        x = self._as_batch(images)
        b = x.shape[0]
        p = self.config.patch_size
        g = self.config.grid
        patches = (
            x.reshape(b, g, p, g, p, self.config.channels)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(b, g * g, p * p * self.config.channels)
        )
        tokens = self.patch_proj(patches)
        ids = torch.arange(1 + g * g, device=tokens.device)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        tokens = tokens + self.pos_embed[ids]
        return PatchSequence(tokens=tokens, position_ids=ids.unsqueeze(0).expand(b, -1))

    def forward_backbone(
        self, seq: PatchSequence, return_attention: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, list[torch.Tensor]]:
        x = seq.tokens
        attns = []
        for block in self.blocks:
            x, attn = block(x, need_weights=return_attention)
            if return_attention:
                attns.append(attn)
        feats = x[:, 0, :]
        return (feats, attns) if return_attention else feats

    def forward_features(self, images: np.ndarray | torch.Tensor) -> torch.Tensor:
        """Clean (no-intervention) path to the pre-classifier feature."""
        return self.forward_backbone(self.embed_patches(images))

    def forward(self, images: np.ndarray | torch.Tensor) -> torch.Tensor:
        return self.head(self.forward_features(images))

    @torch.no_grad()
    def forward_inference(self, images: np.ndarray | torch.Tensor) -> torch.Tensor:
        """Deterministic test-time logits: clean sequence, dropout disabled."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(images)
        finally:
            if was_training:
                self.train()


def build_model(
    config: BackboneConfig,
    prototypes: np.ndarray | torch.Tensor | None = None,
    seed: int = 0,
) -> ViTClassifier:
    """Construct the classifier with a deterministic initialization."""
    torch.manual_seed(seed)
    return ViTClassifier(config, prototypes=prototypes)


@torch.no_grad()
def attention_rollout(model: ViTClassifier, images: np.ndarray | torch.Tensor) -> np.ndarray:
    """CLS-to-patch attention rollout, one (grid, grid) map per image."""
    was_training = model.training
    model.eval()
    try:
        seq = model.embed_patches(images)
        _, attns = model.forward_backbone(seq, return_attention=True)
    finally:
        if was_training:
            model.train()
    g = model.config.grid
    n = seq.tokens.shape[1]
    rollout = torch.eye(n, device=seq.tokens.device).expand(seq.tokens.shape[0], n, n)
    if not attns:
        flat = rollout[:, 0, 1:]
    else:
        for attn in attns:
            mixed = 0.5 * attn.mean(dim=1) + 0.5 * torch.eye(n, device=attn.device)
            mixed = mixed / mixed.sum(dim=-1, keepdim=True)
            rollout = mixed @ rollout
        flat = rollout[:, 0, 1:]
    return flat.reshape(-1, g, g).cpu().numpy()
