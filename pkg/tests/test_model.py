from __future__ import annotations

import numpy as np
import pytest
import torch

from ltcausal.errors import ParameterError
from ltcausal.model import (
    BackboneConfig,
    DeconfoundedHead,
    PatchSequence,
    attention_rollout,
    build_model,
    patch_intervene,
)
from ltcausal.train import loss_cls


def _rand_images(n, size=32, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, size, size, channels)).astype(np.float32)


class TestConfig:
    def test_patch_divisibility(self):
        with pytest.raises(ParameterError):
            BackboneConfig(image_size=30, patch_size=4)

    def test_head_divisibility(self):
        with pytest.raises(ParameterError):
            BackboneConfig(embed_dim=30, heads=4)


class TestEmbedPatches:
    def test_sequence_length(self):
        model = build_model(BackboneConfig(), seed=0)
        seq = model.embed_patches(_rand_images(2))
        assert seq.length == 65  # 1 class token + 8*8 patches
        assert seq.position_ids.shape == (2, 65)

    def test_zero_image_tokens_are_pos_plus_bias(self):
        model = build_model(BackboneConfig(), seed=0)
        seq = model.embed_patches(np.zeros((1, 32, 32, 3), dtype=np.float32))
        expected = model.patch_proj.bias.detach() + model.pos_embed[1:].detach()
        assert torch.allclose(seq.tokens[0, 1:], expected, atol=1e-7)

    def test_single_patch_difference_is_local(self):
        model = build_model(BackboneConfig(), seed=0)
        a = _rand_images(1)
        b = a.copy()
        b[0, 4:8, 8:12, :] += 0.1  # patch (row 1, col 2) -> token index 1 + 1*8+2
        seq_a = model.embed_patches(a)
        seq_b = model.embed_patches(b)
        diff = (seq_a.tokens - seq_b.tokens).abs().sum(dim=-1)[0]
        changed = torch.nonzero(diff > 1e-9).flatten().tolist()
        assert changed == [1 + 1 * 8 + 2]

    def test_shape_validation(self):
        model = build_model(BackboneConfig(), seed=0)
        with pytest.raises(ParameterError):
            model.embed_patches(np.zeros((1, 16, 16, 3), dtype=np.float32))


class TestPatchIntervene:
    @pytest.fixture()
    def seqs(self):
        model = build_model(BackboneConfig(), seed=0)
        x_seq = model.embed_patches(_rand_images(3, seed=1))
        s_seq = model.embed_patches(_rand_images(3, seed=2))
        return x_seq, s_seq

    def test_zero_tokens_is_identity(self, seqs):
        x_seq, s_seq = seqs
        out = patch_intervene(x_seq, s_seq, 0)
        assert torch.equal(out.tokens, x_seq.tokens)

    def test_output_length(self, seqs):
        x_seq, s_seq = seqs
        out = patch_intervene(x_seq, s_seq, 16, torch.Generator().manual_seed(0))
        assert out.length == 81  # 1 cls + 64 + 16

    def test_reproducible_with_fixed_generator(self, seqs):
        x_seq, s_seq = seqs
        a = patch_intervene(x_seq, s_seq, 8, torch.Generator().manual_seed(5))
        b = patch_intervene(x_seq, s_seq, 8, torch.Generator().manual_seed(5))
        assert torch.equal(a.tokens, b.tokens)
        assert torch.equal(a.position_ids, b.position_ids)

    def test_appended_tokens_come_from_source(self, seqs):
        x_seq, s_seq = seqs
        out = patch_intervene(x_seq, s_seq, 8, torch.Generator().manual_seed(1))
        appended = out.tokens[:, 65:, :]
        ids = out.position_ids[:, 65:]
        for b in range(appended.shape[0]):
            for j in range(8):
                src = s_seq.tokens[b, ids[b, j], :]
                assert torch.allclose(appended[b, j], src)

    def test_m_too_large(self, seqs):
        x_seq, s_seq = seqs
        with pytest.raises(ParameterError):
            patch_intervene(x_seq, s_seq, 65)


class TestBackbone:
    def test_depth_zero_identity(self):
        model = build_model(BackboneConfig(depth=0), seed=0)
        seq = model.embed_patches(_rand_images(2))
        feats = model.forward_backbone(seq)
        assert torch.equal(feats, seq.tokens[:, 0, :])

    def test_permuting_appended_tokens_invariant(self):
        # attention is set-equivariant once positions are baked into tokens
        model = build_model(BackboneConfig(embed_dim=32, depth=2, heads=2), seed=0).double()
        x_seq = model.embed_patches(_rand_images(2, seed=3).astype(np.float64))
        s_seq = model.embed_patches(_rand_images(2, seed=4).astype(np.float64))
        out = patch_intervene(x_seq, s_seq, 12, torch.Generator().manual_seed(0))
        perm = torch.randperm(12)
        shuffled = PatchSequence(
            tokens=torch.cat([out.tokens[:, :65], out.tokens[:, 65:][:, perm]], dim=1),
            position_ids=torch.cat(
                [out.position_ids[:, :65], out.position_ids[:, 65:][:, perm]], dim=1
            ),
        )
        a = model.forward_backbone(out)
        b = model.forward_backbone(shuffled)
        assert (a - b).abs().max() < 1e-5

    def test_input_gradient_matches_finite_difference(self):
        # central difference, 64-bit probe, one pixel
        config = BackboneConfig(embed_dim=16, depth=1, heads=2, class_count=4)
        model = build_model(config, seed=0).double()
        rng = np.random.default_rng(0)
        image = rng.uniform(size=(1, 32, 32, 3))
        label = torch.tensor([2])

        x = torch.tensor(image, dtype=torch.float64, requires_grad=True)
        loss = loss_cls(model(x), label)
        loss.backward()
        autodiff = x.grad[0, 10, 20, 1].item()

        h = 1e-5
        perturbed = image.copy()
        perturbed[0, 10, 20, 1] += h
        up = loss_cls(model(torch.tensor(perturbed)), label).item()
        perturbed[0, 10, 20, 1] -= 2 * h
        down = loss_cls(model(torch.tensor(perturbed)), label).item()
        fd = (up - down) / (2 * h)
        assert abs(fd - autodiff) / max(abs(fd), 1e-12) < 1e-3


def _head_with_protos(dim=16, classes=5, l=6, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    protos = torch.randn(l, dim, dtype=dtype)
    head = DeconfoundedHead(dim, classes, protos).to(dtype)
    return head, protos


class TestDeconfoundedHead:
    def test_zero_scores_uniform_weights(self):
        head, _ = _head_with_protos()
        with torch.no_grad():
            head.q_proj.weight.zero_()
            head.q_proj.bias.zero_()
        mu, _ = head.prototype_mixture(torch.randn(4, 16))
        assert torch.allclose(mu, torch.full((4, 6), 1 / 6))

    def test_zero_mix_projection_reduces_to_plain_head(self):
        head, _ = _head_with_protos()
        with torch.no_grad():
            head.mix_proj.weight.zero_()
        feats = torch.randn(3, 16)
        got = head(feats)
        plain = head.classifier(head.feat_proj(head.norm(feats)))
        assert torch.allclose(got, plain, atol=1e-6)

    def test_weights_normalized_thousand_trials(self):
        head, _ = _head_with_protos()
        mu, _ = head.prototype_mixture(torch.randn(1000, 16))
        assert (mu >= 0).all()
        assert torch.allclose(mu.sum(dim=-1), torch.ones(1000), atol=1e-6)

    def test_score_shift_invariance(self):
        head, _ = _head_with_protos(dtype=torch.float64)
        feats = torch.randn(5, 16, dtype=torch.float64)
        base = head(feats)
        shifted = head(feats, score_shift=7.5)
        assert torch.allclose(base, shifted, atol=1e-10)

    def test_prototype_shape_validation(self):
        with pytest.raises(ParameterError):
            DeconfoundedHead(16, 5, torch.randn(4, 8))

    def test_parameter_gradients_match_finite_difference(self):
        head, _ = _head_with_protos(dtype=torch.float64)
        feats = torch.randn(4, 16, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3])

        loss = loss_cls(head(feats), labels)
        loss.backward()
        h = 1e-6
        for name, param in [
            ("feat_proj.weight", head.feat_proj.weight),
            ("mix_proj.weight", head.mix_proj.weight),
            ("q_proj.weight", head.q_proj.weight),
            ("k_proj.weight", head.k_proj.weight),
        ]:
            idx = (1, 2)
            with torch.no_grad():
                param[idx] += h
                up = loss_cls(head(feats), labels).item()
                param[idx] -= 2 * h
                down = loss_cls(head(feats), labels).item()
                param[idx] += h
            fd = (up - down) / (2 * h)
            auto = param.grad[idx].item()
            assert abs(fd - auto) / max(abs(fd), 1e-12) < 1e-3, name


class TestInference:
    def test_deterministic(self, tiny_model):
        images = _rand_images(4)
        a = tiny_model.forward_inference(images)
        b = tiny_model.forward_inference(images)
        assert torch.equal(a, b)

    def test_batched_equals_per_sample(self, tiny_model):
        images = _rand_images(6, seed=9)
        batched = tiny_model.forward_inference(images)
        singles = torch.cat([tiny_model.forward_inference(images[i]) for i in range(6)])
        assert (batched - singles).abs().max() < 1e-5

    def test_dropout_disabled_at_inference(self):
        model = build_model(BackboneConfig(dropout=0.5), seed=0)
        model.train()
        images = _rand_images(2)
        a = model.forward_inference(images)
        b = model.forward_inference(images)
        assert torch.equal(a, b)
        assert model.training  # restored

    def test_deconfounded_inference(self, tiny_backbone):
        protos = np.random.default_rng(0).normal(size=(4, tiny_backbone.embed_dim))
        model = build_model(tiny_backbone, prototypes=protos, seed=0)
        out = model.forward_inference(_rand_images(3))
        assert out.shape == (3, tiny_backbone.class_count)


class TestAttentionRollout:
    def test_map_shape_is_patch_grid(self, tiny_model):
        maps = attention_rollout(tiny_model, _rand_images(3))
        assert maps.shape == (3, 8, 8)

    def test_rows_normalized(self, tiny_model):
        maps = attention_rollout(tiny_model, _rand_images(2))
        assert np.isfinite(maps).all()
        assert (maps >= 0).all()
