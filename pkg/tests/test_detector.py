import hashlib

import numpy as np
import pytest
import torch

from priordet.detector import (
    Detector,
    DetectorConfig,
    freeze_backbone,
    load_snapshot,
    parameter_snapshot,
    prepare_images,
    swap_classifier_head,
)
from priordet.errors import ConfigError
from priordet.matching import LossWeights, pad_targets, total_loss

TINY = DetectorConfig(
    d_model=16,
    n_heads=2,
    enc_layers=1,
    dec_layers=1,
    n_queries=5,
    emb_dim=8,
    head_hidden=16,
    ffn_dim=32,
)


def make_model(config=TINY, seed=0, dtype=None):
    torch.manual_seed(seed)
    model = Detector(config)
    if dtype is not None:
        model = model.to(dtype)
    return model


def random_images(batch, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((batch, size, size, 3))


def checksum(model, part=None):
    h = hashlib.sha256()
    module = model if part is None else getattr(model, part)
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def training_step(model, images, m=3, seed=0, lr=1e-3, weight_decay=0.0):
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=lr,
        weight_decay=weight_decay,
    )
    outputs = model(prepare_images(images))
    loss = 0.0
    for out in outputs:
        boxes = torch.rand(m, 4, generator=g) * 0.4 + 0.2
        emb = torch.randn(m, model.config.emb_dim, generator=g)
        targets = pad_targets(boxes, model.config.n_queries, embeddings=emb)
        breakdown, _ = total_loss(targets, out, LossWeights())
        loss = loss + breakdown.total
    (loss / len(outputs)).backward()
    opt.step()
    opt.zero_grad()
    return float(loss)


class TestForward:
    def test_output_shapes(self):
        model = make_model()
        outs = model(prepare_images(random_images(2)))
        assert len(outs) == 2
        for out in outs:
            assert out.query_embeddings.shape == (5, 16)
            assert out.boxes.shape == (5, 4)
            assert out.embeddings.shape == (5, 8)
            assert out.class_logits.shape == (5, 2)

    def test_boxes_in_open_unit_interval(self):
        model = make_model(seed=1)
        outs = model(prepare_images(random_images(3, seed=2)))
        for out in outs:
            assert torch.all(out.boxes > 0) and torch.all(out.boxes < 1)

    def test_eval_mode_deterministic(self):
        model = make_model(seed=2).eval()
        images = prepare_images(random_images(2, seed=3))
        with torch.no_grad():
            a = model(images)
            b = model(images)
        for x, y in zip(a, b):
            assert torch.equal(x.boxes, y.boxes)
            assert torch.equal(x.class_logits, y.class_logits)

    def test_bad_input_shape(self):
        model = make_model()
        with pytest.raises(ValueError):
            model(torch.zeros(2, 1, 32, 32))

    def test_initial_boxes_concentrated(self):
        model = make_model(seed=3).eval()
        with torch.no_grad():
            outs = model(prepare_images(random_images(2, seed=4)))
        boxes = torch.cat([o.boxes for o in outs])
        assert torch.all((boxes[:, :2] - 0.5).abs() < 0.2)
        assert torch.all((boxes[:, 2:] - 0.2).abs() < 0.15)


class TestConfigValidation:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            DetectorConfig(d_model=16, n_heads=3)

    def test_n_classes_minimum(self):
        with pytest.raises(ConfigError):
            DetectorConfig(n_classes=1)

    def test_dict_roundtrip(self):
        cfg = DetectorConfig.from_dict(TINY.to_dict())
        assert cfg == TINY


class TestFreezeBackbone:
    def test_frozen_backbone_unchanged_by_steps(self):
        model = make_model(seed=4)
        freeze_backbone(model)
        before = checksum(model, "backbone")
        for step in range(10):
            training_step(model, random_images(2, seed=10 + step), seed=step)
        assert checksum(model, "backbone") == before

    def test_heads_change_on_step(self):
        model = make_model(seed=5)
        freeze_backbone(model)
        head_before = checksum(model, "f_box")
        training_step(model, random_images(2, seed=20))
        assert checksum(model, "f_box") != head_before

    def test_unfreeze_backbone_changes(self):
        model = make_model(seed=6)
        freeze_backbone(model)
        freeze_backbone(model, frozen=False)
        before = checksum(model, "backbone")
        training_step(model, random_images(2, seed=21))
        assert checksum(model, "backbone") != before


class TestSwapHead:
    def test_shape_change(self):
        model = make_model(seed=7)
        assert model.f_cat.out_features == 2
        swap_classifier_head(model, 4)
        assert model.f_cat.out_features == 4
        assert model.config.n_classes == 4

    def test_other_parameters_retained(self):
        model = make_model(seed=8)
        backbone = checksum(model, "backbone")
        encoder = checksum(model, "encoder")
        swap_classifier_head(model, 21)  # 20-class dataset + background
        assert checksum(model, "backbone") == backbone
        assert checksum(model, "encoder") == encoder
        assert model.f_cat.out_features == 21

    def test_too_few_classes(self):
        with pytest.raises(ConfigError):
            swap_classifier_head(make_model(), 1)


class TestPermutationEquivariance:
    def test_permuting_queries_permutes_rows(self):
        model = make_model(seed=9).eval()
        images = prepare_images(random_images(1, seed=5))
        perm = torch.randperm(model.config.n_queries, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            base = model(images)[0]
            model.query_embed.copy_(model.query_embed[perm])
            permuted = model(images)[0]
        torch.testing.assert_close(permuted.boxes, base.boxes[perm], rtol=0, atol=1e-5)
        torch.testing.assert_close(
            permuted.class_logits, base.class_logits[perm], rtol=0, atol=1e-5
        )


class TestSnapshots:
    def test_roundtrip_reproduces_forward(self):
        model = make_model(seed=10)
        snap = parameter_snapshot(model, step=7)
        other = make_model(seed=11)
        load_snapshot(other, snap)
        images = prepare_images(random_images(2, seed=6))
        with torch.no_grad():
            a = model.eval()(images)
            b = other.eval()(images)
        for x, y in zip(a, b):
            assert torch.equal(x.boxes, y.boxes)

    def test_shape_mismatch_rejected(self):
        snap = parameter_snapshot(make_model(seed=12))
        other = make_model(TINY, seed=13)
        snap.tensors["f_cat.weight"] = np.zeros((3, 16), dtype=np.float32)
        with pytest.raises(ConfigError):
            load_snapshot(other, snap)


class TestGradientCorrectness:
    def test_sampled_parameters_match_finite_differences(self):
        """Spot-check version of the full per-parameter sweep in acceptance."""
        torch.manual_seed(14)
        model = make_model(dtype=torch.float64)
        images = prepare_images(random_images(1, size=32, seed=7), dtype=torch.float64)
        g = torch.Generator().manual_seed(15)
        boxes = torch.rand(3, 4, generator=g, dtype=torch.float64) * 0.4 + 0.2
        emb = torch.randn(3, model.config.emb_dim, generator=g, dtype=torch.float64)

        def loss_value(fixed_match=None):
            out = model(images)[0]
            targets = pad_targets(boxes, model.config.n_queries, embeddings=emb)
            breakdown, match = total_loss(
                targets, out, LossWeights(), fixed_match=fixed_match
            )
            return breakdown.total, match

        loss, match = loss_value()
        model.zero_grad()
        loss.backward()
        h = 1e-5
        rng = np.random.default_rng(16)
        params = [p for p in model.parameters() if p.requires_grad]
        for _ in range(60):
            p = params[rng.integers(len(params))]
            idx = int(rng.integers(p.numel()))
            flat = p.data.view(-1)
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                up, _ = loss_value(fixed_match=match)
                flat[idx] = orig - h
                down, _ = loss_value(fixed_match=match)
                flat[idx] = orig
            fd = (float(up) - float(down)) / (2 * h)
            analytic = float(p.grad.view(-1)[idx])
            assert abs(fd - analytic) <= 1e-4 * max(abs(fd), abs(analytic), 1e-4)
