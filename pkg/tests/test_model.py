"""Composed student: identity init, equivariance, size handling, variants."""

import pytest
import torch
import torch.nn.functional as F

from vidtoon.datagen import pseudo_parse
from vidtoon.encoder import ContentEncoder, EncoderConfig
from vidtoon.errors import ShapeError
from vidtoon.model import MIN_INPUT_SIDE, assemble, output_size
from vidtoon.teacher import (NOISE_OFF, mid_feature, sample_style_code,
                             synthesize)


def _encoder(bundle, seed=0):
    cfg = EncoderConfig.from_generator(bundle.config)
    return ContentEncoder(cfg, torch.Generator().manual_seed(seed))


def _input(w, h, seed=0):
    gen = torch.Generator().manual_seed(seed)
    img = torch.rand(1, 3, h, w, generator=gen) * 2 - 1
    return torch.cat([img, pseudo_parse(img)], dim=1)


class TestOutputSize:
    def test_scaling(self):
        assert output_size(64, 64) == (256, 256)
        assert output_size(96, 72) == (384, 288)

    def test_divisibility(self):
        with pytest.raises(ShapeError):
            output_size(68, 64)

    def test_minimum(self):
        with pytest.raises(ShapeError):
            output_size(MIN_INPUT_SIDE - 8, 64)


class TestIdentityAtInit:
    def test_teacher_feature_injection(self, bundle):
        """With the teacher's own entry feature overriding the encoder
        content, the freshly assembled student reproduces the teacher's
        noiseless render."""
        model = assemble(bundle, _encoder(bundle), "T")
        w = sample_style_code(bundle.config, seed=3)
        feat = mid_feature(bundle.g1, w, bundle.config.entry_layer, NOISE_OFF)
        ref = synthesize(bundle.g1, w, NOISE_OFF)
        x = _input(64, 64)
        with torch.no_grad():
            out = model(x, w, content_override=feat)
        assert float((out[0] - ref).abs().max()) < 1e-4

    def test_exemplar_variant_head(self, bundle):
        model = assemble(bundle, _encoder(bundle), "D")
        w = sample_style_code(bundle.config, seed=4)
        base = bundle.g1x.base
        feat = mid_feature(base, w, bundle.config.entry_layer, NOISE_OFF)
        ref = synthesize(base, w, NOISE_OFF)
        with torch.no_grad():
            out = model(_input(64, 64), w, d_s=0.0, content_override=feat)
        assert float((out[0] - ref).abs().max()) < 1e-4


class TestEquivariance:
    def test_input_shift_shifts_output(self, bundle):
        """An 8-px input shift produces a 32-px output shift on the interior.

        Two windows of one wide image differ by a pure translation, so their
        outputs must agree on the overlap outside the border receptive cone
        (encoder reach ~320 output px plus head reach ~94, rounded up)."""
        model = assemble(bundle, _encoder(bundle), "T")
        w = sample_style_code(bundle.config, seed=5)
        gen = torch.Generator().manual_seed(1)
        img = torch.rand(1, 3, 96, 296, generator=gen) * 2 - 1
        shift = 8

        def inp(t):
            return torch.cat([t, pseudo_parse(t)], dim=1)

        with torch.no_grad():
            a = model(inp(img[..., 0:288]), w)
            b = model(inp(img[..., shift:288 + shift]), w)
        ov_a = a[..., 4 * shift:]
        ov_b = b[..., :ov_a.shape[-1]]
        band = 420
        err = float((ov_a - ov_b)[..., band:-band].abs().max())
        assert err < 1e-3


class TestSizeContracts:
    @pytest.mark.parametrize("wh", [(64, 64), (96, 72), (128, 128)])
    def test_output_is_4x(self, bundle, wh):
        model = assemble(bundle, _encoder(bundle), "T")
        w = sample_style_code(bundle.config, seed=6)
        x = _input(*wh)
        with torch.no_grad():
            out = model(x, w)
        assert out.shape == (1, 3, 4 * wh[1], 4 * wh[0])
        assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0

    def test_same_weights_all_sizes(self, bundle):
        model = assemble(bundle, _encoder(bundle), "T")
        w = sample_style_code(bundle.config, seed=6)
        with torch.no_grad():
            model(_input(64, 64), w)
            model(_input(96, 72), w)  # no re-assembly, no error

    def test_rejects_bad_sizes(self, bundle):
        model = assemble(bundle, _encoder(bundle), "T")
        w = sample_style_code(bundle.config, seed=6)
        with pytest.raises(ShapeError):
            model(_input(60, 64), w)


class TestVariants:
    def test_t_rejects_degree(self, bundle):
        model = assemble(bundle, _encoder(bundle), "T")
        w = sample_style_code(bundle.config, seed=7)
        with pytest.raises(ShapeError):
            model(_input(64, 64), w, d_s=0.5)

    def test_d_requires_degree(self, bundle):
        model = assemble(bundle, _encoder(bundle), "D")
        w = sample_style_code(bundle.config, seed=7)
        with pytest.raises(ShapeError):
            model(_input(64, 64), w)

    def test_d_returns_masks(self, bundle):
        model = assemble(bundle, _encoder(bundle), "D")
        w = sample_style_code(bundle.config, seed=7)
        with torch.no_grad():
            out, masks = model(_input(64, 64), w, d_s=0.5, return_masks=True)
        assert len(masks) == 4
        for m in masks:
            assert m.shape[1] == 1
            assert torch.all(m >= 0) and torch.all(m <= 1)

    def test_unknown_variant(self, bundle):
        with pytest.raises(ShapeError):
            assemble(bundle, _encoder(bundle), "Q")

    def test_channel_mismatch_rejected(self, bundle):
        cfg = EncoderConfig.from_generator(bundle.config)
        import dataclasses
        bad_cfg = dataclasses.replace(cfg, content_channels=cfg.content_channels + 1)
        bad = ContentEncoder(bad_cfg, torch.Generator().manual_seed(0))
        with pytest.raises(ShapeError):
            assemble(bundle, bad, "T")


class TestParameters:
    def test_head_frozen_under_training_params(self, bundle):
        model = assemble(bundle, _encoder(bundle), "T")
        trainable = {id(p) for p in model.trainable_parameters()}
        for p in model.head.parameters():
            assert id(p) not in trainable
        for p in model.encoder.parameters():
            assert id(p) in trainable
        for p in model.fusion.parameters():
            assert id(p) in trainable

    def test_style_code_and_batched_w(self, bundle):
        model = assemble(bundle, _encoder(bundle), "T")
        w = sample_style_code(bundle.config, seed=8)
        x = torch.cat([_input(64, 64, seed=1), _input(64, 64, seed=2)], dim=0)
        with torch.no_grad():
            out1 = model(x, w)
            out2 = model(x, w.vectors[None].expand(2, -1, -1))
        assert torch.equal(out1, out2)

    def test_deterministic(self, bundle):
        model = assemble(bundle, _encoder(bundle), "T")
        w = sample_style_code(bundle.config, seed=9)
        x = _input(64, 64)
        with torch.no_grad():
            assert torch.equal(model(x, w), model(x, w))
