import pytest
import torch

from vidtoon.errors import CheckpointError, ConfigError, ShapeError
from vidtoon.teacher import (NOISE_OFF, GeneratorConfig, StyleCode,
                             decode_from, embed, load_teacher, mid_feature,
                             mix_codes, noise_fixed, noise_translated,
                             sample_style_code, save_teacher, synthesize,
                             synthesize_exemplar, translate_map)


class TestGeneratorConfig:
    def test_default_geometry(self):
        cfg = GeneratorConfig()
        assert cfg.resolution == 256
        assert cfg.layer_count == 13
        assert cfg.resolution_table == (4, 8, 8, 16, 16, 32, 32, 64, 64,
                                        128, 128, 256, 256)
        assert cfg.entry_resolution == 8
        assert cfg.entry_layer == 3
        # head spans exactly the highest 11 layers
        assert cfg.layer_count - cfg.entry_layer + 1 == 11

    def test_channels_capped(self):
        cfg = GeneratorConfig()
        assert cfg.channels(8) == 48
        assert cfg.channels(32) == 48
        assert cfg.channels(64) == 24
        assert cfg.channels(256) == 6

    def test_layer_input_resolution(self):
        cfg = GeneratorConfig()
        assert cfg.layer_input_resolution(1) == 4
        assert cfg.layer_input_resolution(3) == 8
        assert cfg.layer_input_resolution(13) == 256

    def test_invalid_resolution_rejected(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(resolution=96)
        with pytest.raises(ConfigError):
            GeneratorConfig(resolution=64)


class TestStyleCode:
    def test_structure_color_split(self):
        cfg = GeneratorConfig()
        w = sample_style_code(cfg, 3)
        assert w.vectors.shape == (13, 64)
        assert w.structure_part.shape == (2, 64)
        assert w.color_part.shape == (11, 64)

    def test_sampling_deterministic(self):
        cfg = GeneratorConfig()
        a = sample_style_code(cfg, 7)
        b = sample_style_code(cfg, 7)
        assert torch.equal(a.vectors, b.vectors)

    def test_mix_codes_rows(self):
        cfg = GeneratorConfig()
        a, b = sample_style_code(cfg, 1), sample_style_code(cfg, 2)
        m = mix_codes(a, b)
        assert torch.equal(m.structure_part, a.structure_part)
        assert torch.equal(m.color_part, b.color_part)


class TestTranslateMap:
    def test_shifts_content(self):
        x = torch.arange(25.).view(1, 1, 5, 5)
        s = translate_map(x, 1, 0)
        assert torch.equal(s[..., 1:], x[..., :-1])
        s = translate_map(x, 0, -2)
        assert torch.equal(s[..., :-2, :], x[..., 2:, :])

    def test_zero_shift_identity(self):
        x = torch.rand(1, 2, 6, 6)
        assert translate_map(x, 0, 0) is x


class TestSynthesis:
    def test_shape_and_range(self, bundle):
        w = sample_style_code(bundle.config, 11)
        img = synthesize(bundle.g0, w)
        assert img.shape == (3, 256, 256)
        assert img.min() >= -1 and img.max() <= 1

    def test_noise_off_deterministic(self, bundle):
        w = sample_style_code(bundle.config, 11)
        assert torch.equal(synthesize(bundle.g0, w), synthesize(bundle.g0, w))

    def test_fixed_noise_deterministic(self, bundle):
        w = sample_style_code(bundle.config, 11)
        n = noise_fixed(123)
        assert torch.equal(synthesize(bundle.g0, w, n),
                           synthesize(bundle.g0, w, n))

    def test_mid_feature_decode_composes(self, bundle):
        w = sample_style_code(bundle.config, 5)
        for k in (3, 8):
            f = mid_feature(bundle.g0, w, k)
            out = decode_from(bundle.g0, f, w, k)
            assert torch.equal(out, synthesize(bundle.g0, w))

    def test_mid_feature_entry_shape(self, bundle):
        w = sample_style_code(bundle.config, 5)
        f = mid_feature(bundle.g0, w, bundle.config.entry_layer)
        assert f.shape == (48, 8, 8)

    def test_bad_code_shape_rejected(self, bundle):
        bad = StyleCode(torch.zeros(13, 32), 3)
        with pytest.raises(ShapeError):
            synthesize(bundle.g0, bad)

    def test_stylized_differs_from_source(self, bundle):
        w = sample_style_code(bundle.config, 5)
        a = synthesize(bundle.g0, w)
        b = synthesize(bundle.g1, w)
        assert (a - b).abs().mean() > 0.01


class TestNoiseModes:
    def test_translated_noise_shifts_decode(self, bundle):
        """Decoding a shifted feature with shifted noise equals shifting the
        fixed-noise decode, exactly on the interior."""
        cfg = bundle.config
        w = sample_style_code(cfg, 21)
        start = cfg.entry_layer
        f = mid_feature(bundle.g0, w, start, noise=NOISE_OFF, const_scale=3)
        ref = decode_from(bundle.g0, f, w, start, noise_fixed(9))
        shifted = translate_map(f[None], 1, 0)[0]
        test = decode_from(bundle.g0, shifted, w, start,
                           noise_translated(9, (32, 0)))
        ref_s = translate_map(ref[None], 32, 0)[0]
        assert torch.equal(test[..., 130:-130, 130:-130],
                           ref_s[..., 130:-130, 130:-130])


class TestExemplarGenerator:
    def test_zero_degrees_reproduce_source(self, bundle):
        w = sample_style_code(bundle.config, 31)
        s = sample_style_code(bundle.config, 32)
        out = synthesize_exemplar(bundle.g1x, w, s, d_s=0.0, d_c=0.0)
        assert torch.equal(out, synthesize(bundle.g0, w))

    def test_structure_degree_changes_output(self, bundle):
        w = sample_style_code(bundle.config, 31)
        s = sample_style_code(bundle.config, 32)
        a = synthesize_exemplar(bundle.g1x, w, s, d_s=0.0, d_c=0.0)
        b = synthesize_exemplar(bundle.g1x, w, s, d_s=1.0, d_c=0.0)
        assert (a - b).abs().mean() > 1e-3

    def test_degree_out_of_range(self, bundle):
        w = sample_style_code(bundle.config, 31)
        with pytest.raises(Exception):
            synthesize_exemplar(bundle.g1x, w, w, d_s=1.5, d_c=0.0)


class TestEmbedder:
    def test_fit_error_recorded(self, bundle):
        assert bundle.fit_error < float("inf")

    def test_embed_shape(self, bundle):
        w = sample_style_code(bundle.config, 2)
        img = synthesize(bundle.g0, w)
        code = embed(bundle.embedder,
                     torch.nn.functional.avg_pool2d(img[None], 4)[0])
        assert code.vectors.shape == (13, 64)

    def test_fit_error_matches_eval_protocol(self, bundle):
        gen = torch.Generator().manual_seed(bundle.embed_eval_seed)
        errs = []
        for _ in range(8):
            w = sample_style_code(bundle.config, gen)
            ref = synthesize(bundle.g0, w)
            code = embed(bundle.embedder,
                         torch.nn.functional.avg_pool2d(ref[None], 4)[0])
            rec = synthesize(bundle.g0, code)
            errs.append(float((rec - ref).norm()))
        assert max(errs) == pytest.approx(bundle.fit_error, rel=1e-5)


class TestBundleIO:
    def test_roundtrip_and_determinism(self, bundle, tmp_path):
        p1 = str(tmp_path / "t1.ckpt")
        p2 = str(tmp_path / "t2.ckpt")
        save_teacher(bundle, p1)
        save_teacher(bundle, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()
        b2 = load_teacher(p1)
        w = sample_style_code(bundle.config, 77)
        assert torch.equal(synthesize(bundle.g1, w), synthesize(b2.g1, w))
        assert b2.fit_error == pytest.approx(bundle.fit_error)
        assert set(b2.edit_directions) == set(bundle.edit_directions)

    def test_wrong_kind_rejected(self, tmp_path):
        from vidtoon import checkpoint as ckpt
        p = str(tmp_path / "x.ckpt")
        ckpt.save_archive(p, {}, {"kind": "other"})
        with pytest.raises(CheckpointError):
            load_teacher(p)

    def test_frozen(self, bundle):
        assert all(not p.requires_grad for p in bundle.g0.parameters())
        assert all(not p.requires_grad for p in bundle.embedder.parameters())
