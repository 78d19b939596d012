"""CLI plumbing and the video stylization path.

Uses the cached teacher checkpoint and a tiny trained student; heavier
end-to-end flows live in the acceptance suite.
"""

import json
import os

import numpy as np
import pytest
import torch
from PIL import Image

from vidtoon import checkpoint as ckpt
from vidtoon.encoder import ContentEncoder, EncoderConfig
from vidtoon.errors import InputError
from vidtoon.model import assemble
from vidtoon.pipeline import (build_inference_code, load_frames,
                              run_command, save_frames, stylize_video)
from vidtoon.datagen import style_pool
from vidtoon.teacher import sample_style_code, synthesize, noise_fixed
from vidtoon.trainer import TrainingSetting, save_checkpoint


@pytest.fixture(scope="module")
def frames_dir(tmp_path_factory, bundle):
    """Six 64x64 frames cut from one teacher render."""
    d = tmp_path_factory.mktemp("frames")
    w = sample_style_code(bundle.config, seed=7)
    img = synthesize(bundle.g0, w, noise_fixed(3))
    frames = [img[..., 8 * t:8 * t + 64, 8 * t:8 * t + 64] for t in range(6)]
    save_frames(frames, str(d))
    return str(d)


@pytest.fixture(scope="module")
def student_ckpt(tmp_path_factory, bundle):
    d = tmp_path_factory.mktemp("student")
    path = os.path.join(str(d), "student.ckpt")
    ecfg = EncoderConfig.from_generator(bundle.config)
    enc = ContentEncoder(ecfg, torch.Generator().manual_seed(0))
    model = assemble(bundle, enc, "T")
    save_checkpoint(path, model, TrainingSetting.from_suffix("T"))
    return path


class TestFrameIO:
    def test_round_trip(self, tmp_path):
        frames = [torch.rand(3, 32, 40) * 2 - 1 for _ in range(3)]
        save_frames(frames, str(tmp_path / "f"))
        back = load_frames(str(tmp_path / "f"))
        assert len(back) == 3
        for a, b in zip(frames, back):
            assert float((a - b).abs().max()) < 1 / 127.5 + 1e-6

    def test_ordering_by_number(self, tmp_path):
        d = tmp_path / "f"
        os.makedirs(d)
        for i, v in ((2, 200), (0, 0), (10, 100)):
            Image.fromarray(np.full((8, 8, 3), v, np.uint8)).save(
                d / f"{i}.png")
        back = load_frames(str(d))
        means = [float(f.mean()) for f in back]
        assert means == sorted(means, key=lambda m: [0, 200, 100].index(
            round((m + 1) * 127.5)))

    def test_missing_dir(self, tmp_path):
        with pytest.raises(InputError):
            load_frames(str(tmp_path / "nope"))

    def test_no_frames(self, tmp_path):
        os.makedirs(tmp_path / "f")
        open(tmp_path / "f" / "readme.txt", "w").write("x")
        with pytest.raises(InputError):
            load_frames(str(tmp_path / "f"))

    def test_size_drift_rejected(self, tmp_path):
        d = tmp_path / "f"
        os.makedirs(d)
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(d / "0.png")
        Image.fromarray(np.zeros((8, 16, 3), np.uint8)).save(d / "1.png")
        with pytest.raises(InputError):
            load_frames(str(d))


class TestInferenceCode:
    def test_t_code_from_first_frame(self, bundle):
        frame = torch.rand(3, 64, 64) * 2 - 1
        code = build_inference_code(bundle, frame, "T")
        assert code.vectors.shape == (bundle.config.layer_count,
                                      bundle.config.latent_dim)

    def test_d_color_interpolation(self, bundle):
        frame = torch.rand(3, 64, 64) * 2 - 1
        style = style_pool(bundle, 1)[0]
        cut = bundle.config.entry_layer - 1
        c0 = build_inference_code(bundle, frame, "D", style, d_c=0.0)
        c1 = build_inference_code(bundle, frame, "D", style, d_c=1.0)
        assert torch.allclose(c0.vectors[cut:], style.vectors[cut:], atol=1e-6)
        assert torch.equal(c0.vectors[:cut], style.vectors[:cut])
        assert torch.equal(c1.vectors[:cut], style.vectors[:cut])
        assert not torch.allclose(c0.vectors[cut:], c1.vectors[cut:])


class TestStylizeVideo:
    def test_output_sizes_and_determinism(self, bundle):
        ecfg = EncoderConfig.from_generator(bundle.config)
        enc = ContentEncoder(ecfg, torch.Generator().manual_seed(0))
        model = assemble(bundle, enc, "T")
        frames = [torch.rand(3, 72, 96) * 2 - 1 for _ in range(2)]
        out = stylize_video(model, frames, bundle)
        assert all(o.shape == (3, 288, 384) for o in out)
        out2 = stylize_video(model, frames, bundle)
        for a, b in zip(out, out2):
            assert torch.equal(a, b)

    def test_identical_frames_identical_outputs(self, bundle):
        ecfg = EncoderConfig.from_generator(bundle.config)
        enc = ContentEncoder(ecfg, torch.Generator().manual_seed(0))
        model = assemble(bundle, enc, "T")
        f = torch.rand(3, 64, 64) * 2 - 1
        out = stylize_video(model, [f, f.clone(), f.clone()], bundle)
        assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])

    def test_empty_sequence(self, bundle):
        ecfg = EncoderConfig.from_generator(bundle.config)
        enc = ContentEncoder(ecfg, torch.Generator().manual_seed(0))
        model = assemble(bundle, enc, "T")
        with pytest.raises(InputError):
            stylize_video(model, [], bundle)


class TestCLI:
    def test_unknown_command(self):
        assert run_command(["frobnicate"]) == 2

    def test_missing_required_is_config_error(self, capsys):
        rc = run_command(["probe"])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_config_file_merge_and_flag_priority(self, tmp_path, teacher_ckpt):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"frames": "ignored-by-flag",
                                   "velocity": "1,0"}))
        d = tmp_path / "frames"
        save_frames([torch.zeros(3, 16, 16) for _ in range(2)], str(d))
        rc = run_command(["eval-temporal", "--config", str(cfg),
                          "--frames", str(d)])
        assert rc == 0

    def test_unknown_config_keys_enumerated(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus": 1, "wrong": 2, "frames": "x"}))
        rc = run_command(["eval-temporal", "--config", str(cfg)])
        assert rc == 2
        err = capsys.readouterr().err
        assert "bogus" in err and "wrong" in err

    def test_runtime_error_exit_code(self, tmp_path):
        rc = run_command(["eval-temporal", "--frames",
                          str(tmp_path / "missing")])
        assert rc == 3

    def test_probe_command(self, tmp_path, teacher_ckpt):
        out = str(tmp_path / "probe")
        rc = run_command(["probe", "--teacher", teacher_ckpt,
                          "--kind", "translate", "--offset", "32",
                          "--out", out])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "metrics.txt"))

    def test_datagen_command(self, tmp_path, teacher_ckpt):
        out = str(tmp_path / "pairs.ckpt")
        rc = run_command(["datagen", "--teacher", teacher_ckpt,
                          "--count", "2", "--out", out])
        assert rc == 0
        arrays, config = ckpt.load_archive(out)
        assert config["kind"] == "corpus" and config["count"] == 2
        assert arrays["pair00000/x"].shape[0] == 7

    def test_stylize_command(self, tmp_path, teacher_ckpt, student_ckpt,
                             frames_dir):
        out = str(tmp_path / "styled")
        rc = run_command(["stylize", "--checkpoint", student_ckpt,
                          "--teacher", teacher_ckpt,
                          "--frames", frames_dir, "--out", out])
        assert rc == 0
        outs = load_frames(out)
        assert len(outs) == 6 and outs[0].shape == (3, 256, 256)

    def test_stylize_idempotent(self, tmp_path, teacher_ckpt, student_ckpt,
                                frames_dir):
        o1, o2 = str(tmp_path / "s1"), str(tmp_path / "s2")
        for o in (o1, o2):
            assert run_command(["stylize", "--checkpoint", student_ckpt,
                                "--teacher", teacher_ckpt,
                                "--frames", frames_dir, "--out", o]) == 0
        for a, b in zip(load_frames(o1), load_frames(o2)):
            assert torch.equal(a, b)

    def test_smooth_parsing_command(self, tmp_path, frames_dir):
        out = str(tmp_path / "smoothed.ckpt")
        rc = run_command(["smooth-parsing", "--frames", frames_dir,
                          "--out", out, "--velocity", "8,8", "--k", "2"])
        assert rc == 0
        arrays, config = ckpt.load_archive(out)
        assert config["kind"] == "parsings" and config["count"] == 6
        p = arrays["parsing00000"]
        assert np.allclose(p.sum(axis=0), 1.0, atol=1e-4)

    def test_eval_temporal_command(self, tmp_path, frames_dir, capsys):
        out = str(tmp_path / "metrics.json")
        rc = run_command(["eval-temporal", "--frames", frames_dir,
                          "--velocity", "8,8", "--out", out])
        assert rc == 0
        rec = json.loads(open(out).read())
        assert rec["frames"] == 6
        # frames pan over a static render: ground-truth flow explains them
        assert rec["warp_error"] < 0.05
