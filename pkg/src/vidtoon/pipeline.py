"""Command-line interface and the video stylization path.

Subcommands: teacher-build, datagen, pretrain, train, stylize, probe,
smooth-parsing, eval-temporal.  Every command accepts --config pointing at
a JSON file whose keys mirror the flags; explicit flags win.  Unknown
config keys are rejected and all validation problems are reported at once.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

import argparse
import json
import os
import re
import sys

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .datagen import (make_collection_pair, make_exemplar_pair, pseudo_parse,
                      style_pool)
from .encoder import ContentEncoder, EncoderConfig, load_modres_from_teacher
from .errors import CheckpointError, ConfigError, InputError
from .losses import LossWeights
from .model import VidToonModel, assemble, output_size
from .probe import PROBE_KINDS, run_probe, write_report
from .teacher import (GeneratorConfig, StyleCode, build_toy_teacher, embed,
                      load_teacher, sample_style_code, save_teacher)
from .temporal import (SmoothingParams, all_ones_occlusions, smooth_parsing,
                       synth_pan_sequence, warp_error)
from .trainer import (TrainingSetting, load_checkpoint, pretrain_encoder,
                      save_checkpoint, train)

FRAME_RE = re.compile(r"^(\d+)\.png$")


# --- frame I/O ---------------------------------------------------------------


def load_frames(frames_dir: str):
    """Numbered PNGs as a list of (3, H, W) tensors in [-1, 1]."""
    from PIL import Image
    if not os.path.isdir(frames_dir):
        raise InputError(f"frames directory not found: {frames_dir}")
    entries = []
    for name in os.listdir(frames_dir):
        m = FRAME_RE.match(name)
        if m:
            entries.append((int(m.group(1)), name))
    if not entries:
        raise InputError(f"no numbered .png frames in {frames_dir}")
    frames = []
    size = None
    for _, name in sorted(entries):
        arr = np.asarray(Image.open(os.path.join(frames_dir, name)).convert("RGB"))
        t = torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 127.5 - 1
        if size is None:
            size = t.shape
        elif t.shape != size:
            raise InputError(f"frame {name} has size {tuple(t.shape)}, "
                             f"expected {tuple(size)}")
        frames.append(t)
    return frames


def save_frames(frames, out_dir: str):
    from PIL import Image
    os.makedirs(out_dir, exist_ok=True)
    for i, f in enumerate(frames):
        arr = f.clamp(-1, 1).add(1).mul(127.5).byte().permute(1, 2, 0).numpy()
        Image.fromarray(arr).save(os.path.join(out_dir, f"{i:06d}.png"))


# --- stylization -------------------------------------------------------------


def _center_embed(bundle, frame):
    """Embed the square center crop of a frame at the embedder's input size."""
    _, h, w = frame.shape
    side = min(h, w)
    y0, x0 = (h - side) // 2, (w - side) // 2
    crop = frame[:, y0:y0 + side, x0:x0 + side]
    res = bundle.config.embed_resolution
    crop = F.interpolate(crop[None], size=(res, res), mode="bilinear",
                         align_corners=False)[0]
    return embed(bundle.embedder, crop)


def build_inference_code(bundle, frame0, variant: str, style: StyleCode = None,
                         d_c: float = 1.0) -> StyleCode:
    """Per-sequence style code: frame 0 is embedded once; the exemplar
    variant takes structure rows from the exemplar and interpolates the
    color rows between exemplar (d_c=0) and content (d_c=1)."""
    w_int = _center_embed(bundle, frame0)
    if variant == "T":
        return w_int
    if style is None:
        raise ConfigError("exemplar stylization requires a style code")
    cut = bundle.config.entry_layer - 1
    vecs = style.vectors.clone()
    vecs[cut:] = (1 - d_c) * style.vectors[cut:] + d_c * w_int.vectors[cut:]
    return StyleCode(vecs, style.entry_layer)


def stylize_video(model: VidToonModel, frames, bundle, d_s: float = None,
                  d_c: float = 1.0, style: StyleCode = None):
    """Stylize a sequence frame by frame with one shared style code."""
    if not frames:
        raise InputError("empty frame sequence")
    output_size(frames[0].shape[-1], frames[0].shape[-2])
    code = build_inference_code(bundle, frames[0], model.variant, style, d_c)
    out = []
    kw = {} if model.variant == "T" else {"d_s": 1.0 if d_s is None else d_s}
    with torch.no_grad():
        for f in frames:
            x = torch.cat([f, pseudo_parse(f)], dim=0)
            out.append(model(x[None], code, **kw)[0])
    return out


# --- config plumbing ---------------------------------------------------------


class _Arg:
    def __init__(self, name, type_, default=None, required=False, help_=""):
        self.name, self.type, self.default = name, type_, default
        self.required, self.help = required, help_


def _parse_int_pair(s):
    parts = [int(v) for v in str(s).split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated integers, got {s!r}")
    return tuple(parts)


COMMANDS = {
    "teacher-build": [
        _Arg("seed", int, 0), _Arg("regime", str, "random"),
        _Arg("out", str, required=True)],
    "datagen": [
        _Arg("teacher", str, required=True), _Arg("setting", str, "T"),
        _Arg("count", int, 8), _Arg("seed", int, 0),
        _Arg("out", str, required=True)],
    "pretrain": [
        _Arg("teacher", str, required=True), _Arg("setting", str, "T"),
        _Arg("iterations", int, None), _Arg("seed", int, 0),
        _Arg("out", str, required=True), _Arg("log", str, None)],
    "train": [
        _Arg("teacher", str, required=True), _Arg("setting", str, "T"),
        _Arg("encoder", str, None), _Arg("iterations", int, None),
        _Arg("pretrain_iterations", int, None),
        _Arg("seed", int, 0), _Arg("lambda_tmp", float, None),
        _Arg("checkpoint_every", int, 200),
        _Arg("out", str, required=True)],
    "stylize": [
        _Arg("checkpoint", str, required=True),
        _Arg("teacher", str, required=True),
        _Arg("frames", str, required=True), _Arg("out", str, required=True),
        _Arg("ds", float, 1.0), _Arg("dc", float, 1.0),
        _Arg("style", int, 0), _Arg("style_code", str, None)],
    "probe": [
        _Arg("teacher", str, required=True), _Arg("kind", str, "translate"),
        _Arg("offset", int, None), _Arg("angle", float, None),
        _Arg("layer", int, None), _Arg("from_layer", int, None),
        _Arg("seed", int, 0), _Arg("code_seed", int, 42),
        _Arg("out", str, required=True)],
    "smooth-parsing": [
        _Arg("frames", str, required=True), _Arg("out", str, required=True),
        _Arg("k", int, 5), _Arg("sigma_t", float, 5.5),
        _Arg("sigma_s", float, 0.2), _Arg("velocity", str, "0,0")],
    "eval-temporal": [
        _Arg("frames", str, required=True), _Arg("velocity", str, "0,0"),
        _Arg("out", str, None)],
}


def _resolve_config(command: str, ns: argparse.Namespace):
    """Merge config file and flags (flags win); return (opts, error list)."""
    schema = {a.name: a for a in COMMANDS[command]}
    errors = []
    opts = {n: a.default for n, a in schema.items()}
    if ns.config:
        try:
            with open(ns.config) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            return None, [f"cannot read config file {ns.config}: {e}"]
        if not isinstance(file_cfg, dict):
            return None, [f"config file {ns.config} must hold a JSON object"]
        for k, v in file_cfg.items():
            if k not in schema:
                errors.append(f"unknown config key {k!r}")
                continue
            try:
                opts[k] = schema[k].type(v)
            except (TypeError, ValueError):
                errors.append(f"config key {k!r}: cannot parse {v!r} as "
                              f"{schema[k].type.__name__}")
    for name in schema:
        val = getattr(ns, name.replace("-", "_"), None)
        if val is not None:
            opts[name] = val
    for name, a in schema.items():
        if a.required and opts[name] is None:
            errors.append(f"missing required option --{name.replace('_', '-')}")
    return opts, errors


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="vidtoon",
        description="Portrait video toonification at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, args in COMMANDS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None,
                       help="JSON file with option values; flags override it")
        for a in args:
            p.add_argument(f"--{a.name.replace('_', '-')}",
                           dest=a.name, type=a.type, default=None, help=a.help)
    return parser


# --- command bodies ----------------------------------------------------------


def _cmd_teacher_build(o):
    bundle = build_toy_teacher(GeneratorConfig(), o["seed"], o["regime"])
    save_teacher(bundle, o["out"])
    print(f"teacher written to {o['out']} (fit_error {bundle.fit_error:.3f})")
    return 0


def _cmd_datagen(o):
    bundle = load_teacher(o["teacher"])
    setting = TrainingSetting.from_suffix(o["setting"])
    pool = style_pool(bundle) if setting.variant == "D" else None
    arrays, manifest = {}, {"bundle_seed": bundle.seed, "count": o["count"],
                            "setting": o["setting"], "seeds": []}
    for i in range(o["count"]):
        seed = o["seed"] * 1000003 + i
        if setting.variant == "T":
            pair = make_collection_pair(bundle, seed)
        else:
            gen = torch.Generator().manual_seed(seed)
            d_s = torch.rand((), generator=gen).item() \
                if setting.sample_degree else 1.0
            idx = int(torch.randint(0, len(pool), (), generator=gen)) \
                if setting.sample_style else 0
            d_c = 1.0 if setting.color_jitter else 0.0
            pair = make_exemplar_pair(bundle, pool[idx], d_s, d_c,
                                      setting.color_jitter, seed)
        arrays[f"pair{i:05d}/x"] = pair.x.numpy()
        arrays[f"pair{i:05d}/y"] = pair.y.numpy()
        arrays[f"pair{i:05d}/w"] = pair.code.vectors.numpy()
        manifest["seeds"].append(seed)
    manifest["kind"] = "corpus"
    ckpt.save_archive(o["out"], arrays, manifest)
    print(f"{o['count']} pairs written to {o['out']}")
    return 0


def _encoder_for(bundle, setting, seed):
    ecfg = EncoderConfig.from_generator(bundle.config)
    enc = ContentEncoder(ecfg, torch.Generator().manual_seed(seed))
    if setting.variant == "D":
        load_modres_from_teacher(enc, bundle)
    return enc


def _cmd_pretrain(o):
    bundle = load_teacher(o["teacher"])
    setting = TrainingSetting.from_suffix(o["setting"], seed=o["seed"])
    enc = _encoder_for(bundle, setting, o["seed"])
    curve = pretrain_encoder(enc, bundle, setting, o["iterations"],
                             log_path=o["log"])
    arrays = ckpt.state_dict_to_arrays(enc, "encoder/")
    import dataclasses
    ckpt.save_archive(o["out"], arrays,
                      {"kind": "encoder",
                       "encoder": dataclasses.asdict(enc.config),
                       "setting": o["setting"], "seed": o["seed"],
                       "iterations": len(curve),
                       "final_loss": curve[-1] if curve else None})
    print(f"encoder written to {o['out']} "
          f"({len(curve)} iterations, final loss "
          f"{curve[-1]:.4f})" if curve else f"encoder written to {o['out']}")
    return 0


def load_pretrained_encoder(path: str) -> ContentEncoder:
    arrays, config = ckpt.load_archive(path)
    if config.get("kind") != "encoder":
        raise CheckpointError(f"{path} is not an encoder checkpoint")
    e = dict(config["encoder"])
    for key in ("stage_widths", "modres_dilations", "modres_style_rows"):
        e[key] = tuple(e[key])
    enc = ContentEncoder(EncoderConfig(**e), torch.Generator().manual_seed(0))
    ckpt.load_arrays_into(enc, arrays, "encoder/")
    return enc


def _cmd_train(o):
    bundle = load_teacher(o["teacher"])
    weights = LossWeights() if o["lambda_tmp"] is None \
        else LossWeights(lambda_tmp=o["lambda_tmp"])
    kwargs = {"seed": o["seed"], "weights": weights,
              "checkpoint_every": o["checkpoint_every"]}
    if o["iterations"] is not None:
        kwargs["iterations"] = o["iterations"]
    if o["pretrain_iterations"] is not None:
        kwargs["pretrain_iterations"] = o["pretrain_iterations"]
    setting = TrainingSetting.from_suffix(o["setting"], **kwargs)
    if o["encoder"]:
        enc = load_pretrained_encoder(o["encoder"])
    else:
        enc = _encoder_for(bundle, setting, o["seed"])
        pretrain_encoder(enc, bundle, setting)
    model = assemble(bundle, enc, setting.variant)
    result = train(model, bundle, setting, o["out"])
    print(f"trained {setting.suffix} for {result['iterations']} iterations; "
          f"checkpoint {result['checkpoint']}")
    return 0


def _load_style(o, bundle):
    if o["style_code"]:
        arrays, config = ckpt.load_archive(o["style_code"])
        return StyleCode(torch.from_numpy(arrays["code"].copy()),
                         bundle.config.entry_layer)
    pool = style_pool(bundle)
    if not 0 <= o["style"] < len(pool):
        raise ConfigError(f"style index {o['style']} outside the pool "
                          f"of {len(pool)}")
    return pool[o["style"]]


def _cmd_stylize(o):
    bundle = load_teacher(o["teacher"])
    model, _ = load_checkpoint(o["checkpoint"])
    frames = load_frames(o["frames"])
    style = _load_style(o, bundle) if model.variant == "D" else None
    out = stylize_video(model, frames, bundle,
                        d_s=o["ds"] if model.variant == "D" else None,
                        d_c=o["dc"], style=style)
    save_frames(out, o["out"])
    print(f"{len(out)} frames written to {o['out']}")
    return 0


def _cmd_probe(o):
    bundle = load_teacher(o["teacher"])
    if o["kind"] not in PROBE_KINDS:
        raise ConfigError(f"unknown probe kind {o['kind']!r}; "
                          f"expected one of {PROBE_KINDS}")
    params = {"seed": o["seed"]}
    for key in ("offset", "angle", "layer", "from_layer"):
        if o[key] is not None:
            params[key] = o[key]
    w = sample_style_code(bundle.config, o["code_seed"])
    report = run_probe(bundle, o["kind"], params, w)
    write_report(report, o["out"])
    print(f"{o['kind']}: interior error {report.interior_error:.6f} "
          f"(report in {o['out']})")
    return 0


def _cmd_smooth_parsing(o):
    frames = [f[None] for f in load_frames(o["frames"])]
    velocity = _parse_int_pair(o["velocity"])
    params = SmoothingParams(k=o["k"], sigma_t=o["sigma_t"],
                             sigma_s=o["sigma_s"])
    parsings = [pseudo_parse(f) for f in frames]

    def flow_fn(j, i):
        f = torch.zeros(1, 2, *frames[0].shape[-2:])
        f[:, 0] = (j - i) * velocity[0]
        f[:, 1] = (j - i) * velocity[1]
        return f

    smoothed = smooth_parsing(frames, parsings, flow_fn,
                              all_ones_occlusions(frames), params)
    arrays = {f"parsing{i:05d}": p[0].numpy() for i, p in enumerate(smoothed)}
    ckpt.save_archive(o["out"], arrays,
                      {"kind": "parsings", "count": len(smoothed),
                       "k": params.k, "sigma_t": params.sigma_t,
                       "sigma_s": params.sigma_s})
    print(f"{len(smoothed)} smoothed parsing maps written to {o['out']}")
    return 0


def _cmd_eval_temporal(o):
    frames = [f[None] for f in load_frames(o["frames"])]
    velocity = _parse_int_pair(o["velocity"])

    def flow_fn(j, i):
        f = torch.zeros(1, 2, *frames[0].shape[-2:])
        f[:, 0] = (j - i) * velocity[0]
        f[:, 1] = (j - i) * velocity[1]
        return f

    err = warp_error(frames, flow_fn, all_ones_occlusions(frames))
    line = json.dumps({"warp_error": err, "frames": len(frames),
                       "velocity": list(velocity)})
    if o["out"]:
        with open(o["out"], "w") as f:
            f.write(line + "\n")
    print(line)
    return 0


_BODIES = {
    "teacher-build": _cmd_teacher_build,
    "datagen": _cmd_datagen,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "stylize": _cmd_stylize,
    "probe": _cmd_probe,
    "smooth-parsing": _cmd_smooth_parsing,
    "eval-temporal": _cmd_eval_temporal,
}


def run_command(argv) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    opts, errors = _resolve_config(ns.command, ns)
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        return _BODIES[ns.command](opts)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
