"""Two-phase optimization: encoder pretraining, then adversarial training.

Settings follow the suffix scheme T / D / Ds / Dd / Dsd / Dsdc: 'T' is the
collection model, 'D' the exemplar model, with optional letters enabling
sampled exemplar styles ('s'), sampled structure degree plus the mask
budget loss ('d'), and color transfer via jittered inputs ('c').  All
randomness is counter-seeded per iteration, so runs are deterministic and
resume exactly.
"""

import dataclasses
import json
import math
import os

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .datagen import make_collection_pair, make_exemplar_pair, style_pool
from .encoder import ContentEncoder, EncoderConfig
from .errors import (CheckpointError, ConfigError, TrainingAbortedError,
                     TrainingDivergedError)
from .fusion import initialize_fusion
from .losses import (LOGIT_CLAMP, LossWeights, PerceptualNet, loss_mask,
                     loss_pretrain, loss_rec, loss_tmp, sample_crop,
                     total_loss)
from .model import VidToonModel, build_fusion_sites
from .nn_ops import ConvLayer
from .teacher import (GeneratorConfig, SynthesisLayer, TeacherBundle,
                      mid_feature, noise_fixed)

SETTING_SUFFIXES = ("T", "D", "Ds", "Dd", "Dsd", "Dsdc")


@dataclasses.dataclass
class TrainingSetting:
    suffix: str = "T"
    pretrain_iterations: int = 2000
    iterations: int = 1000
    batch_size: int = 4
    lr: float = 5e-4
    lr_disc: float = 2e-4
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 200
    log_window: int = 50
    # stability guards: R1 keeps the discriminator's decision surface smooth
    # (otherwise its logits pin at the clamp and feed the generator
    # pathological gradients), and clipping caps the rare gradient spikes
    # that can saturate the tanh output head through the frozen layer
    # cascade in a couple of steps
    r1_gamma: float = 10.0
    grad_clip: float = 50.0

    def __post_init__(self):
        if self.suffix not in SETTING_SUFFIXES:
            raise ConfigError(f"unknown setting suffix {self.suffix!r}, "
                              f"expected one of {SETTING_SUFFIXES}")

    @property
    def variant(self):
        return "T" if self.suffix == "T" else "D"

    @property
    def sample_style(self):
        return "s" in self.suffix[1:]

    @property
    def sample_degree(self):
        return "d" in self.suffix[1:]

    @property
    def color_jitter(self):
        return "c" in self.suffix[1:]

    @property
    def use_mask_loss(self):
        return self.sample_degree

    @classmethod
    def from_suffix(cls, suffix: str, **overrides) -> "TrainingSetting":
        return cls(suffix=suffix, **overrides)


def _iter_seed(seed: int, phase: str, i: int) -> int:
    tag = sum(ord(c) * 131 ** k for k, c in enumerate(phase))
    return (seed * 1000003 + i * 7919 + tag) % (2 ** 62)


class CondDiscriminator(nn.Module):
    """Five-block downsampling conv net with projection conditioning."""

    def __init__(self, gen: torch.Generator, in_ch: int = 3, cond_dim: int = 0,
                 widths=(16, 32, 48, 64, 64)):
        super().__init__()
        self.cond_dim = cond_dim
        blocks = []
        ch = in_ch
        for w in widths:
            blocks.append(ConvLayer(ch, w, gen, stride=2))
            ch = w
        self.blocks = nn.ModuleList(blocks)
        self.final = ConvLayer(ch, ch, gen)
        self.head = nn.Linear(ch, 1)
        with torch.no_grad():
            self.head.weight.normal_(0, 1.0 / math.sqrt(ch), generator=gen)
            self.head.bias.zero_()
        if cond_dim:
            self.proj = nn.Linear(cond_dim, ch, bias=False)
            with torch.no_grad():
                self.proj.weight.normal_(0, 1.0 / math.sqrt(cond_dim),
                                         generator=gen)

    def forward(self, img, condition=None):
        f = img
        for b in self.blocks:
            f = b(f)
        f = self.final(f).mean(dim=(2, 3))
        logit = self.head(f).squeeze(1)
        if condition is not None:
            if not self.cond_dim:
                raise ConfigError("discriminator built without conditioning")
            if condition.shape[0] == 1 and f.shape[0] > 1:
                condition = condition.expand(f.shape[0], -1)
            logit = logit + (self.proj(condition) * f).sum(dim=1)
        return logit


def build_condition(d_s: float, w: torch.Tensor) -> torch.Tensor:
    """Projection-conditioning vector: the structure degree next to the
    layer-averaged style code."""
    mean_w = w.mean(dim=1)
    d = torch.full((mean_w.shape[0], 1), float(d_s), dtype=mean_w.dtype)
    return torch.cat([d, mean_w], dim=1)


def _downsample4(x):
    return F.avg_pool2d(x, 4)


def _smoothed(vals, window):
    take = vals[-window:] if len(vals) >= window else vals
    return sum(take) / len(take)


def pretrain_encoder(encoder: ContentEncoder, bundle: TeacherBundle,
                     setting: TrainingSetting, iterations: int = None,
                     log_path: str = None):
    """Train the encoder so its content feature matches the source
    generator's entry-layer input for the same frame.  Returns the loss
    curve; iterations=0 leaves the encoder untouched."""
    iters = setting.pretrain_iterations if iterations is None else iterations
    if iters == 0:
        return []
    entry = bundle.config.entry_layer
    opt = torch.optim.Adam(encoder.parameters(), lr=setting.lr)
    curve = []
    initial = None
    bad_streak = 0
    log = open(log_path, "w") if log_path else None
    try:
        for i in range(iters):
            seed = _iter_seed(setting.seed, "pretrain", i)
            xs, targets = [], []
            for b in range(setting.batch_size):
                pair = make_collection_pair(bundle, seed + b, augment=False)
                xs.append(pair.x)
                noise = noise_fixed(pair.augment.noise_seed)
                # the parsing channels are ignored by the teacher target
                tgt = mid_feature(bundle.g0, pair.code, entry, noise=noise)
                targets.append(tgt)
            x = _downsample4(torch.stack(xs))
            target = torch.stack(targets)
            pyramid = encoder(x)
            loss = loss_pretrain(pyramid.content, target) / setting.batch_size
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(float(loss.detach()))
            if log:
                log.write(json.dumps({"iteration": i, "loss": curve[-1]}) + "\n")
            if not math.isfinite(curve[-1]):
                raise TrainingDivergedError(
                    f"pretrain loss became non-finite at iteration {i}")
            smoothed = _smoothed(curve, setting.log_window)
            if initial is None and len(curve) >= min(setting.log_window, iters):
                initial = smoothed
            if initial is not None and smoothed > 10 * initial:
                bad_streak += 1
                if bad_streak >= 100:
                    raise TrainingDivergedError(
                        f"pretrain loss {smoothed:.4g} stayed above 10x the "
                        f"initial {initial:.4g} for 100 iterations")
            else:
                bad_streak = 0
    finally:
        if log:
            log.close()
    return curve


def _make_batch(bundle, setting, pool, seed):
    """One seeded batch: stacked inputs, targets, codes, and degrees."""
    gen = torch.Generator().manual_seed(seed)
    if setting.variant == "T":
        d_s, d_c, s_code = None, 1.0, None
    else:
        s_idx = int(torch.randint(0, len(pool), (), generator=gen)) \
            if setting.sample_style else 0
        s_code = pool[s_idx]
        d_s = torch.rand((), generator=gen).item() if setting.sample_degree else 1.0
        d_c = 1.0 if setting.color_jitter else 0.0
    xs, ys, codes = [], [], []
    for b in range(setting.batch_size):
        if setting.variant == "T":
            pair = make_collection_pair(bundle, seed + 1 + b)
        else:
            pair = make_exemplar_pair(bundle, s_code, d_s, d_c,
                                      setting.color_jitter, seed + 1 + b)
        xs.append(pair.x)
        ys.append(pair.y)
        codes.append(pair.code.vectors)
    return torch.stack(xs), torch.stack(ys), torch.stack(codes), d_s, gen


def train(model: VidToonModel, bundle: TeacherBundle, setting: TrainingSetting,
          out_dir: str, iterations: int = None, discriminator=None,
          optimizers=None, start_iteration: int = 0, perceptual=None):
    """Alternating discriminator/generator optimization on pairs generated
    on the fly.  Writes line-delimited metrics and periodic checkpoints to
    ``out_dir``; a non-finite loss aborts with the last good checkpoint."""
    iters = setting.iterations if iterations is None else iterations
    os.makedirs(out_dir, exist_ok=True)
    model.setting_suffix = setting.suffix
    if model.variant != setting.variant:
        raise ConfigError(f"model variant {model.variant} does not match "
                          f"setting {setting.suffix}")
    if discriminator is None:
        dgen = torch.Generator().manual_seed(
            _iter_seed(setting.seed, "disc", 0))
        cond_dim = 0 if setting.variant == "T" \
            else 1 + bundle.config.latent_dim
        discriminator = CondDiscriminator(dgen, cond_dim=cond_dim)
    if optimizers is None:
        opt_g = torch.optim.Adam(model.trainable_parameters(), lr=setting.lr)
        opt_d = torch.optim.Adam(discriminator.parameters(), lr=setting.lr_disc)
    else:
        opt_g, opt_d = optimizers
    if perceptual is None:
        perceptual = PerceptualNet()
    pool = style_pool(bundle) if setting.variant == "D" else None
    weights = setting.weights
    last_good = None
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    mode = "a" if start_iteration else "w"
    with open(metrics_path, mode) as log:
        for i in range(start_iteration, iters):
            seed = _iter_seed(setting.seed, "train", i)
            x_full, y, w, d_s, gen = _make_batch(bundle, setting, pool, seed)
            x = _downsample4(x_full)
            cond = None if setting.variant == "T" else build_condition(d_s, w)

            if setting.variant == "D":
                y_hat, masks = model(x, w, d_s=d_s, return_masks=True)
            else:
                y_hat, masks = model(x, w), []
            y_real = y.detach().requires_grad_(setting.r1_gamma > 0)
            lr_ = discriminator(y_real, cond).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
            lf = discriminator(y_hat.detach(), cond).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
            loss_d = F.softplus(-lr_).mean() + F.softplus(lf).mean()
            if setting.r1_gamma > 0:
                (grad_real,) = torch.autograd.grad(
                    lr_.sum(), y_real, create_graph=True)
                r1 = grad_real.pow(2).sum(dim=(1, 2, 3)).mean()
                loss_d = loss_d + 0.5 * setting.r1_gamma * r1
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            # generator logits come from a fresh pass so the graph does not
            # straddle the in-place discriminator update
            lg = discriminator(y_hat, cond).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
            adv_g = F.softplus(-lg).mean()

            parts = {"adv": adv_g,
                     "rec": loss_rec(y_hat, y, weights, perceptual)
                     / setting.batch_size}
            if weights.lambda_tmp > 0:
                crop = sample_crop(x_full.shape[-1], x_full.shape[-2], gen)
                parts["tmp"] = loss_tmp(model, x_full, w, d_s=d_s,
                                        crop=crop, y_full=y_hat) \
                    / setting.batch_size
            if setting.use_mask_loss and masks:
                parts["mask"] = loss_mask(masks, d_s, weights)
            loss_g = total_loss(parts, weights)
            opt_g.zero_grad()
            loss_g.backward()
            if setting.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.trainable_parameters(),
                                               setting.grad_clip)
            opt_g.step()

            record = {"iteration": i,
                      "loss_d": float(loss_d.detach()),
                      "loss_g": float(loss_g.detach()),
                      "adv": float(parts["adv"].detach()),
                      "rec": float(parts["rec"].detach())}
            if "tmp" in parts:
                record["tmp"] = float(parts["tmp"].detach())
            if d_s is not None:
                record["d_s"] = d_s
            if masks:
                record["mask_means"] = [float(m.detach().mean()) for m in masks]
            bad = any(not math.isfinite(v) for v in
                      (record["loss_d"], record["loss_g"]))
            if bad:
                raise TrainingAbortedError(
                    f"non-finite loss at iteration {i}", last_good=last_good)
            log.write(json.dumps(record) + "\n")
            log.flush()
            if (i + 1) % setting.checkpoint_every == 0 or i + 1 == iters:
                path = os.path.join(out_dir, f"student_{i + 1:06d}.ckpt")
                save_checkpoint(path, model, setting, iteration=i + 1,
                                discriminator=discriminator,
                                optimizers=(opt_g, opt_d))
                last_good = path
    return {"checkpoint": last_good, "metrics": metrics_path,
            "iterations": iters}


# --- checkpointing ----------------------------------------------------------


def _optimizer_arrays(opt, prefix):
    arrays, meta = {}, {"param_groups": [], "state_keys": {}}
    sd = opt.state_dict()
    for g in sd["param_groups"]:
        meta["param_groups"].append({k: v for k, v in g.items()})
    for pid, st in sd["state"].items():
        keys = []
        for k, v in st.items():
            if torch.is_tensor(v):
                arrays[f"{prefix}{pid}/{k}"] = v.detach().cpu().numpy()
                keys.append(k)
            else:
                meta["state_keys"].setdefault(str(pid), {})[k] = v
        meta["state_keys"].setdefault(str(pid), {})["__tensors__"] = keys
    return arrays, meta


def _optimizer_from_arrays(opt, arrays, prefix, meta):
    sd = opt.state_dict()
    sd["param_groups"] = meta["param_groups"]
    state = {}
    for pid_s, info in meta["state_keys"].items():
        pid = int(pid_s)
        st = {k: v for k, v in info.items() if k != "__tensors__"}
        for k in info.get("__tensors__", []):
            st[k] = torch.from_numpy(arrays[f"{prefix}{pid}/{k}"].copy())
        state[pid] = st
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(path: str, model: VidToonModel, setting: TrainingSetting,
                    iteration: int = 0, discriminator=None, optimizers=None):
    arrays = ckpt.state_dict_to_arrays(model, "model/")
    config = {"kind": "student",
              "generator": model.config.to_dict(),
              "encoder": dataclasses.asdict(model.encoder.config),
              "variant": model.variant,
              "setting": setting.suffix,
              "seed": setting.seed,
              "iteration": iteration}
    if discriminator is not None:
        arrays.update(ckpt.state_dict_to_arrays(discriminator, "disc/"))
        config["disc_cond_dim"] = discriminator.cond_dim
    if optimizers is not None:
        for name, opt in zip(("opt_g", "opt_d"), optimizers):
            arr, meta = _optimizer_arrays(opt, f"{name}/")
            arrays.update(arr)
            config[f"{name}_meta"] = meta
    ckpt.save_archive(path, arrays, config)


def build_student(gcfg: GeneratorConfig, ecfg: EncoderConfig, variant: str,
                  seed: int = 0) -> VidToonModel:
    """Construct an untrained student with the right module tree so a
    checkpoint can be loaded without the teacher."""
    gen = torch.Generator().manual_seed(seed)
    encoder = ContentEncoder(ecfg, gen)
    head = []
    in_ch = gcfg.channels(gcfg.layer_input_resolution(gcfg.entry_layer))
    for k in range(gcfg.entry_layer, gcfg.layer_count + 1):
        res = gcfg.resolution_table[k - 1]
        upsample = res != gcfg.layer_input_resolution(k)
        head.append(SynthesisLayer(gcfg.channels(gcfg.layer_input_resolution(k)),
                                   gcfg.channels(res), gcfg.latent_dim, gen,
                                   upsample, with_noise=False))
    to_rgb = nn.Conv2d(gcfg.channels(gcfg.resolution), 3, 1)
    sites = build_fusion_sites(gcfg, ecfg, gen, variant)
    return VidToonModel(gcfg, encoder, head, to_rgb, sites, variant=variant)


def load_checkpoint(path: str, expect_variant: str = None):
    """Rebuild a student (and training state, when present) from disk."""
    arrays, config = ckpt.load_archive(path)
    if config.get("kind") != "student":
        raise CheckpointError(f"{path} is not a student checkpoint")
    variant = config["variant"]
    if expect_variant is not None and variant != expect_variant:
        raise CheckpointError(
            f"checkpoint holds variant {variant}, expected {expect_variant}")
    gcfg = GeneratorConfig(**config["generator"])
    e = dict(config["encoder"])
    for key in ("stage_widths", "modres_dilations", "modres_style_rows"):
        if key in e:
            e[key] = tuple(e[key])
    ecfg = EncoderConfig(**e)
    model = build_student(gcfg, ecfg, variant)
    ckpt.load_arrays_into(model, arrays, "model/")
    model.setting_suffix = config.get("setting", variant)
    extras = {"iteration": config.get("iteration", 0),
              "setting": config.get("setting", variant),
              "seed": config.get("seed", 0)}
    if "disc_cond_dim" in config:
        dgen = torch.Generator().manual_seed(0)
        disc = CondDiscriminator(dgen, cond_dim=config["disc_cond_dim"])
        ckpt.load_arrays_into(disc, arrays, "disc/")
        extras["discriminator"] = disc
    extras["arrays"] = arrays
    extras["config"] = config
    return model, extras


def resume_optimizers(model, extras, setting):
    """Rebuild optimizer pairs from a loaded checkpoint's arrays."""
    opt_g = torch.optim.Adam(model.trainable_parameters(), lr=setting.lr)
    opt_d = torch.optim.Adam(extras["discriminator"].parameters(),
                             lr=setting.lr_disc)
    arrays, config = extras["arrays"], extras["config"]
    if "opt_g_meta" in config:
        _optimizer_from_arrays(opt_g, arrays, "opt_g/", config["opt_g_meta"])
        _optimizer_from_arrays(opt_d, arrays, "opt_d/", config["opt_d_meta"])
    return opt_g, opt_d
