#!/usr/bin/env python3
"""Build the trained-model artifacts the acceptance suite consumes.

Stages (each skipped when its output already exists):
  1. teacher bundle
  2. pretrained collection encoder (2000 iterations)
  3. collection model with the flicker loss on (1000 iterations)
  4. collection model with the flicker loss off, same pretrained encoder
  5. pretrained exemplar encoder and the degree-conditioned exemplar model

Takes roughly two hours on one CPU core from scratch.  Writes artifacts/DONE
last, so an interrupted build resumes where it stopped.
"""

import dataclasses
import json
import os
import sys
import time

import torch

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "src"))

from vidtoon import checkpoint as ckpt
from vidtoon.encoder import ContentEncoder, EncoderConfig, load_modres_from_teacher
from vidtoon.losses import LossWeights
from vidtoon.model import assemble
from vidtoon.pipeline import load_pretrained_encoder
from vidtoon.teacher import (GeneratorConfig, build_toy_teacher, load_teacher,
                             save_teacher)
from vidtoon.trainer import TrainingSetting, pretrain_encoder, train

ART = os.path.join(ROOT, "artifacts")
TEACHER = os.path.join(ART, "teacher.ckpt")
# the generator side needs a gentler step than the discriminator: the frozen
# head amplifies encoder perturbations, and the default 2e-3 saturates the
# output in a handful of iterations
LR_G = 5e-4


def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def stage_teacher():
    if os.path.exists(TEACHER):
        return load_teacher(TEACHER)
    cache = os.path.join(ROOT, ".cache", "teacher_s0.ckpt")
    if os.path.exists(cache):
        bundle = load_teacher(cache)
    else:
        log("building teacher bundle (seed 0)")
        bundle = build_toy_teacher(GeneratorConfig(), 0)
    save_teacher(bundle, TEACHER)
    log(f"teacher ready (fit_error {bundle.fit_error:.2f})")
    return bundle


def stage_pretrain(bundle, suffix, out_name):
    path = os.path.join(ART, out_name)
    setting = TrainingSetting.from_suffix(suffix, lr=LR_G)
    if os.path.exists(path):
        return load_pretrained_encoder(path), setting
    log(f"pretraining encoder for {suffix} "
        f"({setting.pretrain_iterations} iterations)")
    ecfg = EncoderConfig.from_generator(bundle.config)
    enc = ContentEncoder(ecfg, torch.Generator().manual_seed(setting.seed))
    if setting.variant == "D":
        load_modres_from_teacher(enc, bundle)
    curve = pretrain_encoder(enc, bundle, setting,
                             log_path=path + ".log.jsonl")
    ckpt.save_archive(path, ckpt.state_dict_to_arrays(enc, "encoder/"),
                      {"kind": "encoder",
                       "encoder": dataclasses.asdict(enc.config),
                       "setting": suffix, "seed": setting.seed,
                       "iterations": len(curve), "final_loss": curve[-1]})
    log(f"pretrain {suffix}: {curve[0]:.1f} -> {curve[-1]:.1f}")
    return enc, setting


def stage_train(bundle, enc_path, suffix, out_dir, lambda_tmp=None):
    out = os.path.join(ART, out_dir)
    final = os.path.join(out, "student_001000.ckpt")
    if os.path.exists(final):
        return final
    weights = LossWeights() if lambda_tmp is None \
        else LossWeights(lambda_tmp=lambda_tmp)
    setting = TrainingSetting.from_suffix(suffix, lr=LR_G, weights=weights)
    enc = load_pretrained_encoder(os.path.join(ART, enc_path))
    model = assemble(bundle, enc, setting.variant)
    log(f"training {suffix} (lambda_tmp={weights.lambda_tmp}) -> {out_dir}")
    t0 = time.time()
    result = train(model, bundle, setting, out)
    log(f"{out_dir} done in {(time.time() - t0) / 60:.1f} min "
        f"({result['checkpoint']})")
    return result["checkpoint"]


def main():
    os.makedirs(ART, exist_ok=True)
    bundle = stage_teacher()
    stage_pretrain(bundle, "T", "encoder_T.ckpt")
    stage_train(bundle, "encoder_T.ckpt", "T", "T_tmp1")
    stage_train(bundle, "encoder_T.ckpt", "T", "T_tmp0", lambda_tmp=0.0)
    stage_pretrain(bundle, "Dd", "encoder_Dd.ckpt")
    stage_train(bundle, "encoder_Dd.ckpt", "Dd", "Dd")
    with open(os.path.join(ART, "DONE"), "w") as f:
        f.write(json.dumps({"lr_g": LR_G, "finished": time.strftime("%F %T")})
                + "\n")
    log("all artifacts built")


if __name__ == "__main__":
    main()
