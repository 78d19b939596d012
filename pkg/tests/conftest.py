import os
import subprocess
import sys

import pytest
import torch

from vidtoon.teacher import GeneratorConfig, build_toy_teacher, save_teacher

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CACHE_DIR = os.path.join(ROOT, ".cache")
BUNDLE_CACHE = os.path.join(CACHE_DIR, "teacher_s0.pt")
TEACHER_CKPT = os.path.join(CACHE_DIR, "teacher_s0.ckpt")
ARTIFACTS = os.path.join(ROOT, "artifacts")


@pytest.fixture(scope="session")
def bundle():
    """Teacher bundle for seed 0, cached on disk (the build takes ~70 s)."""
    if os.path.exists(BUNDLE_CACHE):
        return torch.load(BUNDLE_CACHE, weights_only=False)
    os.makedirs(CACHE_DIR, exist_ok=True)
    b = build_toy_teacher(GeneratorConfig(), 0)
    torch.save(b, BUNDLE_CACHE)
    return b


@pytest.fixture(scope="session")
def teacher_ckpt(bundle):
    if not os.path.exists(TEACHER_CKPT):
        save_teacher(bundle, TEACHER_CKPT)
    return TEACHER_CKPT


@pytest.fixture(scope="session")
def artifacts():
    """Trained-model artifacts; built by scripts/build_artifacts.py.

    Building from scratch takes on the order of two hours on one CPU core,
    so the acceptance tests reuse whatever the script already produced and
    trigger a build only when artifacts are missing entirely.
    """
    marker = os.path.join(ARTIFACTS, "DONE")
    if not os.path.exists(marker):
        subprocess.run(
            [sys.executable, os.path.join(ROOT, "scripts", "build_artifacts.py")],
            check=True, cwd=ROOT)
    return ARTIFACTS
