"""Fusion modules merging generator head features with encoder skip features.

The plain variant concatenates and convolves; the degree-aware variant first
predicts a one-channel attention mask from the encoder/generator feature
mismatch, conditioned on the structure degree, and gates the encoder feature
with it.  Both are initialized so that fusion is exactly the identity on the
generator feature.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .nn_ops import LRELU_SLOPE, reflect_conv2d, seeded_normal_

AUX_INIT_STD = 1e-2


def _mask_branch_input(f_g, f_e):
    """What the mask predictor sees: the mismatch between the two features.

    Isolated here so the alternative forms (absolute difference, raw encoder
    feature) can be swapped in one place.
    """
    return f_e - f_g


class DegreeAdaIN(nn.Module):
    """Instance norm with per-channel affine parameters produced from a scalar degree."""

    def __init__(self, channels, gen, hidden=32):
        super().__init__()
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, 2 * channels)
        seeded_normal_(self.fc1.weight, gen, std=1.0)
        seeded_normal_(self.fc2.weight, gen, std=AUX_INIT_STD)
        with torch.no_grad():
            self.fc1.bias.zero_()
            self.fc2.bias.zero_()

    def forward(self, h, d_s):
        b, c = h.shape[:2]
        d = torch.as_tensor(float(d_s), dtype=h.dtype).view(1, 1).expand(b, 1)
        gamma, beta = self.fc2(F.leaky_relu(self.fc1(d), LRELU_SLOPE)).chunk(2, dim=1)
        h = F.instance_norm(h, eps=1e-5)
        return h * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]


class FusionSite(nn.Module):
    """One fusion module at a fixed generator resolution."""

    def __init__(self, fg_channels, fe_channels, gen, variant="plain"):
        super().__init__()
        if variant not in ("plain", "degree_aware"):
            raise ShapeError(f"unknown fusion variant {variant!r}")
        if variant == "degree_aware" and fe_channels != fg_channels:
            raise ShapeError("degree-aware fusion needs matching channel counts")
        self.variant = variant
        self.fg_channels = fg_channels
        self.fe_channels = fe_channels
        self.fuse_weight = nn.Parameter(
            torch.empty(fg_channels, fg_channels + fe_channels, 3, 3))
        self.fuse_bias = nn.Parameter(torch.zeros(fg_channels))
        if variant == "degree_aware":
            self.pre_conv = nn.Parameter(torch.empty(fg_channels, fg_channels, 3, 3))
            self.pre_bias = nn.Parameter(torch.zeros(fg_channels))
            self.adain = DegreeAdaIN(fg_channels, gen)
            self.mask_weight = nn.Parameter(torch.empty(1, fg_channels, 3, 3))
            self.mask_bias = nn.Parameter(torch.zeros(1))
        self.initialize_identity(gen)

    def initialize_identity(self, gen=None):
        """Identity-preserving init: the generator half of the fusion kernel is a
        channel-wise identity (center taps), the encoder half exactly zero."""
        gen = gen or torch.Generator().manual_seed(0)
        with torch.no_grad():
            self.fuse_weight.zero_()
            for i in range(self.fg_channels):
                self.fuse_weight[i, i, 1, 1] = 1.0
            self.fuse_bias.zero_()
            if self.variant == "degree_aware":
                seeded_normal_(self.pre_conv, gen, std=AUX_INIT_STD)
                self.pre_bias.zero_()
                seeded_normal_(self.mask_weight, gen, std=AUX_INIT_STD)
                self.mask_bias.zero_()

    def _check(self, f_g, f_e):
        if f_g.shape[-2:] != f_e.shape[-2:]:
            raise ShapeError(
                f"fusion features disagree spatially: {tuple(f_g.shape)} vs {tuple(f_e.shape)}")
        if f_g.shape[1] != self.fg_channels or f_e.shape[1] != self.fe_channels:
            raise ShapeError("fusion features have unexpected channel counts")

    def fuse_plain(self, f_g, f_e):
        self._check(f_g, f_e)
        return reflect_conv2d(torch.cat([f_g, f_e], dim=1),
                              self.fuse_weight, self.fuse_bias)

    def predict_mask(self, f_g, f_e, d_s):
        h = reflect_conv2d(_mask_branch_input(f_g, f_e), self.pre_conv, self.pre_bias)
        h = self.adain(h, d_s)
        return torch.sigmoid(reflect_conv2d(h, self.mask_weight, self.mask_bias))

    def fuse_degree(self, f_g, f_e, d_s):
        if not 0.0 <= float(d_s) <= 1.0:
            raise ShapeError(f"d_s must lie in [0, 1], got {d_s}")
        self._check(f_g, f_e)
        mask = self.predict_mask(f_g, f_e, d_s)
        out = reflect_conv2d(torch.cat([f_g, f_e * mask], dim=1),
                             self.fuse_weight, self.fuse_bias)
        return out, mask

    def forward(self, f_g, f_e, d_s=None):
        if self.variant == "plain":
            return self.fuse_plain(f_g, f_e), None
        return self.fuse_degree(f_g, f_e, 0.0 if d_s is None else d_s)


def fuse_plain(site: FusionSite, f_g, f_e):
    return site.fuse_plain(f_g, f_e)


def fuse_degree(site: FusionSite, f_g, f_e, d_s):
    return site.fuse_degree(f_g, f_e, d_s)


def initialize_fusion(site: FusionSite, gen=None):
    site.initialize_identity(gen)
