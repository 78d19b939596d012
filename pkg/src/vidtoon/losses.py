"""Training objectives.

Encoder pretraining, reconstruction (pixel + perceptual), non-saturating
adversarial, flicker suppression via simulated camera pan, attention-mask
sparsity with its degree schedule, and the weighted total.  All losses are
pure functions of their inputs and dtype-agnostic so gradients can be checked
against finite differences in float64.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, ShapeError
from .nn_ops import ConvLayer

LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class LossWeights:
    lambda_mse: float = 0.1
    lambda_perc: float = 0.01
    lambda_adv: float = 0.01
    lambda_rec: float = 1.0
    lambda_tmp: float = 1.0
    lambda_mask: float = 0.0005


@dataclass(frozen=True)
class CropSpec:
    """A crop at original resolution; size must stay divisible by 32 so the
    4x-downsampled crop is a valid model input."""

    x: int
    y: int
    width: int
    height: int

    def validate(self, frame_w, frame_h):
        if self.width % 32 or self.height % 32:
            raise DomainError(f"crop size must be divisible by 32, got "
                              f"{self.width}x{self.height}")
        if not (0 <= self.x and 0 <= self.y
                and self.x + self.width <= frame_w
                and self.y + self.height <= frame_h):
            raise DomainError("crop does not lie inside the frame")

    def apply(self, img):
        return img[..., self.y:self.y + self.height, self.x:self.x + self.width]

    def scaled(self, factor):
        return CropSpec(self.x * factor, self.y * factor,
                        self.width * factor, self.height * factor)


def g_degree(d_s) -> float:
    """Mask budget schedule: 0.1 + 0.9 * (1 - d_s)^2, decreasing on [0, 1]."""
    d = float(d_s)
    if not 0.0 <= d <= 1.0:
        raise DomainError(f"d_s must lie in [0, 1], got {d_s}")
    return 0.1 + 0.9 * (1.0 - d) ** 2


def _l2(a, b):
    return (a - b).flatten().norm()


def loss_pretrain(encoder_feature, teacher_entry_feature):
    """L2 distance between the encoder's content feature and the teacher's
    entry-layer input feature."""
    if encoder_feature.shape != teacher_entry_feature.shape:
        raise ShapeError(f"feature shapes differ: {tuple(encoder_feature.shape)} "
                         f"vs {tuple(teacher_entry_feature.shape)}")
    return _l2(encoder_feature, teacher_entry_feature)


class PerceptualNet(nn.Module):
    """Frozen 4-layer conv net with fixed seeded weights; a stand-in for a
    pretrained perceptual feature extractor, pluggable behind the same call."""

    def __init__(self, seed=77, widths=(8, 16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        for wdt in widths:
            convs.append(ConvLayer(in_ch, wdt, gen, stride=2))
            in_ch = wdt
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, img):
        """Activations at the three deepest layers."""
        feats = []
        f = img
        for conv in self.convs:
            f = conv(f)
            feats.append(f)
        return feats[-3:]


def loss_rec(y_hat, y, weights: LossWeights, feature_net=None):
    """lambda_mse * ||y_hat - y||_2 + lambda_perc * sum of feature distances."""
    if y_hat.shape != y.shape:
        raise ShapeError("reconstruction inputs must have identical shapes")
    total = weights.lambda_mse * _l2(y_hat, y)
    if weights.lambda_perc > 0 and feature_net is not None:
        fa = feature_net(y_hat)
        fb = feature_net(y)
        perc = sum(_l2(a, b) for a, b in zip(fa, fb))
        total = total + weights.lambda_perc * perc
    return total


def loss_adv(discriminator, y_real, y_fake, condition=None):
    """Non-saturating logistic adversarial losses, (loss_D, loss_G) per sample.

    The fake branch of ``loss_D`` is detached; ``loss_G`` carries the
    generator gradient.
    """
    logits_real = discriminator(y_real, condition).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    logits_fake_d = discriminator(y_fake.detach(), condition).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    logits_fake_g = discriminator(y_fake, condition).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    loss_d = F.softplus(-logits_real).mean() + F.softplus(logits_fake_d).mean()
    loss_g = F.softplus(-logits_fake_g).mean()
    return loss_d, loss_g


def downsample4(x):
    return F.avg_pool2d(x, 4)


def loss_tmp(model, x_highres, w, d_s=None, crop: CropSpec = None, y_full=None):
    """Flicker suppression: stylizing a crop must equal cropping the stylized
    frame, with the crop taken at the original resolution so sub-pixel camera
    motion is covered.

    ``y_full`` may pass in the already-computed full-frame output.
    """
    h, w_px = x_highres.shape[-2:]
    if crop is None:
        raise DomainError("loss_tmp requires a crop specification")
    crop.validate(w_px, h)
    if y_full is None:
        y_full = model(downsample4(x_highres), w, d_s=d_s)
    y_crop_ref = crop.apply(y_full)
    y_crop = model(downsample4(crop.apply(x_highres)), w, d_s=d_s)
    return _l2(y_crop_ref, y_crop)


def loss_mask(masks, d_s, weights: LossWeights = LossWeights()):
    """Hinge sparsity penalty: mean mask value above the degree budget g(d_s)."""
    budget = g_degree(d_s)
    total = None
    for m in masks:
        excess = torch.clamp(m.mean() - budget, min=0.0)
        total = excess if total is None else total + excess
    if total is None:
        return torch.tensor(0.0)
    return weights.lambda_mask * total


def total_loss(parts: dict, weights: LossWeights):
    """lambda_adv * adv + lambda_rec * rec + lambda_tmp * tmp (+ mask)."""
    zero = torch.tensor(0.0)
    total = (weights.lambda_adv * parts.get("adv", zero)
             + weights.lambda_rec * parts.get("rec", zero)
             + weights.lambda_tmp * parts.get("tmp", zero))
    if "mask" in parts:
        total = total + parts["mask"]
    return total


def sample_crop(frame_w, frame_h, gen: torch.Generator) -> CropSpec:
    """Random crop for the flicker loss: side in [0.75, 1.0] of the frame,
    snapped to 32-pixel multiples, offset uniform over valid positions."""
    def snap(v):
        # crops are taken at 4x the model input resolution, so 128 here
        # keeps the downsampled crop at the minimum accepted input side
        return max(128, (v // 32) * 32)

    cw = snap(int((0.75 + 0.25 * torch.rand((), generator=gen).item()) * frame_w))
    ch = snap(int((0.75 + 0.25 * torch.rand((), generator=gen).item()) * frame_h))
    cw, ch = min(cw, frame_w), min(ch, frame_h)
    ox = int(torch.randint(0, frame_w - cw + 1, (), generator=gen))
    oy = int(torch.randint(0, frame_h - ch + 1, (), generator=gen))
    return CropSpec(ox, oy, cw, ch)
