"""Convolutional building blocks shared by the teacher, encoder and student.

All convolutions use reflection padding so that translation-equivariance
holds exactly on interior pixels, and all parameters are drawn from an
explicit ``torch.Generator`` so that network construction is bit-reproducible
from a seed.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

LRELU_SLOPE = 0.2
LRELU_GAIN = math.sqrt(2.0)


def seeded_normal_(tensor: torch.Tensor, gen: torch.Generator, std: float = 1.0):
    with torch.no_grad():
        tensor.copy_(torch.randn(tensor.shape, generator=gen) * std)
    return tensor


def act(x):
    return F.leaky_relu(x, LRELU_SLOPE) * LRELU_GAIN


def reflect_conv2d(x, weight, bias=None, stride=1, dilation=1):
    """Conv2d with reflection padding sized so spatial dims shrink only by stride."""
    k = weight.shape[-1]
    pad = dilation * (k // 2)
    if pad > 0:
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(x, weight, bias, stride=stride, dilation=dilation)


class ConvLayer(nn.Module):
    """Plain conv (+ optional downsample and activation), reflection padded."""

    def __init__(self, in_ch, out_ch, gen, kernel=3, stride=1, activate=True):
        super().__init__()
        self.stride = stride
        self.activate = activate
        self.weight = nn.Parameter(
            seeded_normal_(
                torch.empty(out_ch, in_ch, kernel, kernel),
                gen,
                std=1.0 / math.sqrt(in_ch * kernel * kernel),
            )
        )
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x):
        out = reflect_conv2d(x, self.weight, self.bias, stride=self.stride)
        return act(out) if self.activate else out


class ModulatedConv2d(nn.Module):
    """Style-modulated, demodulated conv with optional nearest 2x upsampling.

    ``out = d * conv(x * s)`` where ``s`` is the per-input-channel style from
    an affine map of one style vector and ``d`` is the demodulation factor,
    which is algebraically identical to convolving with the modulated and
    demodulated kernel.
    """

    def __init__(self, in_ch, out_ch, style_dim, gen, kernel=3, upsample=False,
                 demodulate=True, dilation=1):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.upsample = upsample
        self.demodulate = demodulate
        self.dilation = dilation
        self.weight = nn.Parameter(
            seeded_normal_(
                torch.empty(out_ch, in_ch, kernel, kernel),
                gen,
                std=1.0 / math.sqrt(in_ch * kernel * kernel),
            )
        )
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(style_dim, in_ch)
        seeded_normal_(self.affine.weight, gen, std=1.0 / math.sqrt(style_dim))
        with torch.no_grad():
            self.affine.bias.fill_(1.0)

    def forward(self, x, style_vec):
        """``x``: (B, C, H, W); ``style_vec``: (B, style_dim)."""
        b = x.shape[0]
        s = self.affine(style_vec)  # (B, in_ch)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        out = reflect_conv2d(x * s[:, :, None, None], self.weight,
                             dilation=self.dilation)
        if self.demodulate:
            w = self.weight[None] * s[:, None, :, None, None]  # (B, O, I, k, k)
            d = torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4)) + 1e-8)  # (B, O)
            out = out * d[:, :, None, None]
        return out + self.bias[None, :, None, None]


class ResBlock(nn.Module):
    """Two 3x3 convs with a skip connection, width preserved."""

    def __init__(self, channels, gen):
        super().__init__()
        self.conv1 = ConvLayer(channels, channels, gen)
        self.conv2 = ConvLayer(channels, channels, gen, activate=False)

    def forward(self, x):
        return act(self.conv2(self.conv1(x)) + x)


class ModResBlock(nn.Module):
    """Modulative residual block: returns a style-driven residual for a feature.

    The caller scales the residual by the structure degree and adds it back.
    The same parameter block is used at different feature scales by changing
    only the dilation rate; kernel shapes stay identical so parameters can be
    copied verbatim between networks.
    """

    def __init__(self, channels, style_dim, gen, dilation=1, init_scale=1.0):
        super().__init__()
        self.dilation = dilation
        self.conv1 = ModulatedConv2d(channels, channels, style_dim, gen,
                                     dilation=dilation)
        self.conv2 = ModulatedConv2d(channels, channels, style_dim, gen,
                                     dilation=dilation)
        if init_scale != 1.0:
            with torch.no_grad():
                self.conv2.weight.mul_(init_scale)

    def set_dilation(self, dilation):
        self.dilation = dilation
        self.conv1.dilation = dilation
        self.conv2.dilation = dilation

    def forward(self, x, style_vec):
        return self.conv2(act(self.conv1(x, style_vec)), style_vec)
