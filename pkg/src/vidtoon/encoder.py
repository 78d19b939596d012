"""Trainable content encoder.

Downsampling convolutions plus residual blocks produce a multi-scale feature
pyramid; the last-layer content feature replaces the generator head's entry
input.  Optionally the residual stages are conditioned on an extrinsic style
code and a structure degree through dilated modulative residual blocks whose
parameters are copied verbatim from the teacher.
"""

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import IncompatibilityError, InputError, ShapeError
from .nn_ops import ConvLayer, ModResBlock, ResBlock
from .teacher import GeneratorConfig, StyleCode, modres_layer_plan

MODRES_DILATIONS = (4, 2, 1)  # coarsest conditioned stage first


@dataclass
class ContentFeaturePyramid:
    """Skip features ordered fine-to-coarse (W, W/2, W/4, W/8) plus the
    last-layer content feature at W/8."""

    skips: list  # [ (B,C,W,H), ... ] fine to coarse
    content: torch.Tensor  # (B, C_entry, W/8, H/8)


@dataclass(frozen=True)
class EncoderConfig:
    """Widths and conditioning layout of the content encoder."""

    image_channels: int = 3
    parsing_channels: int = 4
    stem_width: int = 24
    stage_widths: tuple = (48, 48, 48)  # fine to coarse (W/2, W/4, W/8)
    resblocks_per_stage: int = 2
    content_channels: int = 48
    style_dim: int = 64
    modres_dilations: tuple = MODRES_DILATIONS
    modres_style_rows: tuple = (0, 1, 1)  # coarsest first, rows of the structure part

    @property
    def input_channels(self):
        return self.image_channels + self.parsing_channels

    @staticmethod
    def from_generator(gcfg: GeneratorConfig, parsing_channels: int = 4) -> "EncoderConfig":
        """Derive widths so skips match head channels and teacher blocks load."""
        e = gcfg.entry_resolution
        rows = tuple(row for _, row in modres_layer_plan(gcfg))
        return EncoderConfig(
            parsing_channels=parsing_channels,
            stem_width=gcfg.channels(e * 8),
            stage_widths=(gcfg.channels(e * 4), gcfg.channels(e * 2), gcfg.channels(e)),
            content_channels=gcfg.channels(e),
            style_dim=gcfg.latent_dim,
            modres_style_rows=rows,
        )


class ContentEncoder(nn.Module):
    """Fully convolutional encoder; weights are independent of input size."""

    def __init__(self, config: EncoderConfig, gen: torch.Generator):
        super().__init__()
        self.config = config
        self.stem = ConvLayer(config.input_channels, config.stem_width, gen)
        stages = []
        in_ch = config.stem_width
        for width in config.stage_widths:
            blocks = [ConvLayer(in_ch, width, gen, stride=2)]
            blocks += [ResBlock(width, gen) for _ in range(config.resblocks_per_stage)]
            stages.append(nn.Sequential(*blocks))
            in_ch = width
        self.stages = nn.ModuleList(stages)
        self.content_conv = ConvLayer(in_ch, config.content_channels, gen)
        # conditioned residual blocks, one per stage, coarsest stage first
        n = len(config.stage_widths)
        self.modres = nn.ModuleList([
            ModResBlock(config.stage_widths[n - 1 - i], config.style_dim, gen,
                        dilation=config.modres_dilations[i])
            for i in range(len(config.modres_dilations))
        ])

    def _validate(self, x):
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected (B, {self.config.input_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"input size must be divisible by 8, got {h}x{w}")
        if not torch.isfinite(x).all():
            raise InputError("encoder input contains non-finite values")

    def forward(self, x, w_ext=None, d_s: float = 0.0) -> ContentFeaturePyramid:
        self._validate(x)
        n = len(self.stages)
        f = self.stem(x)
        skips = [f]
        for i, stage in enumerate(self.stages):
            f = stage(f)
            if d_s > 0 and w_ext is not None:
                block_idx = n - 1 - i  # stage i=0 is finest -> last block
                row = self.config.modres_style_rows[block_idx]
                f = f + d_s * self.modres[block_idx](f, w_ext[:, row])
            skips.append(f)
        return ContentFeaturePyramid(skips=skips, content=self.content_conv(f))


def encode(encoder: ContentEncoder, x: torch.Tensor) -> ContentFeaturePyramid:
    """Unconditioned multi-scale encoding of an image+parsing stack."""
    return encoder(x)


def encode_conditioned(encoder: ContentEncoder, x: torch.Tensor,
                       w_ext, d_s: float) -> ContentFeaturePyramid:
    """Encoding with degree-scaled extrinsic structure residuals."""
    if not 0.0 <= float(d_s) <= 1.0:
        raise ShapeError(f"d_s must lie in [0, 1], got {d_s}")
    if isinstance(w_ext, StyleCode):
        w_ext = w_ext.structure_part[None]
    return encoder(x, w_ext=w_ext, d_s=float(d_s))


def load_modres_from_teacher(encoder: ContentEncoder, bundle) -> None:
    """Copy the teacher's modulative residual blocks verbatim (dilation aside)."""
    teacher_blocks = list(bundle.g1x.modres)
    if len(teacher_blocks) != len(encoder.modres):
        raise IncompatibilityError(
            f"teacher has {len(teacher_blocks)} residual blocks, "
            f"encoder declares {len(encoder.modres)}")
    for i, (src, dst) in enumerate(zip(teacher_blocks, encoder.modres)):
        src_state = src.state_dict()
        dst_state = dst.state_dict()
        for name, val in src_state.items():
            if dst_state[name].shape != val.shape:
                raise IncompatibilityError(
                    f"modres block {i} parameter {name}: teacher {tuple(val.shape)} "
                    f"vs encoder {tuple(dst_state[name].shape)}")
        dilation = dst.dilation
        dst.load_state_dict(src_state)
        dst.set_dilation(dilation)
