"""The composed student network.

Generator head taken from the teacher (layers from the entry layer up, noise
sites removed), fed by the encoder's content feature and skip pyramid through
four fusion sites, conditioned on a style code (and a structure degree for the
exemplar variant).  Fully convolutional: output is exactly 4x the input size.
"""

import copy

import torch
from torch import nn

from .encoder import ContentEncoder
from .errors import ShapeError
from .fusion import FusionSite
from .teacher import GeneratorConfig, StyleCode, SynthesisLayer, TeacherBundle

MIN_INPUT_SIDE = 32
VARIANTS = ("T", "D")


def output_size(width: int, height: int):
    """Input (W, H) maps to output (4W, 4H); sizes must be divisible by 8."""
    for side in (width, height):
        if side % 8:
            raise ShapeError(f"frame side {side} not divisible by 8")
        if side < MIN_INPUT_SIDE:
            raise ShapeError(f"frame side {side} below minimum {MIN_INPUT_SIDE}")
    return 4 * width, 4 * height


class VidToonModel(nn.Module):
    """Encoder + teacher head + fusion sites; noise-free and size-agnostic."""

    def __init__(self, config: GeneratorConfig, encoder: ContentEncoder,
                 head_layers, to_rgb, fusion_sites, variant="T",
                 setting_suffix=None):
        super().__init__()
        if variant not in VARIANTS:
            raise ShapeError(f"variant must be one of {VARIANTS}")
        self.config = config
        self.variant = variant
        self.setting_suffix = setting_suffix or variant
        self.encoder = encoder
        self.head = nn.ModuleList(head_layers)
        self.to_rgb = to_rgb
        self.fusion = nn.ModuleList(fusion_sites)
        entry = config.entry_layer
        self.fusion_layers = tuple(entry + 2 * i for i in range(len(fusion_sites)))

    @property
    def entry_layer(self):
        return self.config.entry_layer

    def trainable_parameters(self):
        """Encoder and fusion parameters; the head stays frozen."""
        yield from self.encoder.parameters()
        yield from self.fusion.parameters()

    def forward(self, x, w, d_s=None, content_override=None, return_masks=False):
        """Stylize a (B, 3+P, H, W) frame stack into (B, 3, 4H, 4W) images."""
        output_size(x.shape[-1], x.shape[-2])
        if isinstance(w, StyleCode):
            w = w.vectors[None]
        if w.shape[0] == 1 and x.shape[0] > 1:
            w = w.expand(x.shape[0], -1, -1)
        if self.variant == "D":
            if d_s is None:
                raise ShapeError("variant D requires a structure degree d_s")
            pyramid = self.encoder(x, w_ext=w[:, : self.entry_layer - 1], d_s=float(d_s))
        else:
            if d_s is not None:
                raise ShapeError("variant T takes no structure degree")
            pyramid = self.encoder(x)
        f = pyramid.content if content_override is None else content_override
        masks = []
        site_idx = 0
        skips_coarse_first = pyramid.skips[::-1]
        for k in range(self.entry_layer, self.config.layer_count + 1):
            f = self.head[k - self.entry_layer](f, w[:, k - 1])
            if site_idx < len(self.fusion_layers) and k == self.fusion_layers[site_idx]:
                site = self.fusion[site_idx]
                f_e = skips_coarse_first[site_idx]
                if site.variant == "degree_aware":
                    f, mask = site.fuse_degree(f, f_e, float(d_s))
                    masks.append(mask)
                else:
                    f = site.fuse_plain(f, f_e)
                site_idx += 1
        img = torch.tanh(self.to_rgb(f))
        return (img, masks) if return_masks else img


def build_fusion_sites(config: GeneratorConfig, encoder_cfg, gen, variant):
    """One site per head resolution entry*(1,2,4,8), identity-initialized."""
    e = config.entry_resolution
    fe_channels = list(encoder_cfg.stage_widths[::-1]) + [encoder_cfg.stem_width]
    sites = []
    for i in range(4):
        fg = config.channels(e * 2 ** i)
        kind = "degree_aware" if variant == "D" else "plain"
        sites.append(FusionSite(fg, fe_channels[i], gen, variant=kind))
    return sites


def assemble(bundle: TeacherBundle, encoder: ContentEncoder, variant: str = "T",
             fusion_sites=None, seed: int = 0) -> VidToonModel:
    """Compose the student from teacher head weights and a content encoder."""
    if variant not in VARIANTS:
        raise ShapeError(f"variant must be one of {VARIANTS}")
    cfg = bundle.config
    source = bundle.g1 if variant == "T" else bundle.g1x.base
    entry = cfg.entry_layer
    entry_in = cfg.channels(cfg.layer_input_resolution(entry))
    if encoder.config.content_channels != entry_in:
        raise ShapeError(
            f"encoder content channels {encoder.config.content_channels} "
            f"do not match head entry channels {entry_in}")
    gen = torch.Generator().manual_seed(seed)
    head = []
    for k in range(entry, cfg.layer_count + 1):
        src = source.layers[k - 1]
        dst = SynthesisLayer(src.conv.in_ch, src.conv.out_ch, cfg.latent_dim,
                             gen, src.conv.upsample, with_noise=False)
        dst.conv.load_state_dict(src.conv.state_dict())
        head.append(dst)
    to_rgb = copy.deepcopy(source.to_rgb)
    if fusion_sites is None:
        fusion_sites = build_fusion_sites(cfg, encoder.config, gen, variant)
    return VidToonModel(cfg, encoder, head, to_rgb, fusion_sites, variant=variant)
