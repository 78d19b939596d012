"""On-the-fly paired data synthesis from a frozen teacher bundle.

A training pair is (x, y, w''): x is a source-generator render of an
attribute-edited code, y is the stylized render of the matching code, and
w'' carries the structure rows the student conditions on plus the color
rows embedded from the input.  One geometric augmentation is applied to x
and y together, the parsing map is computed after augmentation and
concatenated onto x, and every random choice derives from the pair seed so
generation is reproducible and order-independent.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import DomainError, ShapeError
from .teacher import (EDIT_DIRECTION_NAMES, EditDirection, StyleCode,
                      TeacherBundle, embed, mix_codes, noise_fixed,
                      sample_style_code, synthesize, synthesize_exemplar)

STYLE_POOL_SIZE = 64
MAX_ROTATION = 15.0
MAX_TRANSLATE_FRAC = 0.1
SCALE_RANGE = (0.9, 1.1)


@dataclass(frozen=True)
class AugmentParams:
    """One similarity transform, recorded so a pair can be replayed."""

    flip: bool = False
    scale: float = 1.0
    translate: tuple = (0.0, 0.0)
    rotation: float = 0.0
    noise_seed: int = 0

    def is_identity(self):
        return (self.rotation == 0.0 and self.scale == 1.0
                and self.translate == (0.0, 0.0) and not self.flip)

    def validate(self, resolution: int):
        lo, hi = SCALE_RANGE
        if not lo <= self.scale <= hi:
            raise DomainError(f"scale {self.scale} outside [{lo}, {hi}]")
        if abs(self.rotation) > MAX_ROTATION:
            raise DomainError(f"rotation {self.rotation} exceeds {MAX_ROTATION} deg")
        bound = MAX_TRANSLATE_FRAC * resolution
        if any(abs(t) > bound for t in self.translate):
            raise DomainError(f"translation {self.translate} exceeds {bound} px")


@dataclass
class TrainingPair:
    x: torch.Tensor
    y: torch.Tensor
    code: StyleCode
    d_s: float
    d_c: float
    augment: AugmentParams
    seed: int
    meta: dict = field(default_factory=dict)


def edit_attributes(w: StyleCode, direction: EditDirection,
                    magnitude: float) -> StyleCode:
    """w' = w + magnitude * direction."""
    if not math.isfinite(magnitude):
        raise DomainError("edit magnitude must be finite")
    return StyleCode(w.vectors + magnitude * direction.delta, w.entry_layer)


def sample_edit(bundle: TeacherBundle, gen: torch.Generator):
    """Uniform choice over the edit menu (including 'do nothing'),
    magnitude uniform in [0.5, 1.5)."""
    idx = int(torch.randint(0, len(EDIT_DIRECTION_NAMES), (), generator=gen))
    name = EDIT_DIRECTION_NAMES[idx]
    magnitude = 0.5 + torch.rand((), generator=gen).item()
    return bundle.edit_directions[name], magnitude


def sample_augment(gen: torch.Generator, resolution: int, *,
                   p_identity: float = 0.2) -> AugmentParams:
    if torch.rand((), generator=gen).item() < p_identity:
        return AugmentParams()
    rot = (torch.rand((), generator=gen).item() * 2 - 1) * MAX_ROTATION
    lo, hi = SCALE_RANGE
    scale = lo + torch.rand((), generator=gen).item() * (hi - lo)
    bound = MAX_TRANSLATE_FRAC * resolution
    tx = (torch.rand((), generator=gen).item() * 2 - 1) * bound
    ty = (torch.rand((), generator=gen).item() * 2 - 1) * bound
    flip = torch.rand((), generator=gen).item() < 0.5
    return AugmentParams(flip=flip, scale=scale, translate=(tx, ty), rotation=rot)


def _apply_transform(img: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    batched = img.dim() == 4
    x = img if batched else img[None]
    out = x
    if params.flip:
        out = torch.flip(out, dims=(-1,))
    if not (params.rotation == 0.0 and params.scale == 1.0
            and params.translate == (0.0, 0.0)):
        h, w = out.shape[-2:]
        rad = math.radians(params.rotation)
        cos, sin = math.cos(rad) / params.scale, math.sin(rad) / params.scale
        # translation in pixels, converted to the normalized grid units
        tx = 2.0 * params.translate[0] / w
        ty = 2.0 * params.translate[1] / h
        theta = torch.tensor([[cos, -sin, -tx], [sin, cos, -ty]],
                             dtype=out.dtype).unsqueeze(0).expand(out.shape[0], -1, -1)
        grid = F.affine_grid(theta, list(out.shape), align_corners=False)
        out = F.grid_sample(out, grid, mode="bilinear",
                            padding_mode="reflection", align_corners=False)
    elif not params.flip:
        out = out.clone()
    return out if batched else out[0]


def geometric_augment(x: torch.Tensor, y: torch.Tensor,
                      params: AugmentParams):
    """Apply the identical similarity transform to both images, bilinear
    sampling with reflection fill; identity and pure-flip paths are exact."""
    params.validate(max(x.shape[-2:]))
    return _apply_transform(x, params), _apply_transform(y, params)


_PARSE_SEED = 1031


def pseudo_parse(img: torch.Tensor, classes: int = 4) -> torch.Tensor:
    """Soft region map from local color statistics.

    Channels are a softmax over fixed seeded linear projections of
    (blurred color, local contrast), so the map is deterministic in the
    image, sums to one per pixel, and moves with image content.
    """
    batched = img.dim() == 4
    x = img if batched else img[None]
    if x.shape[1] != 3:
        raise ShapeError("pseudo_parse expects a 3-channel image")
    gen = torch.Generator().manual_seed(_PARSE_SEED)
    proj = torch.randn(classes, 6, generator=gen) / math.sqrt(6.0)
    bias = torch.randn(classes, generator=gen) * 0.1
    blur = F.avg_pool2d(F.pad(x, (2, 2, 2, 2), mode="reflect"), 5, stride=1)
    contrast = (x - blur).abs()
    stats = torch.cat([blur, contrast], dim=1).to(x.dtype)
    logits = torch.einsum("nchw,kc->nkhw", stats, proj.to(x.dtype))
    logits = logits * 4.0 + bias.to(x.dtype).view(1, -1, 1, 1)
    out = torch.softmax(logits, dim=1)
    return out if batched else out[0]


def _pair_noise_seed(seed):
    return (seed * 31 + 17) % (2 ** 63)


def _with_parsing(x):
    return torch.cat([x, pseudo_parse(x)], dim=0)


def make_collection_pair(bundle: TeacherBundle, seed: int,
                         augment: bool = True) -> TrainingPair:
    """Collection-distillation pair: x from the source generator on an
    edited code, y from the stylized generator on the matched code whose
    color rows come from embedding x."""
    gen = torch.Generator().manual_seed(seed)
    cfg = bundle.config
    w = sample_style_code(cfg, int(torch.randint(0, 2 ** 62, (), generator=gen)))
    direction, mag = sample_edit(bundle, gen)
    w_edit = edit_attributes(w, direction, mag)
    nseed = _pair_noise_seed(seed)
    noise = noise_fixed(nseed)
    x = synthesize(bundle.g0, w_edit, noise=noise)
    x_ds = F.avg_pool2d(x[None], cfg.embed_divisor)[0]
    w2 = mix_codes(w_edit, embed(bundle.embedder, x_ds))
    y = synthesize(bundle.g1, w2, noise=noise)
    params = sample_augment(gen, cfg.resolution) if augment else AugmentParams()
    params = AugmentParams(**{**params.__dict__, "noise_seed": nseed})
    x, y = geometric_augment(x, y, params)
    return TrainingPair(x=_with_parsing(x), y=y, code=w2, d_s=1.0, d_c=1.0,
                        augment=params, seed=seed,
                        meta={"edit": direction.name, "magnitude": mag})


def style_pool(bundle: TeacherBundle, size: int = STYLE_POOL_SIZE):
    """Fixed pool of exemplar style codes derived from the bundle seed."""
    base = (bundle.seed * 131 + 7) % (2 ** 63)
    return [sample_style_code(bundle.config, (base + i) % (2 ** 63))
            for i in range(size)]


def make_exemplar_pair(bundle: TeacherBundle, s_code: StyleCode, d_s: float,
                       d_c: float, color_jitter: bool, seed: int,
                       augment: bool = True) -> TrainingPair:
    """Exemplar-distillation pair at an explicit structure/color degree.

    w'' mixes the exemplar's structure rows with the color rows embedded
    from the un-jittered input, so targets always take their palette from
    w''.  With ``color_jitter`` the visible x swaps in another code's color
    rows and therefore disagrees with y in color.
    """
    if not (0.0 <= d_s <= 1.0 and 0.0 <= d_c <= 1.0):
        raise DomainError("style degrees must lie in [0, 1]")
    gen = torch.Generator().manual_seed(seed)
    cfg = bundle.config
    w = sample_style_code(cfg, int(torch.randint(0, 2 ** 62, (), generator=gen)))
    direction, mag = sample_edit(bundle, gen)
    w_edit = edit_attributes(w, direction, mag)
    nseed = _pair_noise_seed(seed)
    noise = noise_fixed(nseed)
    x_clean = synthesize(bundle.g0, w_edit, noise=noise)
    x_ds = F.avg_pool2d(x_clean[None], cfg.embed_divisor)[0]
    w2 = mix_codes(s_code, embed(bundle.embedder, x_ds))
    y = synthesize_exemplar(bundle.g1x, w_edit, w2, d_s=d_s, d_c=d_c, noise=noise)
    if color_jitter:
        other = sample_style_code(
            cfg, int(torch.randint(0, 2 ** 62, (), generator=gen)))
        w_vis = mix_codes(w_edit, other)
        x = synthesize(bundle.g0, w_vis, noise=noise)
    else:
        x = x_clean
    params = sample_augment(gen, cfg.resolution) if augment else AugmentParams()
    params = AugmentParams(**{**params.__dict__, "noise_seed": nseed})
    x, y = geometric_augment(x, y, params)
    return TrainingPair(x=_with_parsing(x), y=y, code=w2, d_s=d_s, d_c=d_c,
                        augment=params, seed=seed,
                        meta={"edit": direction.name, "magnitude": mag,
                              "color_jitter": bool(color_jitter)})
