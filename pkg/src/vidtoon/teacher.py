"""Frozen teacher toolkit.

A toy style-based source generator ``G0``, a toon-domain generator ``G1``
(collection variant) plus an exemplar variant ``G1x`` with a modulative
residual path, a small inversion embedder ``E_s`` and latent edit directions.
The distillation pipeline samples everything it needs from this bundle.
"""

import copy
import dataclasses
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DomainError, InputError, ShapeError
from .nn_ops import ConvLayer, ModResBlock, ModulatedConv2d, act, seeded_normal_

EDIT_DIRECTION_NAMES = ("identity", "attr_1", "attr_2", "attr_3", "attr_4")

MODRES_BLOCK_COUNT = 3


# ---------------------------------------------------------------------------
# noise modes


@dataclass(frozen=True)
class NoiseMode:
    """How per-layer noise maps are produced during synthesis.

    kind: "random" | "fixed" | "off" | "translated"
    ``fixed`` and ``translated`` derive per-layer maps from ``seed``;
    ``translated`` additionally shifts each map by ``offset`` (in output-image
    pixels), scaled to the layer's resolution, with reflection padding.
    """

    kind: str = "off"
    seed: int = 0
    offset: tuple = (0, 0)


NOISE_OFF = NoiseMode("off")
NOISE_RANDOM = NoiseMode("random")


def noise_fixed(seed: int) -> NoiseMode:
    return NoiseMode("fixed", seed=int(seed))


def noise_translated(seed: int, offset) -> NoiseMode:
    return NoiseMode("translated", seed=int(seed), offset=tuple(int(v) for v in offset))


def _fixed_map(seed, layer_idx, h, w):
    gen = torch.Generator().manual_seed((int(seed) * 9973 + layer_idx) % (2 ** 63))
    return torch.randn(1, 1, h, w, generator=gen)


def translate_map(x, tx, ty):
    """Shift content by (+tx, +ty) pixels with reflection padding at borders."""
    if tx == 0 and ty == 0:
        return x
    h0, w0 = x.shape[-2:]
    pad = (max(tx, 0), max(-tx, 0), max(ty, 0), max(-ty, 0))
    x = F.pad(x, pad, mode="reflect")
    return x[..., pad[3]:pad[3] + h0, pad[1]:pad[1] + w0]


# ---------------------------------------------------------------------------
# configuration and latent types


@dataclass(frozen=True)
class GeneratorConfig:
    """Static geometry of the toy style-based generator.

    The resolution table lists the output resolution of each style-modulated
    conv: 4 once, then every power of two up to ``resolution`` twice (one
    upsampling conv, one plain conv).  The entry layer is the first layer
    whose input feature is ``resolution / 32``; the layers from there up form
    the fully convolutional head reused by the student.
    """

    resolution: int = 256
    latent_dim: int = 64
    max_channels: int = 48
    channel_base: int = 1536
    embed_divisor: int = 4  # E_s consumes images at resolution / embed_divisor
    default_noise: str = "random"

    def __post_init__(self):
        self.validate()

    def validate(self):
        r = self.resolution
        if r < 128 or r & (r - 1) != 0:
            raise ConfigError(f"resolution must be a power of two >= 128, got {r}")
        if self.latent_dim <= 0 or self.max_channels <= 0:
            raise ConfigError("latent_dim and max_channels must be positive")
        table = self.resolution_table
        if table[0] != 4 or table[-1] != r:
            raise ConfigError("resolution table must start at 4 and end at resolution")
        if any(b < a for a, b in zip(table, table[1:])):
            raise ConfigError("resolution table must be non-decreasing")
        if self.entry_resolution not in table:
            raise ConfigError("entry resolution missing from the table")

    @property
    def resolution_table(self):
        table = [4]
        res = 8
        while res <= self.resolution:
            table += [res, res]
            res *= 2
        return tuple(table)

    @property
    def layer_count(self):
        return len(self.resolution_table)

    @property
    def entry_resolution(self):
        return self.resolution // 32

    @property
    def entry_layer(self):
        """1-based index of the first layer whose input resolution is R/32."""
        for k in range(1, self.layer_count + 1):
            if self.layer_input_resolution(k) == self.entry_resolution:
                return k
        raise ConfigError("no layer with input resolution R/32")

    def layer_input_resolution(self, k):
        return 4 if k == 1 else self.resolution_table[k - 2]

    def channels(self, res):
        return min(self.max_channels, self.channel_base // res)

    @property
    def embed_resolution(self):
        return self.resolution // self.embed_divisor

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class StyleCode:
    """An extended latent: one ``latent_dim`` vector per generator layer.

    Rows below the entry layer are the structure part, the rest the color
    part.
    """

    vectors: torch.Tensor  # (L, D)
    entry_layer: int

    def __post_init__(self):
        if self.vectors.dim() != 2:
            raise ShapeError(f"style code must be (L, D), got {tuple(self.vectors.shape)}")

    @property
    def structure_part(self):
        return self.vectors[: self.entry_layer - 1]

    @property
    def color_part(self):
        return self.vectors[self.entry_layer - 1:]

    def clone(self):
        return StyleCode(self.vectors.clone(), self.entry_layer)

    def with_color(self, color_rows: torch.Tensor):
        out = self.clone()
        out.vectors[self.entry_layer - 1:] = color_rows
        return out


@dataclass(frozen=True)
class EditDirection:
    """A named latent offset; the identity direction has an all-zero delta."""

    name: str
    delta: torch.Tensor  # (L, D)


def sample_style_code(config: GeneratorConfig, seed) -> StyleCode:
    """Mapping-network surrogate: one Gaussian vector broadcast to all rows."""
    if isinstance(seed, torch.Generator):
        gen = seed
    else:
        gen = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    v = torch.randn(config.latent_dim, generator=gen)
    return StyleCode(v.expand(config.layer_count, -1).clone(), config.entry_layer)


def mix_codes(structure_src: StyleCode, color_src: StyleCode) -> StyleCode:
    """Rows below the entry layer from the first code, the rest from the second."""
    if structure_src.vectors.shape != color_src.vectors.shape:
        raise ShapeError("mixed codes must have identical (L, D)")
    if structure_src.entry_layer != color_src.entry_layer:
        raise ShapeError("mixed codes must agree on the entry layer")
    k = structure_src.entry_layer - 1
    vectors = torch.cat([structure_src.vectors[:k], color_src.vectors[k:]], dim=0)
    return StyleCode(vectors.clone(), structure_src.entry_layer)


# ---------------------------------------------------------------------------
# generator


class SynthesisLayer(nn.Module):
    """One style-modulated conv with optional upsampling and a noise site."""

    def __init__(self, in_ch, out_ch, style_dim, gen, upsample, with_noise=True):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, style_dim, gen, upsample=upsample)
        self.with_noise = with_noise
        if with_noise:
            self.noise_strength = nn.Parameter(torch.tensor(0.02))

    def forward(self, x, style_vec, noise_map=None):
        out = self.conv(x, style_vec)
        if noise_map is not None:
            out = out + self.noise_strength * noise_map
        return act(out)


class ToyGenerator(nn.Module):
    """Style-based generator at desk scale; fully convolutional above the const."""

    def __init__(self, config: GeneratorConfig, gen: torch.Generator):
        super().__init__()
        self.config = config
        c4 = config.channels(4)
        self.const = nn.Parameter(seeded_normal_(torch.empty(c4, 4, 4), gen))
        layers = []
        in_ch = c4
        for k, res in enumerate(config.resolution_table, start=1):
            out_ch = config.channels(res)
            upsample = res != config.layer_input_resolution(k)
            layers.append(SynthesisLayer(in_ch, out_ch, config.latent_dim, gen, upsample))
            in_ch = out_ch
        self.layers = nn.ModuleList(layers)
        self.to_rgb = nn.Conv2d(in_ch, 3, 1)
        seeded_normal_(self.to_rgb.weight, gen, std=1.0 / math.sqrt(in_ch))
        with torch.no_grad():
            self.to_rgb.bias.zero_()

    def _noise_map(self, noise: NoiseMode, k, shape):
        b, _, h, w = shape
        if noise.kind == "off":
            return None
        if noise.kind == "random":
            return torch.randn(b, 1, h, w)
        if noise.kind == "fixed":
            return _fixed_map(noise.seed, k, h, w)
        if noise.kind == "translated":
            res = self.config.resolution_table[k - 1]
            factor = self.config.resolution // res
            tx = int(round(noise.offset[0] / factor))
            ty = int(round(noise.offset[1] / factor))
            return translate_map(_fixed_map(noise.seed, k, h, w), tx, ty)
        raise ConfigError(f"unknown noise kind {noise.kind!r}")

    def forward(self, w, noise: NoiseMode = NOISE_OFF, *, const_scale=1,
                features_in=None, start_layer=1, return_input_of=None,
                residual_hook=None):
        """Run layers ``start_layer..L`` and decode to an image.

        ``w``: (B, L, D).  ``features_in`` replaces the const input when
        starting from a later layer.  ``return_input_of=k`` returns the input
        feature of layer ``k`` instead of the image.  ``residual_hook(k, f, w)``
        may transform the feature after layer ``k`` (used by the exemplar
        variant).
        """
        L = self.config.layer_count
        if w.dim() != 3 or w.shape[1] != L:
            raise ShapeError(f"style batch must be (B, {L}, D), got {tuple(w.shape)}")
        if start_layer == 1:
            f = self.const[None].expand(w.shape[0], -1, -1, -1)
            if const_scale != 1:
                f = F.interpolate(f, scale_factor=const_scale, mode="nearest")
        else:
            if features_in is None:
                raise ShapeError("features_in required when start_layer > 1")
            f = features_in
        for k in range(start_layer, L + 1):
            if return_input_of == k:
                return f
            layer = self.layers[k - 1]
            shape = (f.shape[0], 1,
                     f.shape[2] * (2 if layer.conv.upsample else 1),
                     f.shape[3] * (2 if layer.conv.upsample else 1))
            noise_map = self._noise_map(noise, k, shape) if layer.with_noise else None
            f = layer(f, w[:, k - 1], noise_map)
            if residual_hook is not None:
                f = residual_hook(k, f, w)
        if return_input_of is not None:
            raise ShapeError(f"layer index out of range: {return_input_of}")
        return torch.tanh(self.to_rgb(f))


def modres_layer_plan(config: GeneratorConfig):
    """Structure layers carrying the extrinsic residual blocks, coarsest first.

    Returns (layer index, style row) per block; blocks are distributed over
    the layers below the entry layer.
    """
    n_struct = config.entry_layer - 1
    if n_struct < 1:
        raise ConfigError("config has no structure layers to modulate")
    plan = []
    for i in range(MODRES_BLOCK_COUNT):
        layer = min(i + 1, n_struct)
        plan.append((layer, layer - 1))
    return plan


class ExemplarGenerator(nn.Module):
    """Exemplar-variant teacher: base generator plus an extrinsic style path.

    The base weights equal the source generator so that zero structure and
    color degree reproduce the source face exactly; stylization enters purely
    through degree-scaled residual blocks and color-code interpolation.
    """

    def __init__(self, base: ToyGenerator, gen: torch.Generator, residual_scale=0.5):
        super().__init__()
        self.base = base
        self.config = base.config
        self.plan = modres_layer_plan(self.config)
        self.modres = nn.ModuleList([
            ModResBlock(self.config.channels(self.config.resolution_table[layer - 1]),
                        self.config.latent_dim, gen, init_scale=residual_scale)
            for layer, _ in self.plan
        ])

    def forward(self, w_int, w_ext, d_s, d_c, noise: NoiseMode = NOISE_OFF, **kw):
        """``w_int``/``w_ext``: (B, L, D); degrees are scalars in [0, 1]."""
        for name, v in (("d_s", d_s), ("d_c", d_c)):
            if not 0.0 <= float(v) <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")
        k = self.config.entry_layer - 1
        w_eff = w_int.clone()
        if d_c > 0:
            w_eff[:, k:] = (1.0 - d_c) * w_int[:, k:] + d_c * w_ext[:, k:]

        def hook(layer, f, _w):
            if d_s == 0:
                return f
            for (site, row), block in zip(self.plan, self.modres):
                if site == layer:
                    f = f + d_s * block(f, w_ext[:, row])
            return f

        return self.base(w_eff, noise, residual_hook=hook if d_s > 0 else None, **kw)


# ---------------------------------------------------------------------------
# inversion embedder


class StyleEmbedder(nn.Module):
    """Small convolutional regressor inverting G0 images back to style codes."""

    def __init__(self, config: GeneratorConfig, gen: torch.Generator):
        super().__init__()
        self.config = config
        widths = (16, 32, 48, 64)
        res = config.embed_resolution
        convs = []
        in_ch = 3
        for wdt in widths:
            convs.append(ConvLayer(in_ch, wdt, gen, stride=2))
            in_ch = wdt
            res //= 2
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(in_ch * res * res,
                              config.layer_count * config.latent_dim)
        seeded_normal_(self.head.weight, gen, std=1.0 / math.sqrt(in_ch * res * res))
        with torch.no_grad():
            self.head.bias.zero_()

    def forward(self, img):
        r = self.config.embed_resolution
        if img.shape[-2:] != (r, r) or img.shape[-3] != 3:
            raise ShapeError(f"embedder expects 3x{r}x{r} images, got {tuple(img.shape)}")
        f = img
        for conv in self.convs:
            f = conv(f)
        out = self.head(f.flatten(1))
        return out.view(-1, self.config.layer_count, self.config.latent_dim)


# ---------------------------------------------------------------------------
# bundle and public operations


@dataclass
class TeacherBundle:
    """Immutable collection of frozen teacher networks and metadata."""

    config: GeneratorConfig
    seed: int
    regime: str
    g0: ToyGenerator
    g1: ToyGenerator
    g1x: ExemplarGenerator
    embedder: StyleEmbedder
    edit_directions: dict = field(default_factory=dict)
    fit_error: float = float("inf")
    embed_eval_seed: int = 0

    def freeze(self):
        for net in (self.g0, self.g1, self.g1x, self.embedder):
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
        return self


def _downsample(img, factor):
    return F.avg_pool2d(img, factor)


def _procedural_render(codes, size):
    """Seed-free toy image domain: smooth blobs parameterized by the code."""
    b, d = codes.shape[0], codes.shape[1]
    ys, xs = torch.meshgrid(torch.linspace(-1, 1, size),
                            torch.linspace(-1, 1, size), indexing="ij")
    imgs = []
    for i in range(b):
        v = codes[i]
        bg = 0.3 * v[0] * xs + 0.3 * v[1] * ys
        face = torch.sigmoid(8 * (0.6 + 0.2 * torch.tanh(v[2])
                                  - torch.sqrt((xs - 0.2 * torch.tanh(v[3])) ** 2
                                               + 1.3 * ys ** 2)))
        eyes = torch.zeros_like(xs)
        for sx in (-0.25, 0.25):
            eyes = eyes + torch.sigmoid(30 * (0.08 + 0.03 * torch.tanh(v[4])
                                              - torch.sqrt((xs - sx) ** 2
                                                           + (ys + 0.15) ** 2)))
        mouth = torch.sigmoid(25 * (0.12 - torch.sqrt(2 * (xs ** 2)
                                                      + (ys - 0.35) ** 2)))
        chans = torch.stack([
            bg + 0.8 * face - eyes - 0.5 * mouth,
            bg + 0.6 * face - eyes + 0.4 * torch.tanh(v[5 % d]) * mouth,
            bg + 0.4 * face - 0.5 * eyes - mouth,
        ])
        imgs.append(chans.clamp(-1, 1))
    return torch.stack(imgs)


def _fit_procedural(g0: ToyGenerator, gen: torch.Generator, iters=200, batch=4):
    """Optionally pull G0's outputs toward the procedural toy-image domain."""
    opt = torch.optim.Adam(g0.parameters(), lr=2e-3)
    cfg = g0.config
    size = cfg.resolution // 4
    for _ in range(iters):
        v = torch.randn(batch, cfg.latent_dim, generator=gen)
        w = v[:, None, :].expand(-1, cfg.layer_count, -1)
        target = _procedural_render(v, size)
        loss = F.mse_loss(_downsample(g0(w, NOISE_OFF), 4), target)
        opt.zero_grad()
        loss.backward()
        opt.step()


def _train_embedder(embedder, g0, gen, batch=4, max_iters=500):
    """Brief inversion fit; stops once the smoothed loss halves."""
    opt = torch.optim.Adam(embedder.parameters(), lr=1e-3)
    cfg = g0.config
    initial = None
    smoothed = None
    for it in range(max_iters):
        v = torch.randn(batch, cfg.latent_dim, generator=gen)
        w = v[:, None, :].expand(-1, cfg.layer_count, -1)
        with torch.no_grad():
            imgs = _downsample(g0(w, NOISE_OFF), cfg.embed_divisor)
        loss = F.mse_loss(embedder(imgs), w)
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = float(loss.detach())
        smoothed = val if smoothed is None else 0.9 * smoothed + 0.1 * val
        if initial is None:
            initial = smoothed
        if it >= 20 and smoothed < 0.5 * initial:
            break


def build_toy_teacher(config: GeneratorConfig, seed: int, regime: str = "random") -> TeacherBundle:
    """Deterministically build the frozen teacher bundle from a seed."""
    config.validate()
    if regime not in ("random", "fitted"):
        raise ConfigError(f"unknown regime {regime!r}")
    gen = torch.Generator().manual_seed(int(seed) % (2 ** 63))

    g0 = ToyGenerator(config, gen)
    if regime == "fitted":
        _fit_procedural(g0, gen)

    g1 = copy.deepcopy(g0)
    entry = config.entry_layer
    with torch.no_grad():
        # structure perturbation below the entry layer
        for k in range(1, entry):
            wt = g1.layers[k - 1].conv.weight
            wt.add_(0.3 * wt.std() * torch.randn(wt.shape, generator=gen))
        # fixed affine color/texture shift in the head
        for k in range(entry, config.layer_count + 1):
            bias = g1.layers[k - 1].conv.affine.bias
            bias.add_(0.15 * torch.randn(bias.shape, generator=gen))
        mix = torch.eye(3) + 0.25 * torch.randn(3, 3, generator=gen)
        g1.to_rgb.weight.copy_(torch.einsum("ij,jkhw->ikhw", mix, g1.to_rgb.weight))
        g1.to_rgb.bias.add_(0.2 * torch.randn(3, generator=gen))

    g1x = ExemplarGenerator(copy.deepcopy(g0), gen)

    directions = {"identity": EditDirection(
        "identity", torch.zeros(config.layer_count, config.latent_dim))}
    basis = []
    for name in EDIT_DIRECTION_NAMES[1:]:
        delta = torch.randn(config.layer_count, config.latent_dim, generator=gen)
        flat = delta.flatten()
        for prev in basis:
            flat = flat - (flat @ prev) * prev
        flat = flat / flat.norm()
        basis.append(flat)
        directions[name] = EditDirection(name, flat.view_as(delta).clone())

    embedder = StyleEmbedder(config, gen)
    _train_embedder(embedder, g0, gen)

    eval_seed = (int(seed) * 7 + 1) % (2 ** 63)
    eval_gen = torch.Generator().manual_seed(eval_seed)
    with torch.no_grad():
        errs = []
        for _ in range(8):
            w = sample_style_code(config, eval_gen)
            ref = g0(w.vectors[None], NOISE_OFF)
            code = embedder(_downsample(ref, config.embed_divisor))
            rec = g0(code, NOISE_OFF)
            errs.append(float((rec - ref).norm()))
        fit_error = max(errs)

    bundle = TeacherBundle(config=config, seed=int(seed), regime=regime,
                           g0=g0, g1=g1, g1x=g1x, embedder=embedder,
                           edit_directions=directions, fit_error=fit_error,
                           embed_eval_seed=eval_seed)
    return bundle.freeze()


def save_teacher(bundle: TeacherBundle, path: str):
    """Write the bundle to the shared archive format; bytes are
    deterministic for identical content."""
    from . import checkpoint as ckpt
    arrays = {}
    for name, net in (("g0", bundle.g0), ("g1", bundle.g1),
                      ("g1x", bundle.g1x), ("embedder", bundle.embedder)):
        arrays.update(ckpt.state_dict_to_arrays(net, f"{name}/"))
    for name, d in bundle.edit_directions.items():
        arrays[f"edit/{name}"] = d.delta.numpy()
    config = {"kind": "teacher",
              "generator": bundle.config.to_dict(),
              "seed": bundle.seed,
              "regime": bundle.regime,
              "fit_error": bundle.fit_error,
              "embed_eval_seed": bundle.embed_eval_seed,
              "edit_names": sorted(bundle.edit_directions)}
    ckpt.save_archive(path, arrays, config)


def load_teacher(path: str) -> TeacherBundle:
    from . import checkpoint as ckpt
    from .errors import CheckpointError
    arrays, config = ckpt.load_archive(path)
    if config.get("kind") != "teacher":
        raise CheckpointError(f"{path} is not a teacher archive")
    cfg = GeneratorConfig(**config["generator"])
    gen = torch.Generator().manual_seed(0)
    g0 = ToyGenerator(cfg, gen)
    g1 = ToyGenerator(cfg, gen)
    g1x = ExemplarGenerator(ToyGenerator(cfg, gen), gen)
    embedder = StyleEmbedder(cfg, gen)
    for name, net in (("g0", g0), ("g1", g1), ("g1x", g1x),
                      ("embedder", embedder)):
        ckpt.load_arrays_into(net, arrays, f"{name}/")
    directions = {}
    for name in config["edit_names"]:
        delta = torch.from_numpy(arrays[f"edit/{name}"].copy())
        directions[name] = EditDirection(name, delta)
    bundle = TeacherBundle(config=cfg, seed=config["seed"],
                           regime=config["regime"], g0=g0, g1=g1, g1x=g1x,
                           embedder=embedder, edit_directions=directions,
                           fit_error=config["fit_error"],
                           embed_eval_seed=config["embed_eval_seed"])
    return bundle.freeze()


# --- operations -------------------------------------------------------------


def synthesize(generator: ToyGenerator, w: StyleCode, noise: NoiseMode = NOISE_OFF,
               **kw) -> torch.Tensor:
    """Decode one style code to a (3, R, R) image in [-1, 1]."""
    _check_code(generator.config, w)
    with torch.no_grad():
        return generator(w.vectors[None], noise, **kw)[0]


def synthesize_exemplar(g1x: ExemplarGenerator, w_int: StyleCode, w_ext: StyleCode,
                        d_s: float, d_c: float,
                        noise: NoiseMode = NOISE_OFF) -> torch.Tensor:
    """Exemplar-conditioned decode with structure/color degrees."""
    _check_code(g1x.config, w_int)
    _check_code(g1x.config, w_ext)
    with torch.no_grad():
        return g1x(w_int.vectors[None], w_ext.vectors[None], d_s, d_c, noise)[0]


def embed(embedder: StyleEmbedder, image: torch.Tensor) -> StyleCode:
    """Invert an image at the embedding resolution into a style code."""
    if not torch.isfinite(image).all():
        raise InputError("embedder input contains non-finite values")
    with torch.no_grad():
        vecs = embedder(image[None])[0]
    return StyleCode(vecs, embedder.config.entry_layer)


def mid_feature(generator: ToyGenerator, w: StyleCode, layer: int,
                noise: NoiseMode = NOISE_OFF, **kw) -> torch.Tensor:
    """The input feature of the given 1-based layer."""
    _check_code(generator.config, w)
    if not 1 <= layer <= generator.config.layer_count:
        raise ShapeError(f"layer index out of range: {layer}")
    with torch.no_grad():
        return generator(w.vectors[None], noise, return_input_of=layer, **kw)[0]


def decode_from(generator: ToyGenerator, feature: torch.Tensor, w: StyleCode,
                start_layer: int, noise: NoiseMode = NOISE_OFF) -> torch.Tensor:
    """Decode a feature through layers ``start_layer..L`` to an image."""
    _check_code(generator.config, w)
    with torch.no_grad():
        return generator(w.vectors[None], noise, features_in=feature[None],
                         start_layer=start_layer)[0]


def _check_code(config: GeneratorConfig, w: StyleCode):
    expected = (config.layer_count, config.latent_dim)
    if tuple(w.vectors.shape) != expected:
        raise ShapeError(f"style code must be {expected}, got {tuple(w.vectors.shape)}")
