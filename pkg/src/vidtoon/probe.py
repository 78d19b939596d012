"""Feature-surgery experiments on the teacher generator.

Each probe edits the feature at a mid layer (default: the output of the
layer just below the entry layer), decodes it through the remaining
layers, and compares against the reference decode transformed in image
space.  Errors are mean absolute differences over the interior, excluding
a border band contaminated by padding and the applied shift.  Decodes run
on an enlarged constant input so a non-trivial interior exists.
"""

import math
import os
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import DomainError
from .teacher import (NOISE_OFF, StyleCode, TeacherBundle, decode_from,
                      mid_feature, noise_fixed, noise_translated, synthesize,
                      translate_map)

PROBE_KINDS = ("translate", "rotate", "noise_fixed", "noise_translated",
               "noise_off_from_layer")
CONST_SCALE = 3


@dataclass
class ProbeReport:
    kind: str
    params: dict
    interior_error: float
    error_map: torch.Tensor
    grid: torch.Tensor
    band: int
    metrics: dict = field(default_factory=dict)


def head_rf_radius(config, start_layer: int) -> int:
    """Receptive-field radius, in output pixels, of layers start..L plus
    the 1x1 output conv: each 3x3 conv adds one pixel at its own scale."""
    r = 0
    for k in range(start_layer, config.layer_count + 1):
        r += config.resolution // config.resolution_table[k - 1]
    return r


def interior_mean_abs(diff: torch.Tensor, band: int) -> float:
    h, w = diff.shape[-2:]
    if 2 * band >= min(h, w):
        raise DomainError(f"border band {band} leaves no interior in "
                          f"{w}x{h}")
    inner = diff[..., band:h - band, band:w - band]
    return float(inner.abs().mean())


def rotate_feature(f: torch.Tensor, angle: float) -> torch.Tensor:
    rad = math.radians(angle)
    cos, sin = math.cos(rad), math.sin(rad)
    theta = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]],
                         dtype=f.dtype).unsqueeze(0)
    x = f[None]
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear",
                         padding_mode="reflection", align_corners=False)[0]


def _decode(bundle, feat, w, start, noise):
    return decode_from(bundle.g0, feat, w, start_layer=start, noise=noise)


def run_probe(bundle: TeacherBundle, kind: str, params: dict,
              w: StyleCode) -> ProbeReport:
    """Run one experiment; see PROBE_KINDS.

    params: ``layer`` (mid layer, default entry-1), ``offset`` (output
    pixels, translate/noise kinds), ``angle`` (degrees, rotate),
    ``from_layer`` (noise_off_from_layer), ``seed`` (noise kinds).
    """
    if kind not in PROBE_KINDS:
        raise DomainError(f"unknown probe kind {kind!r}")
    cfg = bundle.config
    layer = int(params.get("layer", cfg.entry_layer - 1))
    if not 1 <= layer < cfg.layer_count:
        raise DomainError(f"mid layer {layer} out of range")
    start = layer + 1
    feat_res_factor = cfg.resolution // cfg.resolution_table[layer - 1]
    seed = int(params.get("seed", 0))
    rf = head_rf_radius(cfg, start)

    if kind == "noise_off_from_layer":
        from_layer = int(params.get("from_layer", cfg.layer_count))
        if not cfg.entry_layer <= from_layer <= cfg.layer_count:
            raise DomainError(f"from_layer {from_layer} out of range")
        noise = noise_fixed(seed)
        ref = synthesize(bundle.g0, w, noise=noise)
        feat = mid_feature(bundle.g0, w, from_layer, noise=noise)
        test = _decode(bundle, feat, w, from_layer, NOISE_OFF)
        diff = (test - ref).abs()
        err = interior_mean_abs(diff, rf)
        return ProbeReport(kind, {"from_layer": from_layer, "seed": seed},
                           err, diff, torch.stack([ref, test]), rf)

    const_scale = CONST_SCALE + 1 if kind == "rotate" else CONST_SCALE
    feat = mid_feature(bundle.g0, w, start, noise=NOISE_OFF,
                       const_scale=const_scale)

    if kind == "rotate":
        angle = float(params.get("angle", 10.0))
        if abs(angle) > 15.0:
            raise DomainError(f"rotation angle {angle} exceeds 15 degrees")
        ref = _decode(bundle, feat, w, start, NOISE_OFF)
        test = _decode(bundle, rotate_feature(feat, angle), w, start, NOISE_OFF)
        ref_rot = rotate_feature(ref, angle)
        # the band also covers pixels swept across the border by rotation
        sweep = int(math.ceil(math.sin(math.radians(abs(angle)))
                              * max(ref.shape[-2:]) / 2))
        band = rf + sweep
        diff = (test - ref_rot).abs()
        err = interior_mean_abs(diff, band)
        # round trip measured on the feature itself: decoding only amplifies
        # the bilinear loss, the property bounds the interpolation error
        rt = rotate_feature(rotate_feature(feat, angle), -angle)
        fband = 1 + int(math.ceil(math.sin(math.radians(abs(angle)))
                                  * feat.shape[-1] / 2))
        fdiff = (rt - feat)[..., fband:-fband, fband:-fband]
        peak = float(feat.max() - feat.min())
        mse = float((fdiff ** 2).mean())
        metrics = {"roundtrip_psnr": 10 * math.log10(peak ** 2 / max(mse, 1e-12))}
        return ProbeReport(kind, {"angle": angle}, err, diff,
                           torch.stack([ref_rot, test]), band, metrics)

    # translation kinds share the shifted-feature protocol
    offset = params.get("offset", (feat_res_factor, 0))
    if isinstance(offset, (int, float)):
        offset = (int(offset), 0)
    tx, ty = int(offset[0]), int(offset[1])
    if max(abs(tx), abs(ty)) > cfg.resolution // 8:
        raise DomainError(f"translate offset {offset} exceeds R/8")
    ftx, fty = tx // feat_res_factor, ty // feat_res_factor
    if ftx * feat_res_factor != tx or fty * feat_res_factor != ty:
        raise DomainError(f"offset {offset} is not a multiple of the mid "
                          f"layer's scale factor {feat_res_factor}")
    shifted = translate_map(feat[None], ftx, fty)[0]

    if kind == "translate":
        ref_noise = test_noise = NOISE_OFF
    elif kind == "noise_fixed":
        ref_noise = test_noise = noise_fixed(seed)
    else:
        ref_noise = noise_fixed(seed)
        test_noise = noise_translated(seed, (tx, ty))
    ref = _decode(bundle, feat, w, start, ref_noise)
    test = _decode(bundle, shifted, w, start, test_noise)
    ref_shift = translate_map(ref[None], tx, ty)[0]
    band = rf + max(abs(tx), abs(ty))
    diff = (test - ref_shift).abs()
    err = interior_mean_abs(diff, band)
    return ProbeReport(kind, {"offset": (tx, ty), "seed": seed}, err, diff,
                       torch.stack([ref_shift, test]), band)


def _to_png(img: torch.Tensor, path: str):
    from PIL import Image
    arr = img.detach()
    if arr.dim() == 3 and arr.shape[0] in (1, 3):
        arr = arr.permute(1, 2, 0)
    arr = arr.clamp(-1, 1).add(1).mul(127.5).byte().numpy()
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def write_report(report: ProbeReport, out_dir: str):
    """Emit PNG grids, the error map, and a metrics text file."""
    os.makedirs(out_dir, exist_ok=True)
    for i, img in enumerate(report.grid):
        _to_png(img, os.path.join(out_dir, f"grid_{i}.png"))
    emap = report.error_map
    scale = float(emap.max()) or 1.0
    _to_png(emap / scale * 2 - 1, os.path.join(out_dir, "error_map.png"))
    with open(os.path.join(out_dir, "metrics.txt"), "w") as f:
        f.write(f"kind: {report.kind}\n")
        f.write(f"params: {report.params}\n")
        f.write(f"interior_band_px: {report.band}\n")
        f.write(f"interior_mean_abs_error: {report.interior_error:.8f}\n")
        for k, v in report.metrics.items():
            f.write(f"{k}: {v}\n")
