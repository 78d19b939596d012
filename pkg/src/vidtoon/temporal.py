"""Flow warping, parsing-map smoothing, and temporal evaluation helpers.

Flow convention throughout: a flow field f maps frame j onto frame i, and
``warp(img, f)`` samples the source at ``p - f(p)``.  Flows and occlusion
masks are supplied by a provider, either a dict keyed by ``(j, i)`` or a
callable ``provider(j, i)``, so ground-truth pan flows and an external
estimator are interchangeable.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class SmoothingParams:
    k: int = 5
    sigma_t: float = 5.5
    sigma_s: float = 0.2

    def validate(self):
        if self.k < 0:
            raise DomainError("window radius k must be non-negative")
        if self.sigma_t <= 0 or self.sigma_s <= 0:
            raise DomainError("smoothing bandwidths must be positive")


def _check_flow(img, flow):
    if img.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ShapeError("expected NCHW image and N2HW flow")
    if img.shape[0] != flow.shape[0] or img.shape[-2:] != flow.shape[-2:]:
        raise ShapeError(f"image {tuple(img.shape)} and flow "
                         f"{tuple(flow.shape)} disagree")
    if not torch.isfinite(flow).all():
        raise DomainError("flow contains non-finite values")


def warp(img: torch.Tensor, flow: torch.Tensor, *, return_valid: bool = False):
    """Backward-warp ``img`` by ``flow`` (pixels, channel 0 = x, 1 = y).

    Constant integer flows take an exact shift path; otherwise bilinear
    sampling with zero fill.  The optional validity map marks pixels whose
    source location lies inside the image.
    """
    _check_flow(img, flow)
    n, _, h, w = img.shape
    fx, fy = flow[:, 0], flow[:, 1]
    out = None
    if n == 1 and torch.equal(flow, flow.round()) \
            and fx.min() == fx.max() and fy.min() == fy.max():
        tx, ty = int(fx.flatten()[0]), int(fy.flatten()[0])
        out = torch.zeros_like(img)
        sy0, sy1 = max(0, -ty), min(h, h - ty)
        sx0, sx1 = max(0, -tx), min(w, w - tx)
        if sy1 > sy0 and sx1 > sx0:
            out[..., sy0 + ty:sy1 + ty, sx0 + tx:sx1 + tx] = \
                img[..., sy0:sy1, sx0:sx1]
    ys, xs = torch.meshgrid(torch.arange(h, dtype=img.dtype),
                            torch.arange(w, dtype=img.dtype), indexing="ij")
    src_x = xs.unsqueeze(0) - fx
    src_y = ys.unsqueeze(0) - fy
    valid = ((src_x >= 0) & (src_x <= w - 1)
             & (src_y >= 0) & (src_y <= h - 1)).unsqueeze(1).to(img.dtype)
    if out is None:
        gx = src_x / max(w - 1, 1) * 2 - 1
        gy = src_y / max(h - 1, 1) * 2 - 1
        grid = torch.stack([gx, gy], dim=-1)
        out = F.grid_sample(img, grid, mode="bilinear",
                            padding_mode="zeros", align_corners=True)
    if return_valid:
        return out, valid
    return out


def occlusion_mask(flow_fwd: torch.Tensor, flow_bwd: torch.Tensor) -> torch.Tensor:
    """Forward-backward consistency mask, 1 where the two flows agree.

    A pixel is kept when ||f_fwd + warp(f_bwd, f_fwd)|| < 1 + 0.05 ||f_fwd||.
    """
    _check_flow(flow_fwd, flow_bwd)
    bwd_at_fwd = warp(flow_bwd, flow_fwd)
    diff = (flow_fwd + bwd_at_fwd).norm(dim=1, keepdim=True)
    mag = flow_fwd.norm(dim=1, keepdim=True)
    return (diff < 1.0 + 0.05 * mag).to(flow_fwd.dtype)


def _lookup(provider, j, i):
    if provider is None:
        raise DomainError(f"missing flow or occlusion for pair ({j}, {i})")
    if callable(provider):
        return provider(j, i)
    try:
        return provider[(j, i)]
    except KeyError:
        raise DomainError(f"missing flow or occlusion for pair ({j}, {i})")


def all_ones_occlusions(frames):
    """Occlusion provider that trusts every correspondence."""
    def occ(j, i):
        f = frames[i]
        return torch.ones(f.shape[0], 1, *f.shape[-2:], dtype=f.dtype)
    return occ


def smooth_parsing(frames, parsings, flows, occlusions,
                   params: SmoothingParams = SmoothingParams()):
    """Temporally smooth every parsing map in a sequence.

    For frame i, each neighbor j within the window of radius k contributes
    its parsing warped onto frame i, weighted per pixel by
    exp(-(i-j)^2 / 2 sigma_t^2 - ||I_i - warp(I_j)||^2 / 2 sigma_s^2) times
    the occlusion mask, where the color distance is summed over channels.
    Boundary frames use the truncated window.  Pixels whose total weight is
    zero fall back to the raw parsing of frame i.
    """
    params.validate()
    if len(frames) != len(parsings) or not frames:
        raise DomainError("need equal-length, non-empty frame and parsing lists")
    out = []
    for i in range(len(parsings)):
        p_i, img_i = parsings[i], frames[i]
        num = torch.zeros_like(p_i)
        den = torch.zeros(p_i.shape[0], 1, *p_i.shape[-2:], dtype=p_i.dtype)
        for j in range(max(0, i - params.k), min(len(parsings), i + params.k + 1)):
            if j == i:
                warped_p, warped_img = p_i, img_i
                m = torch.ones_like(den)
            else:
                flow = _lookup(flows, j, i)
                warped_p, valid = warp(parsings[j], flow, return_valid=True)
                warped_img = warp(frames[j], flow)
                # out-of-frame samples carry no information, drop them even
                # when the occlusion provider trusts the correspondence
                m = _lookup(occlusions, j, i) * valid
            diff2 = ((img_i - warped_img) ** 2).sum(dim=1, keepdim=True)
            w = math.exp(-((i - j) ** 2) / (2 * params.sigma_t ** 2)) \
                * torch.exp(-diff2 / (2 * params.sigma_s ** 2)) * m
            num = num + w * warped_p
            den = den + w
        out.append(torch.where(den > 0, num / den.clamp(min=1e-12), p_i))
    return out


def synth_pan_sequence(base_frame: torch.Tensor, n_frames: int, velocity):
    """Crop a panning-camera sequence out of one larger frame.

    Returns (frames, flow_provider, occlusion_provider).  The ground-truth
    flow mapping frame j onto frame i is the constant field (j - i) *
    velocity; occlusions are all ones.
    """
    if base_frame.dim() != 4:
        raise ShapeError("expected an NCHW base frame")
    if n_frames < 1:
        raise DomainError("need at least one frame")
    vx, vy = int(velocity[0]), int(velocity[1])
    h, w = base_frame.shape[-2:]
    span_x, span_y = abs(vx) * (n_frames - 1), abs(vy) * (n_frames - 1)
    cw, ch = w - span_x, h - span_y
    if cw < 8 or ch < 8:
        raise DomainError("base frame too small for the requested pan")
    x0 = span_x if vx < 0 else 0
    y0 = span_y if vy < 0 else 0
    frames = [base_frame[..., y0 + vy * t:y0 + vy * t + ch,
                         x0 + vx * t:x0 + vx * t + cw].clone()
              for t in range(n_frames)]

    def flow_fn(j, i):
        f = torch.zeros(base_frame.shape[0], 2, ch, cw, dtype=base_frame.dtype)
        f[:, 0] = (j - i) * vx
        f[:, 1] = (j - i) * vy
        return f

    return frames, flow_fn, all_ones_occlusions(frames)


def warp_error(frames, flows, occlusions) -> float:
    """Temporal instability: mean over consecutive pairs of the masked mean
    absolute difference between frame t and frame t+1 warped onto it."""
    if len(frames) < 2:
        raise DomainError("need at least two frames")
    total = 0.0
    for t in range(len(frames) - 1):
        flow = _lookup(flows, t + 1, t)
        m = _lookup(occlusions, t + 1, t)
        warped, valid = warp(frames[t + 1], flow, return_valid=True)
        m = m * valid
        diff = (warped - frames[t]).abs() * m
        denom = float(m.sum()) * frames[t].shape[1]
        total += float(diff.sum()) / max(denom, 1.0)
    return total / (len(frames) - 1)


def temporal_variance(maps) -> float:
    """Mean per-pixel variance across a sequence of aligned maps."""
    stack = torch.stack(list(maps), dim=0)
    return float(stack.var(dim=0, unbiased=False).mean())
