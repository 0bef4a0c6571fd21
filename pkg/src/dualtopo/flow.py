"""Pixel flow between adjacent SDT predictions and the cross-frame losses.

Flow convention: a flow field holds per-pixel ``(dy, dx)`` in pixels and is
used for backward warping, ``warp(src, flow)(x) = src(x + flow(x))``. A field
whose content moves +2 columns between frames is therefore aligned by a flow
of ``dx = -2``.
"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .sdt import TopoPointSet

DEFAULT_DEPTH = 3


@dataclass
class FlowPyramid:
    """Flow levels finest first; level ``i`` has shape (B, 2, H/2**i, W/2**i)."""

    levels: list

    @property
    def finest(self):
        return self.levels[0]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def _as_batch(field):
    field = torch.as_tensor(field)
    if field.dim() == 2:
        return field[None], True
    if field.dim() == 4 and field.shape[1] == 1:
        return field[:, 0], False
    if field.dim() != 3:
        raise ValueError(f"expected a (H, W) or (B, H, W) field, got shape {tuple(field.shape)}")
    return field, False


def build_pyramid(field, depth=DEFAULT_DEPTH):
    """Average-pooling pyramid, level 0 is ``field`` itself."""
    if depth < 1:
        raise ValueError(f"pyramid depth must be >= 1, got {depth}")
    x, squeeze = _as_batch(field)
    h, w = x.shape[-2:]
    k = 2 ** (depth - 1)
    if h % k or w % k:
        ph, pw = (-h) % k, (-w) % k
        raise ValueError(f"{h}x{w} field is not divisible by {k} for depth {depth}; pad by ({ph}, {pw})")
    levels = [x]
    for _ in range(depth - 1):
        levels.append(F.avg_pool2d(levels[-1][:, None], 2)[:, 0])
    if squeeze:
        levels = [lv[0] for lv in levels]
    return levels


def warp(field, flow):
    """Backward bilinear warp with border clamping.

    ``field`` is (H, W) or (B, H, W); ``flow`` is (2, H, W) or (B, 2, H, W).
    Differentiable with respect to both arguments.
    """
    x, squeeze = _as_batch(field)
    flow = torch.as_tensor(flow)
    if flow.dim() == 3:
        flow = flow[None]
    if flow.shape[0] != x.shape[0] or flow.shape[1] != 2 or flow.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"flow {tuple(flow.shape)} does not match field {tuple(x.shape)}")
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    b, h, w = x.shape
    flow = flow.to(x.dtype)
    rows = torch.arange(h, dtype=x.dtype, device=x.device).view(1, h, 1)
    cols = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, w)
    ys = (rows + flow[:, 0]).clamp(0, h - 1)
    xs = (cols + flow[:, 1]).clamp(0, w - 1)
    y0 = ys.detach().floor()
    x0 = xs.detach().floor()
    wy = ys - y0
    wx = xs - x0
    y0 = y0.long()
    x0 = x0.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    flat = x.reshape(b, h * w)

    def tap(yy, xx):
        return torch.gather(flat, 1, (yy * w + xx).reshape(b, -1)).reshape(b, h, w)

    out = (
        (1 - wy) * (1 - wx) * tap(y0, x0)
        + (1 - wy) * wx * tap(y0, x1)
        + wy * (1 - wx) * tap(y1, x0)
        + wy * wx * tap(y1, x1)
    )
    return out[0] if squeeze else out


def upsample_flow(flow):
    """Bilinear x2 upsampling with magnitudes doubled."""
    return 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)


class FlowEstimator(nn.Module):
    """Coarse-to-fine residual flow predictor with weights shared across levels."""

    def __init__(self, depth=DEFAULT_DEPTH, width=16, seed=0):
        super().__init__()
        self.depth = depth
        state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(4, width, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, 2 * width, 3, padding=2, dilation=2),
            nn.LeakyReLU(0.1),
            nn.Conv2d(2 * width, width, 3, padding=4, dilation=4),
            nn.LeakyReLU(0.1),
            nn.Conv2d(width, 2, 3, padding=1),
        )
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.1, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)
        # start from (almost) zero flow
        self.net[-1].weight.data.mul_(0.01)
        torch.random.set_rng_state(state)

    def forward(self, r_t, r_t1):
        src, _ = _as_batch(r_t)
        ref, _ = _as_batch(r_t1)
        if src.shape != ref.shape:
            raise ValueError(f"source {tuple(src.shape)} and reference {tuple(ref.shape)} differ")
        src_pyr = build_pyramid(src, self.depth)
        ref_pyr = build_pyramid(ref, self.depth)
        coarse = src_pyr[-1]
        flow = coarse.new_zeros(coarse.shape[0], 2, *coarse.shape[-2:])
        levels = [None] * self.depth
        for i in range(self.depth - 1, -1, -1):
            if i < self.depth - 1:
                flow = upsample_flow(flow)
            warped = warp(src_pyr[i], flow)
            inp = torch.cat([warped[:, None], ref_pyr[i][:, None], flow], dim=1)
            flow = flow + self.net(inp)
            levels[i] = flow
        return FlowPyramid(levels)


def estimate_flow(estimator, r_t, r_t1):
    return estimator(r_t, r_t1)


def _as_flow(flow):
    flow = torch.as_tensor(flow)
    return flow[None] if flow.dim() == 3 else flow


def _flow_levels(flows):
    levels = flows.levels if isinstance(flows, FlowPyramid) else list(flows)
    return [_as_flow(f) for f in levels]


def flow_loss(pyr_t, pyr_t1, flows):
    """Sum over levels of the per-level mean squared warp residual."""
    levels = _flow_levels(flows)
    if not (len(pyr_t) == len(pyr_t1) == len(levels)):
        raise ValueError(f"depth mismatch: {len(pyr_t)}, {len(pyr_t1)}, {len(levels)}")
    total = 0.0
    for src, ref, fl in zip(pyr_t, pyr_t1, levels):
        src, _ = _as_batch(src)
        ref, _ = _as_batch(ref)
        total = total + ((ref - warp(src, fl)) ** 2).mean()
    return total


def _point_mask(points, shape, device):
    if points is None:
        mask = torch.zeros(shape[-2:], dtype=torch.bool, device=device)
    elif isinstance(points, TopoPointSet):
        mask = torch.as_tensor(points.indicator(), device=device)
    else:
        mask = torch.as_tensor(np.asarray(points) if isinstance(points, np.ndarray) else points)
        mask = mask.to(device=device, dtype=torch.bool)
    return mask.expand(shape) if mask.dim() == 2 else mask


def ctc_terms(r_t, r_t1, flows, zk_hat, zb_hat, normalize=True):
    """Return ``(L_f, point term)`` of the cross-frame consistency loss.

    Point sets come from the reference frame ``r_t1``. With ``normalize`` the
    squared residual is averaged over the union of points of each frame, else
    summed. Frames with an empty union contribute 0.
    """
    src, _ = _as_batch(r_t)
    ref, _ = _as_batch(r_t1)
    levels = _flow_levels(flows)
    lf = flow_loss(build_pyramid(src, len(levels)), build_pyramid(ref, len(levels)), levels)
    union = _point_mask(zk_hat, ref.shape, ref.device) | _point_mask(zb_hat, ref.shape, ref.device)
    sq = (ref - warp(src, levels[0])) ** 2
    per_frame = (sq * union).flatten(1).sum(1)
    if normalize:
        count = union.flatten(1).sum(1)
        per_frame = torch.where(count > 0, per_frame / count.clamp(min=1), per_frame.new_zeros(()))
    return lf, per_frame.mean()


def ctc_loss(r_t, r_t1, flows, zk_hat, zb_hat, normalize=True):
    lf, pts = ctc_terms(r_t, r_t1, flows, zk_hat, zb_hat, normalize)
    return lf + pts


def flow_to_color(flow, max_mag=None):
    """Colour-wheel RGB (H, W, 3) uint8 rendering of a (2, H, W) flow."""
    import matplotlib.colors as mcolors

    flow = np.asarray(flow, dtype=np.float64)
    dy, dx = flow[0], flow[1]
    mag = np.hypot(dx, dy)
    if max_mag is None:
        max_mag = max(mag.max(), 1e-9)
    hue = (np.arctan2(dy, dx) + np.pi) / (2 * np.pi)
    hsv = np.stack([hue, np.clip(mag / max_mag, 0, 1), np.ones_like(hue)], axis=-1)
    return (mcolors.hsv_to_rgb(hsv) * 255).round().astype(np.uint8)
