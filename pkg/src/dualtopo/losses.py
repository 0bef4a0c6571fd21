"""Supervised, intra-frame consistency and pseudo-label objectives, and the
weighted total.

Frame-level tensors are (B, H, W); point sets are boolean masks of the same
shape (or :class:`~dualtopo.sdt.TopoPointSet` for single frames). A mean over
an empty point set contributes 0 and is counted in :data:`degeneracy`.
"""
import math
import threading
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .sdt import BOUNDARY_THRESHOLD, SKELETON_THRESHOLD, TopoPointSet

DICE_EPS = 1e-5

BREAKDOWN_COLUMNS = ("L_seg", "L_reg", "L_ps", "L_tc1", "L_tc2", "L_f", "L_ctc_pts")
SUPERVISED_TERMS = ("L_seg", "L_reg")
UNSUPERVISED_TERMS = ("L_ps", "L_tc1", "L_tc2", "L_f", "L_ctc_pts")


class DegeneracyCounter:
    """Thread-safe tally of empty point sets / supports seen by the losses."""

    def __init__(self):
        self._lock = threading.Lock()
        self.counts = {}

    def add(self, key, n=1):
        if n:
            with self._lock:
                self.counts[key] = self.counts.get(key, 0) + int(n)

    def get(self, key):
        with self._lock:
            return self.counts.get(key, 0)

    def reset(self):
        with self._lock:
            self.counts.clear()


degeneracy = DegeneracyCounter()


@dataclass
class LossWeights:
    w_seg: float = 1.0
    w_reg: float = 1.0
    w_ps: float = 1.0
    w_itc: float = 1.0
    w_ctc: float = 1.0
    rampup_steps: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0, got {v}")

    def ramp(self, step):
        """Gaussian ramp-up factor exp(-5 (1 - t)^2), t = min(step / rampup_steps, 1)."""
        if self.rampup_steps <= 0:
            return 1.0
        t = min(max(step, 0) / self.rampup_steps, 1.0)
        return math.exp(-5.0 * (1.0 - t) ** 2)


def _frames(x):
    x = torch.as_tensor(x)
    return x[None] if x.dim() == 2 else x


def _mask(points, like):
    if isinstance(points, TopoPointSet):
        m = torch.as_tensor(points.indicator())
    elif isinstance(points, np.ndarray):
        m = torch.as_tensor(points.astype(bool))
    else:
        m = torch.as_tensor(points)
    m = m.to(device=like.device, dtype=torch.bool)
    return m[None].expand_as(like) if m.dim() == 2 else m


def set_mean(values, mask, key=None):
    """Per-frame mean of ``values`` over ``mask``; 0 for empty masks. Returns (B,)."""
    count = mask.flatten(1).sum(1)
    total = (values * mask).flatten(1).sum(1)
    if key is not None:
        degeneracy.add(key, int((count == 0).sum()))
    return torch.where(count > 0, total / count.clamp(min=1), total.new_zeros(()))


def dice_loss(seg, gt, eps=DICE_EPS):
    """1 - mean foreground-class soft Dice, sums taken over the whole batch.

    ``seg`` and ``gt`` are (B, C, H, W) or (C, H, W); channel 0 is background.
    """
    seg = torch.as_tensor(seg)
    gt = torch.as_tensor(gt).to(seg.dtype)
    if seg.shape != gt.shape:
        raise ValueError(f"prediction {tuple(seg.shape)} and target {tuple(gt.shape)} differ")
    if seg.dim() == 3:
        seg, gt = seg[None], gt[None]
    dims = (0, 2, 3)
    inter = (seg * gt).sum(dims)[1:]
    denom = seg.sum(dims)[1:] + gt.sum(dims)[1:]
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


def one_hot(mask, num_classes):
    m = torch.as_tensor(np.asarray(mask) if isinstance(mask, np.ndarray) else mask).long()
    return F.one_hot(m, num_classes).movedim(-1, -3).float()


def l1_reg_loss(pred, label, support):
    """Mean |pred - label| over the label support (background ignored).

    An empty support gives 0 and is counted as ``"reg_support"``.
    """
    pred, label = _frames(pred), _frames(label).to(torch.as_tensor(pred).dtype)
    support = _mask(support, pred)
    n = support.sum()
    if n == 0:
        degeneracy.add("reg_support")
        return pred.sum() * 0.0
    return ((pred - label).abs() * support).sum() / n


def topo_terms(values, zk, zb, key=""):
    """Per-frame skeleton/boundary consistency: mean |v - 1| over zk + mean v over zb."""
    values = _frames(values)
    zk, zb = _mask(zk, values), _mask(zb, values)
    return set_mean((values - 1.0).abs(), zk, key and key + "_skeleton") + set_mean(values, zb, key and key + "_boundary")


def tc1_loss(pred, zk, zb):
    """SDT prediction against the label skeleton (ideal 1) and boundary (ideal 0)."""
    return topo_terms(pred, zk, zb, "tc1").mean()


def predicted_point_masks(sdt, tau_boundary=BOUNDARY_THRESHOLD, tau_skeleton=SKELETON_THRESHOLD):
    """Skeleton / boundary masks thresholded from a predicted SDT; no gradient."""
    sdt = _frames(sdt).detach()
    return sdt >= tau_skeleton, (sdt > 0) & (sdt <= tau_boundary)


def tc2_loss(seg_fg, zk_hat, zb_hat):
    """Foreground probability against skeleton / boundary sets of the same frame's SDT."""
    return topo_terms(seg_fg, zk_hat, zb_hat, "tc2").mean()


def itc_frame_loss(seg_fg, sdt, zk=None, zb=None, tau_boundary=BOUNDARY_THRESHOLD, tau_skeleton=SKELETON_THRESHOLD):
    """tc1 + tc2 of single frames; tc1 only when label sets ``zk``/``zb`` are given."""
    zk_hat, zb_hat = predicted_point_masks(sdt, tau_boundary, tau_skeleton)
    out = tc2_loss(seg_fg, zk_hat, zb_hat)
    if zk is not None or zb is not None:
        like = _frames(sdt)
        zk = zk if zk is not None else torch.zeros_like(like, dtype=torch.bool)
        zb = zb if zb is not None else torch.zeros_like(like, dtype=torch.bool)
        out = out + tc1_loss(sdt, zk, zb)
    return out


def itc_terms(bundle, label_sets=None, labeled=None, tau_boundary=BOUNDARY_THRESHOLD, tau_skeleton=SKELETON_THRESHOLD):
    """(tc1, tc2) of a pair batch, each summed over the two frames.

    ``label_sets`` is ``((zk_t, zb_t), (zk_t1, zb_t1))`` from the SDT labels, or
    None for an all-unlabeled batch. ``labeled`` is a (B,) bool vector marking
    which pairs carry labels; tc1 is averaged over labeled pairs only, tc2
    over all pairs.
    """
    frames = ((bundle.fg_t, bundle.sdt_t), (bundle.fg_t1, bundle.sdt_t1))
    n = bundle.sdt_t.shape[0]
    if labeled is None:
        labeled = torch.full((n,), label_sets is not None, dtype=torch.bool)
    labeled = torch.as_tensor(labeled, dtype=torch.bool)
    tc1 = bundle.sdt_t.new_zeros(())
    tc2 = bundle.sdt_t.new_zeros(())
    for i, (fg, sdt) in enumerate(frames):
        zk_hat, zb_hat = predicted_point_masks(sdt, tau_boundary, tau_skeleton)
        tc2 = tc2 + topo_terms(fg, zk_hat, zb_hat, "tc2").mean()
        if label_sets is not None and labeled.any():
            zk, zb = label_sets[i]
            per = topo_terms(sdt[labeled], _mask(zk, sdt)[labeled], _mask(zb, sdt)[labeled], "tc1")
            tc1 = tc1 + per.mean()
    return tc1, tc2


def itc_loss(bundle, label_sets=None, labeled=None, **kw):
    tc1, tc2 = itc_terms(bundle, label_sets, labeled, **kw)
    return tc1 + tc2


def sharpen(p, temperature):
    """p^(1/T) / (p^(1/T) + (1-p)^(1/T)), computed stably in log space."""
    p = p.clamp(1e-12, 1 - 1e-12)
    return torch.sigmoid((torch.log(p) - torch.log1p(-p)) / temperature)


@dataclass
class SdtToMask:
    """Soft foreground mask implied by an SDT: steep sigmoid then 3x3 max (undoes the zero boundary ring)."""

    center: float = 0.04
    temperature: float = 0.01
    dilate: bool = True

    def __call__(self, sdt):
        m = torch.sigmoid((sdt - self.center) / self.temperature)
        if self.dilate:
            m = F.max_pool2d(m[:, None], 3, stride=1, padding=1)[:, 0]
        return m


def pseudo_label_terms(fg, sdt, temperature=0.1, sdt_to_mask=None):
    """Per-frame symmetric sharpened-teacher MSE between the two heads. Returns (B,)."""
    fg, sdt = _frames(fg), _frames(sdt)
    to_mask = sdt_to_mask or SdtToMask()
    m = to_mask(sdt)
    teach_m = sharpen(fg.detach(), temperature)
    teach_fg = sharpen(m.detach(), temperature)
    return ((m - teach_m) ** 2).flatten(1).mean(1) + ((fg - teach_fg) ** 2).flatten(1).mean(1)


def pseudo_label_loss(bundle, temperature=0.1, sdt_to_mask=None):
    """Mutual-consistency pseudo-label loss averaged over both frames and the batch."""
    t = pseudo_label_terms(bundle.fg_t, bundle.sdt_t, temperature, sdt_to_mask)
    t1 = pseudo_label_terms(bundle.fg_t1, bundle.sdt_t1, temperature, sdt_to_mask)
    return 0.5 * (t.mean() + t1.mean())


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"non-finite loss term {term} = {value}")
        self.term = term


def total_loss(parts, weights, step):
    """Weighted sum of loss parts; unsupervised terms scaled by the ramp-up factor.

    ``parts`` maps names from :data:`BREAKDOWN_COLUMNS` to scalars (missing
    terms count as 0). L_tc1 + L_tc2 form the ITC term and L_f + L_ctc_pts the
    CTC term, unless ``L_ITC`` / ``L_CTC`` are given directly.
    """
    for k, v in parts.items():
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLoss(k, val)
    ramp = weights.ramp(step)
    g = parts.get
    sup = weights.w_seg * g("L_seg", 0.0) + weights.w_reg * g("L_reg", 0.0)
    itc = g("L_ITC", g("L_tc1", 0.0) + g("L_tc2", 0.0))
    ctc = g("L_CTC", g("L_f", 0.0) + g("L_ctc_pts", 0.0))
    unsup = weights.w_ps * g("L_ps", 0.0) + weights.w_itc * itc + weights.w_ctc * ctc
    return sup + ramp * unsup
