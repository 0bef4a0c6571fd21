"""Dice, Jaccard, HD95 and ASD per class, macro-averaged over foreground classes."""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .sdt import _boundary_mask, as_binary_mask

METRIC_NAMES = ("dice", "jaccard", "hd95", "asd")


def dice_jaccard(pred, gt):
    p = as_binary_mask(pred)
    g = as_binary_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    sp, sg = int(p.sum()), int(g.sum())
    if sp == 0 and sg == 0:
        return 1.0, 1.0
    inter = int((p & g).sum())
    return 2.0 * inter / (sp + sg), inter / (sp + sg - inter)


def _directed(src, dst, spacing):
    """Distances from every ``src`` pixel to the nearest ``dst`` pixel, in physical units."""
    d = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return d[src]


def hd95_asd(pred, gt, spacing=(1.0, 1.0)):
    """Boundary-based HD95 and ASD; ``(None, None)`` when either boundary is empty."""
    p = as_binary_mask(pred)
    g = as_binary_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if min(spacing) <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    bp, bg = _boundary_mask(p), _boundary_mask(g)
    if not bp.any() or not bg.any():
        return None, None
    d_pg = _directed(bp, bg, spacing)
    d_gp = _directed(bg, bp, spacing)
    hd95 = max(np.percentile(d_pg, 95), np.percentile(d_gp, 95))
    asd = 0.5 * (d_pg.mean() + d_gp.mean())
    return float(hd95), float(asd)


@dataclass
class MetricReport:
    per_class: dict
    macro: dict
    spacing: tuple = (1.0, 1.0)
    undefined: dict = field(default_factory=dict)
    n_images: int = 0

    def to_json(self, path=None):
        payload = {
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "macro": self.macro,
            "spacing": list(self.spacing),
            "undefined": {str(k): v for k, v in self.undefined.items()},
            "n_images": self.n_images,
        }
        text = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def csv_row(self, **extra):
        row = dict(extra)
        row.update({f"macro_{k}": self.macro[k] for k in METRIC_NAMES})
        for c, vals in self.per_class.items():
            row.update({f"c{c}_{k}": vals[k] for k in METRIC_NAMES})
        return row

    def append_csv(self, path, **extra):
        row = self.csv_row(**extra)
        exists = False
        try:
            with open(path) as fh:
                exists = bool(fh.readline())
        except FileNotFoundError:
            pass
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            if not exists:
                w.writeheader()
            w.writerow(row)


def _nanmean(values):
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(preds, gts, num_classes, spacing=(1.0, 1.0)):
    """Per-image metrics for each foreground class, averaged over images.

    ``preds`` / ``gts`` are sequences of class-index grids. HD95/ASD that are
    undefined (empty boundary) are excluded from the averages and counted in
    ``report.undefined``.
    """
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    per_image = {c: {k: [] for k in METRIC_NAMES} for c in range(1, num_classes)}
    undefined = {c: 0 for c in range(1, num_classes)}
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        for c in range(1, num_classes):
            pc, gc = p == c, g == c
            d, j = dice_jaccard(pc, gc)
            h, a = hd95_asd(pc, gc, spacing)
            if h is None:
                undefined[c] += 1
            per_image[c]["dice"].append(d)
            per_image[c]["jaccard"].append(j)
            per_image[c]["hd95"].append(h)
            per_image[c]["asd"].append(a)
    per_class = {c: {k: _nanmean(v[k]) for k in METRIC_NAMES} for c, v in per_image.items()}
    macro = {k: _nanmean([per_class[c][k] for c in per_class]) for k in METRIC_NAMES}
    return MetricReport(per_class, macro, tuple(spacing), undefined, len(preds))
