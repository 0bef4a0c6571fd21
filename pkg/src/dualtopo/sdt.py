"""Skeleton-aware distance transform (SDT) labels and topological point sets.

The SDT of a binary mask is 0 on the object boundary, 1 on the object skeleton
and ``d_B / (d_B + d_K)`` in between, where ``d_B`` and ``d_K`` are Euclidean
distances to the nearest boundary and skeleton pixel of the same 8-connected
component. Background pixels are 0 and excluded from the field's support.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

SKELETON_THRESHOLD = 0.8
BOUNDARY_THRESHOLD = 0.1

_EIGHT = np.ones((3, 3), dtype=bool)


class PointKind(str, Enum):
    SKELETON = "skeleton"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class TopoPointSet:
    """Set of (row, col) pixels tagged as skeleton or boundary.

    ``points`` is an (N, 2) int array in raster order; ``shape`` is the grid the
    points live on. ``indicator`` gives the 0/1 membership map over the grid.
    """

    kind: PointKind
    points: np.ndarray
    shape: tuple

    @classmethod
    def from_mask(cls, kind, mask):
        mask = np.asarray(mask, dtype=bool)
        return cls(PointKind(kind), np.argwhere(mask).astype(np.int64), mask.shape)

    def indicator(self):
        out = np.zeros(self.shape, dtype=bool)
        if len(self.points):
            out[self.points[:, 0], self.points[:, 1]] = True
        return out

    def __contains__(self, rc):
        r, c = rc
        return bool(len(self.points)) and bool(
            np.any((self.points[:, 0] == r) & (self.points[:, 1] == c))
        )

    def __len__(self):
        return len(self.points)

    def as_set(self):
        return {(int(r), int(c)) for r, c in self.points}


@dataclass(frozen=True)
class SdtField:
    values: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.support.shape:
            raise ValueError(f"values {self.values.shape} and support {self.support.shape} differ")


def as_binary_mask(mask):
    """Validate and return a boolean copy of ``mask``."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"binary mask must be a non-empty 2D grid, got shape {arr.shape}")
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise ValueError("binary mask values must be exactly 0 or 1")
    return arr.astype(bool)


def _neighbours(img):
    """P2..P9 of every pixel (clockwise from north) on a zero-padded image."""
    p = np.pad(img, 1)
    h, w = img.shape
    offsets = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
    return [p[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w] for dr, dc in offsets]


def zhang_suen(mask):
    """Classic two-subiteration Zhang-Suen thinning; pixels outside the grid are 0."""
    img = as_binary_mask(mask).astype(np.uint8)
    while True:
        changed = False
        for step in (0, 1):
            nb = _neighbours(img)
            p2, p3, p4, p5, p6, p7, p8, p9 = nb
            b = sum(n.astype(np.int32) for n in nb)
            seq = nb + [p2]
            a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int32) for i in range(8))
            if step == 0:
                c1 = (p2 * p4 * p6) == 0
                c2 = (p4 * p6 * p8) == 0
            else:
                c1 = (p2 * p4 * p8) == 0
                c2 = (p2 * p6 * p8) == 0
            delete = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if delete.any():
                img[delete] = 0
                changed = True
        if not changed:
            return img.astype(bool)


def _skeleton_mask(mask):
    mask = as_binary_mask(mask)
    skel = zhang_suen(mask)
    # Zhang-Suen erases 2x2 blocks entirely; keep one pixel per vanished component.
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n:
        hit = ndimage.maximum(skel, labels, index=np.arange(1, n + 1))
        missing = np.flatnonzero(np.asarray(hit) == 0) + 1
        if len(missing):
            depth = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
            for lab in missing:
                comp = labels == lab
                flat = np.where(comp, depth, -1.0).ravel()
                skel.flat[int(np.argmax(flat))] = True
    return skel


def _boundary_mask(mask):
    mask = as_binary_mask(mask)
    p = np.pad(mask, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~interior


def extract_skeleton(mask):
    """Zhang-Suen skeleton of the foreground as a point set."""
    return TopoPointSet.from_mask(PointKind.SKELETON, _skeleton_mask(mask))


def extract_boundary(mask):
    """Foreground pixels with a background 4-neighbour; outside the grid counts as background."""
    return TopoPointSet.from_mask(PointKind.BOUNDARY, _boundary_mask(mask))


def _distance_to(targets):
    """Euclidean distance from every pixel to the nearest True pixel of ``targets``."""
    if not targets.any():
        return np.full(targets.shape, np.inf)
    return ndimage.distance_transform_edt(~targets)


def sdt_values(mask):
    """SDT value grid of ``mask`` (float64, 0 on background)."""
    mask = as_binary_mask(mask)
    skel = _skeleton_mask(mask)
    bound = _boundary_mask(mask)
    out = np.zeros(mask.shape, dtype=np.float64)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    for lab in range(1, n + 1):
        comp = labels == lab
        d_b = _distance_to(bound & comp)
        d_k = _distance_to(skel & comp)
        inner = comp & ~bound & ~skel
        out[inner] = d_b[inner] / (d_b[inner] + d_k[inner])
    out[skel] = 1.0
    return out


def compute_sdt(mask):
    """SDT label field of a binary mask."""
    mask = as_binary_mask(mask)
    return SdtField(sdt_values(mask), mask.copy())


def point_sets_from_prediction(field, tau_boundary=BOUNDARY_THRESHOLD, tau_skeleton=SKELETON_THRESHOLD):
    """Threshold a predicted SDT into (skeleton, boundary) point sets.

    Skeleton: ``value >= tau_skeleton``. Boundary: ``0 < value <= tau_boundary``.
    ``field`` may be an :class:`SdtField` or a bare 2D array.
    """
    values = field.values if isinstance(field, SdtField) else np.asarray(field, dtype=np.float64)
    if not np.isfinite(values).all():
        raise ValueError("predicted field contains non-finite values")
    if not 0.0 <= tau_boundary < tau_skeleton <= 1.0:
        raise ValueError(f"need 0 <= tau_boundary < tau_skeleton <= 1, got {tau_boundary}, {tau_skeleton}")
    skel = values >= tau_skeleton
    bound = (values > 0) & (values <= tau_boundary)
    return (
        TopoPointSet.from_mask(PointKind.SKELETON, skel),
        TopoPointSet.from_mask(PointKind.BOUNDARY, bound),
    )
