"""Synthetic CPR-like frame pairs, on-disk datasets and labeled/unlabeled splits.

Disk layout::

    root/manifest.json
    root/sequence_<id>/manifest.json
    root/sequence_<id>/frame_<k>.png   8-bit grayscale
    root/sequence_<id>/mask_<k>.png    8-bit class indices
"""
import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .sdt import SdtField, compute_sdt

log = logging.getLogger(__name__)

CLASS_NAMES = ("background", "lumen", "plaque")
FORMAT_VERSION = 1


@dataclass
class FramePair:
    image_t: np.ndarray
    image_t1: np.ndarray
    mask_t: np.ndarray = None
    mask_t1: np.ndarray = None
    sdt_t: SdtField = None
    sdt_t1: SdtField = None
    id: str = ""

    def __post_init__(self):
        if self.image_t.shape != self.image_t1.shape:
            raise ValueError(f"pair {self.id}: frame shapes differ {self.image_t.shape} vs {self.image_t1.shape}")
        if (self.mask_t is None) != (self.mask_t1 is None):
            raise ValueError(f"pair {self.id}: labels must be given for both frames or neither")
        if self.mask_t is not None:
            if self.mask_t.shape != self.image_t.shape or self.mask_t1.shape != self.image_t.shape:
                raise ValueError(f"pair {self.id}: mask shape does not match image shape")
            if self.sdt_t is None:
                self.sdt_t = compute_sdt(self.mask_t > 0)
            if self.sdt_t1 is None:
                self.sdt_t1 = compute_sdt(self.mask_t1 > 0)
        elif self.sdt_t is not None or self.sdt_t1 is not None:
            raise ValueError(f"pair {self.id}: SDT labels without masks")

    @property
    def labeled(self):
        return self.mask_t is not None

    def strip_labels(self):
        return FramePair(self.image_t, self.image_t1, id=self.id)


@dataclass
class GeneratorConfig:
    size: int = 64
    n_sequences: int = 5
    length: int = 11
    drift: float = 2.0
    radius_drift: float = 0.1
    noise: float = 0.08
    plaque_prob: float = 0.7
    blur: float = 1.0
    min_radius: float = 5.0
    max_radius: float = 11.0
    seed: int = 0

    def __post_init__(self):
        if self.size % 4:
            raise ValueError(f"image size must be divisible by 4, got {self.size}")
        if self.length < 2 and self.n_sequences > 0:
            raise ValueError("sequences need at least 2 frames to form a pair")
        if self.min_radius < 3:
            raise ValueError("lumen radius must be >= 3 px")
        if not 0 <= self.plaque_prob <= 1:
            raise ValueError("plaque_prob must be in [0, 1]")
        if self.drift < 0 or self.radius_drift < 0 or self.noise < 0:
            raise ValueError("drift, radius_drift and noise must be nonnegative")


@dataclass
class _Geometry:
    cy: float
    cx: float
    radius: float
    plaque: bool
    angle: float
    span: float
    thickness: float


def _render(geo, size, rng, cfg, texture):
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    dist = np.hypot(yy - geo.cy, xx - geo.cx)
    mask = np.zeros((size, size), dtype=np.uint8)
    lumen = dist <= geo.radius
    mask[lumen] = 1
    wall = (dist > geo.radius) & (dist <= geo.radius + 3.0)
    if geo.plaque:
        ang = np.arctan2(yy - geo.cy, xx - geo.cx)
        dang = np.angle(np.exp(1j * (ang - geo.angle)))
        crescent = (
            (dist > geo.radius)
            & (dist <= geo.radius + geo.thickness * np.cos(np.clip(dang / geo.span, -1, 1) * np.pi / 2))
            & (np.abs(dang) <= geo.span)
        )
        mask[crescent] = 2
    clean = texture.copy()
    clean[wall] = 0.42
    clean[mask == 1] = 0.62
    clean[mask == 2] = 0.85
    if cfg.blur > 0:
        clean = ndimage.gaussian_filter(clean, cfg.blur)
    img = clean + rng.normal(0.0, cfg.noise, clean.shape) if cfg.noise > 0 else clean
    # quantise to the 8-bit grid so a disk round-trip is lossless
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img.astype(np.float32), mask


def _fits(geo, size, margin=2.0):
    reach = geo.radius + (geo.thickness if geo.plaque else 0.0) + 3.0 + margin
    return reach <= geo.cy <= size - 1 - reach and reach <= geo.cx <= size - 1 - reach


def _initial_geometry(cfg, rng):
    c = (cfg.size - 1) / 2.0
    for _ in range(1000):
        geo = _Geometry(
            cy=c + rng.uniform(-4, 4),
            cx=c + rng.uniform(-4, 4),
            radius=rng.uniform(cfg.min_radius, cfg.max_radius),
            plaque=bool(rng.random() < cfg.plaque_prob),
            angle=rng.uniform(-np.pi, np.pi),
            span=rng.uniform(0.5, 1.2),
            thickness=rng.uniform(3.0, 6.0),
        )
        if _fits(geo, cfg.size):
            return geo
    raise ValueError(f"cannot place a vessel of radius >= {cfg.min_radius} in a {cfg.size}px image")


def _step(geo, cfg, rng):
    for _ in range(100):
        d = np.clip(rng.normal(0.0, cfg.drift / 2.0, 2), -cfg.drift, cfg.drift) if cfg.drift > 0 else np.zeros(2)
        scale = 1.0 + (np.clip(rng.normal(0.0, cfg.radius_drift / 2.0), -cfg.radius_drift, cfg.radius_drift) if cfg.radius_drift > 0 else 0.0)
        wiggle = cfg.drift / 10.0
        nxt = replace(
            geo,
            cy=geo.cy + d[0],
            cx=geo.cx + d[1],
            radius=float(np.clip(geo.radius * scale, cfg.min_radius, cfg.max_radius)),
            angle=geo.angle + rng.normal(0.0, 0.1 * wiggle),
            thickness=float(np.clip(geo.thickness + rng.normal(0.0, 0.3 * wiggle), 3.0, 6.0)),
        )
        if _fits(nxt, cfg.size):
            return nxt
        log.warning("vessel would leave the image; resampling drift step")
    return geo


def generate_sequence(cfg, rng, seq_id=0):
    """Frames and masks of one synthetic vessel sequence."""
    texture = ndimage.gaussian_filter(rng.random((cfg.size, cfg.size)), 3.0)
    texture = 0.18 + 0.2 * (texture - texture.min()) / max(np.ptp(texture), 1e-9)
    geo = _initial_geometry(cfg, rng)
    frames, masks = [], []
    for k in range(cfg.length):
        if k:
            geo = _step(geo, cfg, rng)
        img, mask = _render(geo, cfg.size, rng, cfg, texture)
        frames.append(img)
        masks.append(mask)
    return frames, masks


def pairs_from_sequence(frames, masks, seq_id):
    return [
        FramePair(frames[k], frames[k + 1], masks[k], masks[k + 1], id=f"seq{seq_id:03d}_f{k:03d}")
        for k in range(len(frames) - 1)
    ]


def generate_sequences(cfg):
    rng = np.random.default_rng(cfg.seed)
    return [generate_sequence(cfg, rng, i) for i in range(cfg.n_sequences)]


def generate_synthetic_sequence(cfg):
    """All adjacent frame pairs (stride 1) of ``cfg.n_sequences`` synthetic sequences."""
    pairs = []
    for i, (frames, masks) in enumerate(generate_sequences(cfg)):
        pairs.extend(pairs_from_sequence(frames, masks, i))
    return pairs


def dataset_hash(pairs):
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.id.encode())
        for arr in (p.image_t, p.image_t1, p.mask_t, p.mask_t1):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class SplitSpec:
    labeled_fraction: float = 0.1
    seed: int = 0
    n_labeled: int = field(default=None, init=False)
    n_unlabeled: int = field(default=None, init=False)

    def __post_init__(self):
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")

    def counts(self, total):
        n_l = min(total, int(np.floor(self.labeled_fraction * total + 0.5)))
        if n_l < 1:
            raise ValueError(f"labeled fraction {self.labeled_fraction} of {total} pairs gives no labeled pair")
        return n_l, total - n_l


def split_dataset(pairs, spec):
    """Seeded shuffle then prefix split; unlabeled pairs lose their labels but keep ids."""
    n_l, n_u = spec.counts(len(pairs))
    spec.n_labeled, spec.n_unlabeled = n_l, n_u
    order = np.random.default_rng(spec.seed).permutation(len(pairs))
    labeled = [pairs[i] for i in order[:n_l]]
    unlabeled = [pairs[i].strip_labels() for i in order[n_l:]]
    return labeled, unlabeled


def reattach_labels(unlabeled, source):
    """Restore labels of stripped pairs from ``source`` by id."""
    by_id = {p.id: p for p in source}
    return [by_id[p.id] for p in unlabeled]


# ---------------------------------------------------------------- disk IO


def save_mask_png(path, mask):
    arr = np.asarray(mask)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("mask values must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def save_image_png(path, image):
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_field(path, values):
    np.save(path, np.asarray(values, dtype=np.float32))


def load_field(path):
    return np.load(path).astype(np.float32)


def _read_png(path):
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "P", "I;16", "I"):
                im = im.convert("L")
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ValueError(f"corrupt or unreadable image file: {path}") from exc


def write_dataset(root, sequences, cfg=None, spacing=(1.0, 1.0), class_names=CLASS_NAMES):
    """Write sequences of (frames, masks) in the on-disk layout; returns the dataset hash."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (frames, masks) in enumerate(sequences):
        seq_dir = root / f"sequence_{i:03d}"
        seq_dir.mkdir(exist_ok=True)
        for k, (img, mask) in enumerate(zip(frames, masks)):
            save_image_png(seq_dir / f"frame_{k}.png", img)
            save_mask_png(seq_dir / f"mask_{k}.png", mask)
        meta = {"length": len(frames), "pixel_spacing": list(spacing), "class_names": list(class_names)}
        (seq_dir / "manifest.json").write_text(json.dumps(meta, indent=2))
        pairs.extend(pairs_from_sequence(frames, masks, i))
    digest = dataset_hash(pairs)
    top = {
        "format_version": FORMAT_VERSION,
        "n_sequences": len(sequences),
        "generator": asdict(cfg) if cfg is not None else None,
        "dataset_hash": digest,
    }
    (root / "manifest.json").write_text(json.dumps(top, indent=2, sort_keys=True))
    return digest


_FRAME_RE = re.compile(r"frame_(\d+)\.png$")


def load_dataset(root, return_spacing=False):
    """Assemble consecutive-frame pairs from every ``sequence_<id>`` directory."""
    root = Path(root)
    pairs = []
    spacing = (1.0, 1.0)
    for seq_dir in sorted(p for p in root.glob("sequence_*") if p.is_dir()):
        seq_id = seq_dir.name.split("_", 1)[1]
        meta = {}
        if (seq_dir / "manifest.json").exists():
            try:
                meta = json.loads((seq_dir / "manifest.json").read_text())
            except json.JSONDecodeError as exc:
                raise ValueError(f"corrupt manifest: {seq_dir / 'manifest.json'}") from exc
        n_classes = len(meta.get("class_names", CLASS_NAMES))
        spacing = tuple(meta.get("pixel_spacing", spacing))
        idx = sorted(int(m.group(1)) for f in seq_dir.iterdir() if (m := _FRAME_RE.match(f.name)))
        cache = {}

        def frame(k):
            if k not in cache:
                img = (_read_png(seq_dir / f"frame_{k}.png").astype(np.float64) / 255.0).astype(np.float32)
                mask_path = seq_dir / f"mask_{k}.png"
                mask = None
                if mask_path.exists():
                    mask = _read_png(mask_path).astype(np.uint8)
                    if mask.max(initial=0) >= n_classes:
                        raise ValueError(f"{mask_path}: class index {int(mask.max())} >= num_classes {n_classes}")
                    if mask.shape != img.shape:
                        raise ValueError(f"{mask_path}: shape {mask.shape} differs from frame {img.shape}")
                cache[k] = (img, mask, compute_sdt(mask > 0) if mask is not None else None)
            return cache[k]

        present = set(idx)
        for k in idx:
            if k + 1 not in present:
                if k != idx[-1]:
                    log.warning("%s: frame_%d has no successor; pair skipped", seq_dir, k)
                continue
            img_t, m_t, s_t = frame(k)
            img_t1, m_t1, s_t1 = frame(k + 1)
            if (m_t is None) != (m_t1 is None):
                log.warning("%s: mask missing for one frame of pair (%d, %d); pair skipped", seq_dir, k, k + 1)
                continue
            pairs.append(FramePair(img_t, img_t1, m_t, m_t1, s_t, s_t1, id=f"seq{seq_id}_f{k:03d}"))
    if return_spacing:
        return pairs, spacing
    return pairs
