"""Semi-supervised training loop: network and flow estimator optimised jointly
on the weighted total objective.
"""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .flow import FlowEstimator, ctc_terms
from .losses import LossWeights, NonFiniteLoss
from .metrics import evaluate
from .model import NetConfig, build_model
from .sdt import BOUNDARY_THRESHOLD, SKELETON_THRESHOLD, _boundary_mask, _skeleton_mask

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("step",) + L.BREAKDOWN_COLUMNS + ("L_total", "ramp_factor")
MAX_CONSECUTIVE_SKIPS = 3


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 300
    n_labeled: int = 2
    n_unlabeled: int = 2
    learning_rate: float = 1e-3
    weights: LossWeights = field(default_factory=lambda: LossWeights(rampup_steps=100))
    eval_every: int = 100
    seed: int = 0
    use_reg: bool = True
    use_itc: bool = True
    use_ctc: bool = True
    use_ps: bool = True
    ps_on_labeled: bool = True
    ps_temperature: float = 0.1
    tau_boundary: float = BOUNDARY_THRESHOLD
    tau_skeleton: float = SKELETON_THRESHOLD
    flow_depth: int = 3
    ctc_normalize: bool = True
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        if self.n_labeled < 1:
            raise ValueError("n_labeled must be >= 1")
        if self.n_unlabeled < 0 or self.steps < 0:
            raise ValueError("steps and n_unlabeled must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ batches


@dataclass
class PairTensors:
    """Tensors of one pair, precomputed once."""

    id: str
    image_t: torch.Tensor
    image_t1: torch.Tensor
    labeled: bool
    mask_t: torch.Tensor = None
    mask_t1: torch.Tensor = None
    sdt_t: torch.Tensor = None
    sdt_t1: torch.Tensor = None
    zk_t: torch.Tensor = None
    zb_t: torch.Tensor = None
    zk_t1: torch.Tensor = None
    zb_t1: torch.Tensor = None


def pair_tensors(pair):
    img = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float32))[None]
    pt = PairTensors(pair.id, img(pair.image_t), img(pair.image_t1), pair.labeled)
    if pair.labeled:
        for suffix, mask, sdt in (("t", pair.mask_t, pair.sdt_t), ("t1", pair.mask_t1, pair.sdt_t1)):
            fg = np.asarray(mask) > 0
            setattr(pt, f"mask_{suffix}", torch.as_tensor(np.asarray(mask, dtype=np.int64)))
            setattr(pt, f"sdt_{suffix}", torch.as_tensor(sdt.values, dtype=torch.float32))
            skel = _skeleton_mask(fg)
            setattr(pt, f"zk_{suffix}", torch.as_tensor(skel))
            setattr(pt, f"zb_{suffix}", torch.as_tensor(_boundary_mask(fg) & ~skel))
    return pt


@dataclass
class Batch:
    image_t: torch.Tensor
    image_t1: torch.Tensor
    labeled: torch.Tensor
    ids: list
    mask_t: torch.Tensor = None
    mask_t1: torch.Tensor = None
    sdt_t: torch.Tensor = None
    sdt_t1: torch.Tensor = None
    zk_t: torch.Tensor = None
    zb_t: torch.Tensor = None
    zk_t1: torch.Tensor = None
    zb_t1: torch.Tensor = None

    @property
    def n_labeled(self):
        return int(self.labeled.sum())


def collate(labeled, unlabeled=()):
    """Stack labeled pairs first, then unlabeled ones; label tensors cover labeled pairs only."""
    labeled, unlabeled = list(labeled), list(unlabeled)
    if any(not p.labeled for p in labeled):
        raise ValueError("collate: pair without labels in the labeled part")
    # labels on the unlabeled side would leak supervision
    if any(p.labeled or p.mask_t is not None for p in unlabeled):
        raise ValueError("collate: unlabeled part carries labels")
    allp = labeled + unlabeled
    b = Batch(
        image_t=torch.stack([p.image_t for p in allp]),
        image_t1=torch.stack([p.image_t1 for p in allp]),
        labeled=torch.tensor([True] * len(labeled) + [False] * len(unlabeled)),
        ids=[p.id for p in allp],
    )
    if labeled:
        for name in ("mask_t", "mask_t1", "sdt_t", "sdt_t1", "zk_t", "zb_t", "zk_t1", "zb_t1"):
            setattr(b, name, torch.stack([getattr(p, name) for p in labeled]))
    return b


# -------------------------------------------------------------------- state


@dataclass
class TrainState:
    model: torch.nn.Module
    estimator: torch.nn.Module
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    skipped: int = 0
    consecutive_skips: int = 0


def init_state(cfg):
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.net)
    estimator = FlowEstimator(depth=cfg.flow_depth, seed=cfg.seed + 1)
    params = list(model.parameters()) + list(estimator.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    return TrainState(model, estimator, optimizer, np.random.default_rng(cfg.seed))


def _stack_frames(a, b):
    return torch.cat([a, b], dim=0)


def compute_losses(bundle, batch, cfg, estimator):
    """Loss breakdown (tensors) for one forward pass; disabled terms are exact zeros."""
    zero = bundle.sdt_t.new_zeros(())
    parts = {k: zero for k in L.BREAKDOWN_COLUMNS}
    lab = batch.labeled
    n_lab = int(lab.sum())
    num_classes = bundle.seg_t.shape[1]
    if n_lab:
        seg = _stack_frames(bundle.seg_t[lab], bundle.seg_t1[lab])
        gt = L.one_hot(_stack_frames(batch.mask_t, batch.mask_t1), num_classes)
        parts["L_seg"] = L.dice_loss(seg, gt)
        if cfg.use_reg:
            pred = _stack_frames(bundle.sdt_t[lab], bundle.sdt_t1[lab])
            label = _stack_frames(batch.sdt_t, batch.sdt_t1)
            support = _stack_frames(batch.mask_t, batch.mask_t1) > 0
            parts["L_reg"] = L.l1_reg_loss(pred, label, support)
    if cfg.use_itc:
        label_sets = None
        if n_lab:
            full = lambda m: _scatter(m, lab)
            label_sets = ((full(batch.zk_t), full(batch.zb_t)), (full(batch.zk_t1), full(batch.zb_t1)))
        tc1, tc2 = L.itc_terms(bundle, label_sets, lab, cfg.tau_boundary, cfg.tau_skeleton)
        parts["L_tc1"], parts["L_tc2"] = tc1, tc2
    if cfg.use_ps:
        if cfg.ps_on_labeled:
            parts["L_ps"] = L.pseudo_label_loss(bundle, cfg.ps_temperature)
        elif (~lab).any():
            sub = _bundle_subset(bundle, ~lab)
            parts["L_ps"] = L.pseudo_label_loss(sub, cfg.ps_temperature)
    if cfg.use_ctc:
        flows = estimator(bundle.sdt_t, bundle.sdt_t1)
        zk_hat, zb_hat = L.predicted_point_masks(bundle.sdt_t1, cfg.tau_boundary, cfg.tau_skeleton)
        lf, pts = ctc_terms(bundle.sdt_t, bundle.sdt_t1, flows, zk_hat, zb_hat, cfg.ctc_normalize)
        parts["L_f"], parts["L_ctc_pts"] = lf, pts
    return parts


def _scatter(mask_lab, lab):
    out = torch.zeros((lab.shape[0],) + tuple(mask_lab.shape[1:]), dtype=torch.bool)
    out[lab] = mask_lab
    return out


def _bundle_subset(bundle, sel):
    return type(bundle)(bundle.seg_t[sel], bundle.seg_t1[sel], bundle.sdt_t[sel], bundle.sdt_t1[sel])


def train_step(batch, state, cfg):
    """One joint optimiser update. Returns (state, breakdown dict of floats)."""
    state.model.train()
    state.estimator.train()
    bundle = state.model(batch.image_t, batch.image_t1)
    parts = compute_losses(bundle, batch, cfg, state.estimator)
    ramp = cfg.weights.ramp(state.step)
    row = {"step": state.step}
    try:
        total = L.total_loss(parts, cfg.weights, state.step)
        if not torch.isfinite(total):
            raise NonFiniteLoss("L_total", float(total.detach()))
    except NonFiniteLoss as exc:
        state.skipped += 1
        state.consecutive_skips += 1
        log.warning("step %d skipped: %s", state.step, exc)
        if state.consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
            raise TrainingAborted(f"{state.consecutive_skips} consecutive non-finite steps; last: {exc}") from exc
        row.update({k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()})
        row.update(L_total=float("nan"), ramp_factor=ramp, skipped=True)
        return state, row
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.consecutive_skips = 0
    state.step += 1
    row.update({k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()})
    row.update(L_total=float(total.detach()), ramp_factor=ramp)
    return state, row


def sample_batch(state, labeled, unlabeled, cfg):
    def pick(pool, n):
        if n == 0 or not pool:
            return []
        idx = state.rng.choice(len(pool), size=n, replace=n > len(pool))
        return [pool[i] for i in idx]

    return collate(pick(labeled, cfg.n_labeled), pick(unlabeled, cfg.n_unlabeled))


# --------------------------------------------------------------- evaluation


def predict_labels(model, pairs):
    """Argmax class maps for every frame of ``pairs`` (frame t then t+1 per pair)."""
    model.eval()
    preds = []
    with torch.no_grad():
        for p in pairs:
            seg, _ = model.forward_frames(torch.stack([p.image_t, p.image_t1]))
            preds.extend(seg.argmax(1).numpy().astype(np.uint8))
    return preds


def evaluate_model(model, pairs, num_classes, spacing=(1.0, 1.0)):
    preds = predict_labels(model, pairs)
    gts = []
    for p in pairs:
        gts.extend([p.mask_t.numpy(), p.mask_t1.numpy()])
    return evaluate(preds, gts, num_classes, spacing)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state, cfg, extra=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": cfg.net.to_dict(),
        "train_config": cfg.to_dict(),
        "model": state.model.state_dict(),
        "estimator": state.estimator.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": {"numpy": state.rng.bit_generator.state, "torch": torch.random.get_rng_state()},
        "step": state.step,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Return (state, cfg, extra) restored from ``path``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format")
    cfg = TrainConfig.from_dict(payload["train_config"])
    state = init_state(cfg)
    state.model.load_state_dict(payload["model"])
    state.estimator.load_state_dict(payload["estimator"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.rng.bit_generator.state = payload["rng"]["numpy"]
    torch.random.set_rng_state(payload["rng"]["torch"])
    state.step = payload["step"]
    return state, cfg, payload.get("extra", {})


# -------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    state: TrainState
    history: list
    evals: list
    best_dice: float = float("nan")
    best_step: int = -1
    final_report: object = None
    checkpoint: Path = None


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in columns})


def run_training(cfg, labeled, unlabeled=(), eval_pairs=(), out_dir=None, spacing=(1.0, 1.0), progress=None):
    """Train for ``cfg.steps`` steps; evaluate every ``cfg.eval_every`` steps and at the end.

    ``labeled`` / ``unlabeled`` / ``eval_pairs`` are :class:`~dualtopo.data.FramePair`
    lists (eval pairs must be labeled). With ``out_dir`` writes history.csv,
    metrics.csv, config.json, best.pt and last.pt.
    """
    lab = [pair_tensors(p) for p in labeled]
    unl = [pair_tensors(p.strip_labels() if p.labeled else p) for p in unlabeled]
    ev = [pair_tensors(p) for p in eval_pairs]
    if not lab:
        raise ValueError("run_training needs at least one labeled pair")
    state = init_state(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    result = TrainResult(state, [], [])
    num_classes = cfg.net.num_classes

    def do_eval():
        rep = evaluate_model(state.model, ev, num_classes, spacing)
        d = rep.macro["dice"]
        result.evals.append({"step": state.step, **{f"macro_{k}": v for k, v in rep.macro.items()}})
        result.final_report = rep
        if not d <= result.best_dice:  # also true when best is nan
            result.best_dice, result.best_step = d, state.step
            if out is not None:
                save_checkpoint(out / "best.pt", state, cfg, {"macro_dice": d})
        return rep

    for _ in range(cfg.steps):
        batch = sample_batch(state, lab, unl, cfg)
        state, row = train_step(batch, state, cfg)
        result.history.append(row)
        if progress is not None:
            progress(row)
        if ev and cfg.eval_every > 0 and state.step % cfg.eval_every == 0 and not row.get("skipped"):
            do_eval()
    if ev and (not result.evals or result.evals[-1]["step"] != state.step):
        do_eval()
    if out is not None:
        _write_csv(out / "history.csv", result.history, HISTORY_COLUMNS)
        if result.evals:
            _write_csv(out / "metrics.csv", result.evals, list(result.evals[0]))
        save_checkpoint(out / "last.pt", state, cfg)
        if not (out / "best.pt").exists():
            save_checkpoint(out / "best.pt", state, cfg)
        result.checkpoint = out / "best.pt"
    return result
