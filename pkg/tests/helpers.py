"""Shared experiment fixtures for the flow and acceptance tests."""
import numpy as np
import torch
from scipy import ndimage

from dualtopo.data import GeneratorConfig, SplitSpec, generate_synthetic_sequence, split_dataset
from dualtopo.flow import FlowEstimator, build_pyramid, flow_loss
from dualtopo.train import TrainConfig, run_training


def smooth_shift_pair(shift, size=32, seed=0):
    """Smooth random field and a copy whose content moved ``shift`` columns right (border replicated)."""
    pad = 8
    base = ndimage.gaussian_filter(np.random.default_rng(seed).random((size + 2 * pad,) * 2), 3.0)
    base = (base - base.min()) / np.ptp(base)
    src = base[pad:-pad, pad:-pad]
    cols = np.clip(np.arange(pad, pad + size) - shift, 0, base.shape[1] - 1)
    ref = base[pad:-pad][:, cols]
    return torch.tensor(src, dtype=torch.float32)[None], torch.tensor(ref, dtype=torch.float32)[None]


def overfit_flow(src, ref, steps=400, seed=0):
    """Fit a fresh estimator to one pair on the flow loss; returns the finest (2, H, W) flow."""
    est = FlowEstimator(seed=seed)
    opt = torch.optim.Adam(est.parameters(), 1e-3)
    ps, pr = build_pyramid(src, 3), build_pyramid(ref, 3)
    for _ in range(steps):
        loss = flow_loss(ps, pr, est(src, ref))
        opt.zero_grad()
        loss.backward()
        opt.step()
    est.eval()
    with torch.no_grad():
        return est(src, ref).finest[0].numpy()


# ablation variants: flag overrides and whether the unlabeled pool is used
VARIANTS = {
    "base": (dict(use_itc=False, use_ctc=False), True),
    "itc": (dict(use_ctc=False), True),
    "ctc": (dict(use_itc=False), True),
    "full": ({}, True),
    "full_sup": ({}, False),
    "full_43": ({}, 43),
}


def synthetic_split(seed):
    """50 training pairs split 10% labeled, plus a held-out test set from an unrelated seed."""
    pairs = generate_synthetic_sequence(GeneratorConfig(n_sequences=5, seed=seed))
    test = generate_synthetic_sequence(GeneratorConfig(n_sequences=10, length=6, seed=1000 + seed))
    labeled, unlabeled = split_dataset(pairs, SplitSpec(0.1, seed))
    return labeled, unlabeled, test


def run_variant(name, seed, steps=300):
    """Final held-out macro Dice of one ablation variant."""
    flags, pool = VARIANTS[name]
    labeled, unlabeled, test = synthetic_split(seed)
    if pool is False:
        unlabeled = []
    elif pool is not True:
        unlabeled = unlabeled[:pool]
    cfg = TrainConfig(steps=steps, seed=seed, eval_every=0, **flags)
    torch.set_num_threads(1)
    return run_training(cfg, labeled, unlabeled, test).final_report.macro["dice"]
