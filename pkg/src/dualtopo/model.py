"""Dual-task network: shared U-Net encoder, segmentation decoder and a
multi-scale residual-fusion regression decoder for the SDT.
"""
from dataclasses import asdict, dataclass

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NetConfig:
    in_channels: int = 1
    num_classes: int = 3
    base_width: int = 8
    depth: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2 (background included), got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    def widths(self):
        return [self.base_width * 2**i for i in range(self.depth)]

    def check_size(self, h, w):
        k = 2 ** (self.depth - 1)
        if h % k or w % k:
            raise ValueError(f"image side must be divisible by {k} for depth={self.depth}, got {h}x{w}")

    def to_dict(self):
        return asdict(self)


@dataclass
class PredictionBundle:
    """Per-frame outputs of one shared forward pass. Tensors are (B, C, H, W)."""

    seg_t: torch.Tensor
    seg_t1: torch.Tensor
    sdt_t: torch.Tensor
    sdt_t1: torch.Tensor

    @property
    def fg_t(self):
        return 1.0 - self.seg_t[:, 0]

    @property
    def fg_t1(self):
        return 1.0 - self.seg_t1[:, 0]


# initial background probability of the segmentation head
BACKGROUND_PRIOR = 0.9


def _groups(ch):
    return 4 if ch % 4 == 0 else 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.LeakyReLU(0.1),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.LeakyReLU(0.1),
        )


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        widths = cfg.widths()
        self.blocks = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.blocks.append(ConvBlock(cin, w))
            cin = w

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats


class MirrorDecoder(nn.Module):
    """Plain U-Net decoder: upsample, concatenate the skip, convolve."""

    def __init__(self, cfg, out_channels):
        super().__init__()
        widths = cfg.widths()
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.ups.append(nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2))
            self.blocks.append(ConvBlock(2 * widths[i - 1], widths[i - 1]))
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, feats):
        x = feats[-1]
        for k, (up, block) in enumerate(zip(self.ups, self.blocks)):
            skip = feats[-2 - k]
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def _resize(x, size):
    if x.shape[-2:] == size:
        return x
    if x.shape[-1] > size[-1]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class CrossScaleFusion(nn.Module):
    """One fusion stage: every scale absorbs its neighbours through a residual conv."""

    def __init__(self, widths):
        super().__init__()
        self.mix = nn.ModuleList()
        for i, w in enumerate(widths):
            cin = w
            if i > 0:
                cin += widths[i - 1]
            if i < len(widths) - 1:
                cin += widths[i + 1]
            self.mix.append(
                nn.Sequential(
                    nn.Conv2d(cin, w, 3, padding=1),
                    nn.GroupNorm(_groups(w), w),
                    nn.LeakyReLU(0.1),
                    nn.Conv2d(w, w, 3, padding=1),
                )
            )

    def forward(self, feats):
        out = []
        for i, f in enumerate(feats):
            parts = [f]
            size = f.shape[-2:]
            if i > 0:
                parts.append(_resize(feats[i - 1], size))
            if i < len(feats) - 1:
                parts.append(_resize(feats[i + 1], size))
            out.append(F.leaky_relu(f + self.mix[i](torch.cat(parts, dim=1)), 0.1))
        return out


class FusionDecoder(nn.Module):
    """Simplified multi-scale residual-fusion decoder with one sigmoid output channel."""

    def __init__(self, cfg, stages=2):
        super().__init__()
        widths = cfg.widths()
        self.n_scales = len(widths)
        self.stages = nn.ModuleList([CrossScaleFusion(widths) for _ in range(stages)])
        self.decode = MirrorDecoder(cfg, 1)

    def forward(self, feats):
        if len(feats) != self.n_scales:
            raise ValueError(f"expected {self.n_scales} feature scales, got {len(feats)}")
        for stage in self.stages:
            feats = stage(feats)
        return torch.sigmoid(self.decode(feats))


def build_regression_decoder(cfg):
    return FusionDecoder(cfg)


class DualTaskNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.seg_decoder = MirrorDecoder(cfg, cfg.num_classes)
        self.reg_decoder = build_regression_decoder(cfg)

    def forward_frames(self, x):
        """Segmentation probabilities and SDT for a stack of frames (B, C, H, W)."""
        self.cfg.check_size(*x.shape[-2:])
        feats = self.encoder(x)
        seg = torch.softmax(self.seg_decoder(feats), dim=1)
        sdt = self.reg_decoder(feats)
        return seg, sdt[:, 0]

    def forward(self, image_t, image_t1):
        if image_t.shape != image_t1.shape:
            raise ValueError(f"frame shapes differ: {tuple(image_t.shape)} vs {tuple(image_t1.shape)}")
        n = image_t.shape[0]
        seg, sdt = self.forward_frames(torch.cat([image_t, image_t1], dim=0))
        return PredictionBundle(seg[:n], seg[n:], sdt[:n], sdt[n:])


def init_weights(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, a=0.1, mode="fan_in", nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)
    if isinstance(module, DualTaskNet):
        # Dice over foreground classes gives almost no push against a class
        # that is absent from the batch, so start from a background-heavy prior
        c = module.cfg.num_classes
        other = (1.0 - BACKGROUND_PRIOR) / (c - 1)
        with torch.no_grad():
            module.seg_decoder.head.bias[0] = math.log(BACKGROUND_PRIOR / other)


def build_model(cfg):
    """Seeded construction of a :class:`DualTaskNet`."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    model = DualTaskNet(cfg)
    init_weights(model)
    torch.random.set_rng_state(gen_state)
    return model


def count_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def forward(model, image_t, image_t1=None):
    """Evaluation-mode forward of a frame pair.

    Takes a :class:`~dualtopo.data.FramePair` or two (H, W) / batched arrays.
    """
    if image_t1 is None:
        image_t, image_t1 = image_t.image_t, image_t.image_t1
    t = torch.as_tensor(image_t, dtype=torch.float32)
    t1 = torch.as_tensor(image_t1, dtype=torch.float32)
    if t.shape != t1.shape:
        raise ValueError(f"frame shapes differ: {tuple(t.shape)} vs {tuple(t1.shape)}")
    while t.dim() < 4:
        t, t1 = t.unsqueeze(0), t1.unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(t, t1)
    model.train(was_training)
    return out
