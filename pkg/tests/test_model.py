import numpy as np
import pytest
import torch

from dualtopo.data import GeneratorConfig, generate_synthetic_sequence
from dualtopo.losses import dice_loss, l1_reg_loss, one_hot
from dualtopo.metrics import evaluate
from dualtopo.model import (
    DualTaskNet,
    FusionDecoder,
    MirrorDecoder,
    NetConfig,
    build_model,
    build_regression_decoder,
    count_parameters,
    forward,
)


@pytest.fixture(scope="module")
def pair():
    return generate_synthetic_sequence(GeneratorConfig(n_sequences=1, length=2, size=32, seed=3))[0]


def test_config_validation():
    for bad in (dict(depth=1), dict(base_width=2), dict(num_classes=1)):
        with pytest.raises(ValueError):
            NetConfig(**bad)
    with pytest.raises(ValueError):
        NetConfig(depth=3).check_size(30, 32)


def test_simplex_and_bounded_sdt():
    model = build_model(NetConfig())
    x = torch.rand(2, 1, 32, 32)
    out = forward(model, x, torch.rand(2, 1, 32, 32))
    for seg in (out.seg_t, out.seg_t1):
        assert (seg.sum(1) - 1).abs().max() <= 1e-5
    for sdt in (out.sdt_t, out.sdt_t1):
        assert sdt.shape == (2, 32, 32)
        assert sdt.min() >= 0 and sdt.max() <= 1


def test_identical_frames_identical_outputs():
    model = build_model(NetConfig())
    x = torch.rand(32, 32)
    out = forward(model, x, x.clone())
    assert torch.equal(out.seg_t, out.seg_t1)
    assert torch.equal(out.sdt_t, out.sdt_t1)


def test_accepts_frame_pair(pair):
    out = forward(build_model(NetConfig()), pair)
    assert out.seg_t.shape == (1, 3, 32, 32)


def test_frame_shape_mismatch_rejected():
    model = build_model(NetConfig())
    with pytest.raises(ValueError):
        model(torch.rand(1, 1, 32, 32), torch.rand(1, 1, 16, 16))
    with pytest.raises(ValueError):
        forward(model, np.zeros((32, 32)), np.zeros((32, 16)))


def test_regression_decoder_consumes_every_scale():
    cfg = NetConfig(depth=4)
    dec = build_regression_decoder(cfg)
    assert isinstance(dec, FusionDecoder) and dec.n_scales == 4
    feats = [torch.rand(1, w, 32 // 2**i, 32 // 2**i) for i, w in enumerate(cfg.widths())]
    assert dec(feats).shape == (1, 1, 32, 32)
    with pytest.raises(ValueError):
        dec(feats[:3])


def test_fusion_decoder_larger_than_mirror():
    cfg = NetConfig(base_width=8)
    fusion = count_parameters(build_regression_decoder(cfg))
    mirror = count_parameters(MirrorDecoder(cfg, 1))
    # frozen from counting both variants at base_width=8, depth=3
    assert (fusion, mirror) == (83249, 11377)
    assert fusion > mirror


def test_seeded_construction():
    a, b = build_model(NetConfig(seed=4)), build_model(NetConfig(seed=4))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = build_model(NetConfig(seed=5))
    assert not torch.equal(next(a.parameters()), next(c.parameters()))


def test_encoder_gets_gradient_from_both_heads(pair):
    model = build_model(NetConfig())
    x = torch.as_tensor(pair.image_t)[None, None]
    gt = one_hot(pair.mask_t[None], 3)
    for head in ("seg", "reg"):
        model.zero_grad()
        seg, sdt = model.forward_frames(x)
        if head == "seg":
            loss = dice_loss(seg, gt)
        else:
            loss = l1_reg_loss(sdt, torch.as_tensor(pair.sdt_t.values[None]), pair.mask_t[None] > 0)
        loss.backward()
        for name, p in model.encoder.named_parameters():
            assert p.grad is not None and p.grad.norm() > 0, (head, name)


def _fit(pair, steps, seed=0):
    model = build_model(NetConfig(seed=seed))
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    x = torch.as_tensor(np.stack([pair.image_t, pair.image_t1]))[:, None]
    gt = one_hot(np.stack([pair.mask_t, pair.mask_t1]), 3)
    label = torch.as_tensor(np.stack([pair.sdt_t.values, pair.sdt_t1.values]))
    support = np.stack([pair.mask_t, pair.mask_t1]) > 0
    losses = []
    for _ in range(steps):
        seg, sdt = model.forward_frames(x)
        loss = dice_loss(seg, gt) + l1_reg_loss(sdt, label, support)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return model, losses


def test_overfits_single_pair(pair):
    model, _ = _fit(pair, 200)
    out = forward(model, pair)
    preds = [out.seg_t[0].argmax(0).numpy(), out.seg_t1[0].argmax(0).numpy()]
    report = evaluate(preds, [pair.mask_t, pair.mask_t1], 3)
    assert report.macro["dice"] >= 0.95


def test_training_is_deterministic(pair):
    _, a = _fit(pair, 10, seed=2)
    _, b = _fit(pair, 10, seed=2)
    np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)
