import math

import numpy as np
import pytest

from gradcheck import check, numeric_grad
from rangefuse.errors import ConfigError
from rangefuse.fusion import make_plan
from rangefuse.nn.layers import Backbone, BackboneConfig, ConvBlock, HeadLayout, Heads, ParamStore, \
    backbone_gather, predictions_from_raw
from rangefuse.nn.model import SURFACE_CHANNELS, FusionNet, NetConfig, input_width, surface_features
from rangefuse.nn.optim import SGD, Schedule
from rangefuse.nn.tensor import Tensor, channel_norm, conv2d, softmax
from rangefuse.rangeview import RvGeometry


def test_identity_1x1_conv(rng):
    x = rng.normal(size=(3, 4, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(w)).data, x)


def test_uniform_softmax():
    np.testing.assert_allclose(softmax(Tensor(np.zeros((2, 4))), axis=1).data, 0.25)


def test_conv_fd_on_4x4(rng):
    check(lambda x, w: conv2d(x, w), (1, 4, 4), (1, 1, 3, 3), rng=rng, rtol=1e-5)


def test_head_layout_width():
    lay = HeadLayout(2, 6)
    assert lay.n_steps == 7
    assert lay.width == 2 + 7 * 2 + 2 + 7 * 2 + 7 * 2 == 46
    sl = lay.slices
    assert sl["log_sigma"].stop == lay.width


def test_head_bias_prior():
    params = ParamStore(0, np.float64)
    heads = Heads(params, 8, HeadLayout(), prior=0.01)
    heads.w.data[...] = 0.0
    preds = predictions_from_raw(heads(Tensor(np.random.default_rng(0).normal(size=(5, 8)))), HeadLayout())
    np.testing.assert_allclose(preds.class_probs[:, 1], 0.01)
    assert not preds.centers.any() and not preds.log_sigma.any() and not preds.log_dims.any()
    np.testing.assert_array_equal(preds.orient[..., 0], 1.0)
    np.testing.assert_array_equal(preds.orient[..., 1], 0.0)


def test_random_heads_probabilities_sum_to_one(rng):
    params = ParamStore(3, np.float64)
    heads = Heads(params, 8, HeadLayout())
    preds = predictions_from_raw(heads(Tensor(rng.normal(size=(9, 8)) * 5)), HeadLayout())
    np.testing.assert_allclose(preds.class_probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(preds.class_probs >= 0)


def test_backbone_shapes_and_zero_input():
    params = ParamStore(0, np.float64)
    bb = Backbone(params, 5, BackboneConfig((4, 6, 8)))
    out = bb(Tensor(np.zeros((5, 8, 16))))
    assert out.shape == (4, 8, 16)
    assert not out.data.any()
    with pytest.raises(ConfigError):
        bb(Tensor(np.zeros((5, 6, 16))))
    with pytest.raises(ConfigError):
        bb(Tensor(np.zeros((4, 8, 16))))


def test_backbone_azimuth_shift_equivariance(rng):
    params = ParamStore(1, np.float64)
    bb = Backbone(params, 3, BackboneConfig((4, 6, 8)))
    x = rng.normal(size=(3, 8, 32))
    for shift in (4, 8, 12):  # multiples of the 4x total downsampling
        a = bb(Tensor(np.roll(x, shift, axis=2))).data
        b = np.roll(bb(Tensor(x)).data, shift, axis=2)
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_gather_reads_exact_cells(rng):
    f = rng.normal(size=(4, 3, 5))
    cells = np.array([0, 7, 14, 7])
    out = backbone_gather(Tensor(f), cells).data
    for i, c in enumerate(cells):
        np.testing.assert_array_equal(out[i], f[:, c // 5, c % 5])


def test_backbone_jacobian_spot_check(rng):
    params = ParamStore(2, np.float64)
    bb = Backbone(params, 2, BackboneConfig((3, 4), convs_per_stage=1))
    x = rng.normal(size=(2, 8, 16))
    t = Tensor(x, requires_grad=True)
    weight = rng.normal(size=(3, 8, 16))
    (bb(t) * weight).sum().backward()
    for _ in range(3):
        d = rng.normal(size=x.shape)
        eps = 1e-5
        fd = ((bb(Tensor(x + eps * d)).data * weight).sum() - (bb(Tensor(x - eps * d)).data * weight).sum()) / (2 * eps)
        ad = float((t.grad * d).sum())
        assert abs(fd - ad) <= 1e-4 * max(abs(ad), 1e-8)


def test_conv_block_parameter_gradients(rng):
    params = ParamStore(4, np.float64)
    block = ConvBlock(params, "b", 2, 3, layers=2)
    x = Tensor(rng.normal(size=(2, 4, 6)))
    weight = rng.normal(size=(3, 4, 6))
    (block(x) * weight).sum().backward()
    arrays = [t.data for _, t in params]
    grads = [t.grad.copy() for _, t in params]
    fd = numeric_grad(lambda: float((block(x).data * weight).sum()), arrays)
    for g, n in zip(grads, fd):
        np.testing.assert_allclose(g, n, rtol=1e-4, atol=1e-7)


def test_channel_norm_statistics_and_gradient(rng):
    x = rng.normal(3.0, 2.0, size=(3, 4, 5))
    y = channel_norm(x).data
    np.testing.assert_allclose(y.mean(axis=(1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(1, 2)), 1.0, rtol=1e-4)
    check(lambda t: channel_norm(t), (2, 3, 4), rng=rng)


def test_normalized_conv_block_parameter_gradients(rng):
    params = ParamStore(5, np.float64)
    block = ConvBlock(params, "b", 2, 3, layers=2, norm=True)
    assert [k for k, _ in params][-2:] == ["b.1.gamma", "b.1.beta"]
    x = Tensor(rng.normal(size=(2, 4, 6)))
    weight = rng.normal(size=(3, 4, 6))
    (block(x) * weight).sum().backward()
    arrays = [t.data for _, t in params]
    grads = [t.grad.copy() for _, t in params]
    fd = numeric_grad(lambda: float((block(x).data * weight).sum()), arrays)
    for g, n in zip(grads, fd):
        np.testing.assert_allclose(g, n, rtol=1e-4, atol=1e-7)


def _raw_image(r, az):
    raw = np.zeros((6, 1, len(r)))
    raw[0], raw[1], raw[5] = r, np.mod(az, 2 * np.pi), r > 0
    return raw


def test_surface_features_flat_wall():
    # a wall at x = 10 seen head-on: neighbours lie across the ray, so 2φ = ±π
    az = np.array([-0.1, 0.0, 0.1])
    feats = surface_features(_raw_image(10.0 / np.cos(az), az))
    assert feats.shape == (SURFACE_CHANNELS, 1, 3)
    # the wall runs along y, so each ray meets it at 0.1 rad off the perpendicular
    off = -math.cos(0.2)
    np.testing.assert_allclose(feats[0, 0], [off, -1.0, 0.0], atol=1e-9)  # next column
    np.testing.assert_allclose(feats[2, 0], [0.0, -1.0, off], atol=1e-9)  # previous column
    np.testing.assert_allclose(feats[1, 0], [-math.sin(0.2), 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(feats[3, 0], [0.0, 0.0, math.sin(0.2)], atol=1e-9)


def test_surface_features_mask_gaps_and_jumps():
    az = np.array([0.0, 0.01, 0.02, 0.03])
    r = np.array([10.0, 0.0, 10.0, 14.0])  # empty cell, then a 4 m range jump
    feats = surface_features(_raw_image(r, az))
    assert not feats[:, 0, 1].any()
    assert not feats[:2, 0, 0].any() and not feats[2:, 0, 2].any()  # neighbours of the empty cell
    assert not feats[:2, 0, 2].any() and not feats[2:, 0, 3].any()  # across the jump


def test_param_store_deterministic_and_flat_round_trip():
    a, b = ParamStore(7), ParamStore(7)
    for p in (a, b):
        ConvBlock(p, "x", 3, 4)
    np.testing.assert_array_equal(a.flat(), b.flat())
    a.load_flat(np.arange(a.flat().size, dtype=np.float32))
    assert a.flat()[5] == 5.0
    with pytest.raises(ConfigError):
        a.load_flat(np.zeros(3))
    with pytest.raises(ConfigError):
        a.add("x.0.w", np.zeros(1))
    assert [m["name"] for m in a.manifest()] == ["x.0.w", "x.0.b"]


def test_input_widths():
    assert input_width("early", 6, 16) == 16
    assert input_width("late", 6, 16) == 16 + 5 * 17 + 5 * 3
    assert input_width("incremental", 6, 16) == 16
    with pytest.raises(ConfigError):
        NetConfig(kind="median")


@pytest.mark.parametrize("kind", ["early", "late", "incremental"])
def test_fusion_net_forward_and_determinism(kind, moving_log):
    g = RvGeometry.from_degrees(32, 128, -30, 10)
    plan = make_plan(kind, moving_log.sweeps, g)
    cfg = NetConfig(kind=kind, extractor_width=4, backbone=BackboneConfig((4, 8)), seed=3)
    out = [FusionNet(cfg)(FusionNet(cfg).prepare(plan), np.arange(50)) for _ in range(2)]
    assert out[0].shape == (50, HeadLayout().width)
    assert out[0].dtype == np.float32
    np.testing.assert_array_equal(out[0].data, out[1].data)
    with pytest.raises(ConfigError):
        FusionNet(NetConfig(kind=kind, n_sweeps=3)).prepare(plan)


def test_net_config_dict_round_trip():
    cfg = NetConfig(kind="late", backbone=BackboneConfig((8, 16)), layout=HeadLayout(2, 4))
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


def test_schedule_staircase():
    s = Schedule(2e-3, 2e-5, 2000, 250)
    assert s(0) == s(249) == pytest.approx(2e-3)
    assert s(250) < s(249)
    assert s(2000) == pytest.approx(2e-5)
    assert s(5000) == pytest.approx(2e-5)


def test_sgd_momentum_and_clip():
    params = ParamStore(0, np.float64)
    w = params.add("w", np.array([1.0]))
    opt = SGD(params, Schedule(0.1, 0.1, 10, 5), momentum=0.5, grad_clip=1.0)
    w.grad = np.array([4.0])
    assert opt.step() == pytest.approx(4.0)
    assert w.data[0] == pytest.approx(1.0 - 0.1 * 1.0)
    w.grad = np.array([0.5])
    opt.step()
    assert w.data[0] == pytest.approx(0.9 - 0.1 * (0.5 * 1.0 + 0.5))
