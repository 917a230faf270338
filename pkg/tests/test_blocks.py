"""Mask/channel attention, OAB layers and stages, transitions and the fusion unit."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from danet.autograd import Tensor, no_grad
from danet.autograd import functional as F
from danet.autograd.functional import ShapeError
from danet.blocks import (BlockVariantConfig, ChannelAttentionUnit, MaskAttentionUnit, OABLayer, OABStage,
                          SecondOrderFusion, Transition)
from danet.checks import GRAD_TOL_F32, GRAD_TOL_F64, randomize_parameters, run_check
from danet.config import preset


def rng(seed=0):
    return np.random.default_rng(seed)


def x32(shape, seed=0, scale=1.0):
    return Tensor((rng(seed).standard_normal(shape) * scale).astype(np.float32))


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


# -- mask attention -----------------------------------------------------------------

def test_mau_zero_generator_gives_half():
    mau = MaskAttentionUnit(8, 4, rng())
    mau.depthwise.weight.data[...] = 0
    m = mau(x32((2, 8, 5, 5))).data
    assert np.all(m == 0.5)


def test_mau_matches_oracle_chain():
    mau = MaskAttentionUnit(6, 4, rng(1))
    randomize_parameters(mau, rng(2))
    mau.eval()
    x = rng(3).standard_normal((1, 6, 5, 5))
    pw = mau.pointwise
    bn = pw.bn
    h = (x - bn.running_mean.data[None, :, None, None]) / np.sqrt(bn.running_var.data[None, :, None, None] + 1e-5)
    h = np.maximum(h * bn.weight.data[None, :, None, None] + bn.bias.data[None, :, None, None], 0)
    h = np.einsum("oc,nchw->nohw", pw.conv.weight.data[:, :, 0, 0].astype(np.float64), h)
    k = mau.depthwise.weight.data.astype(np.float64)
    hp = np.pad(h, ((0, 0), (0, 0), (4, 4), (4, 4)))
    z = np.zeros_like(h)
    for c in range(4):
        for u in range(9):
            for v in range(9):
                z[0, c] += k[c, 0, u, v] * hp[0, c, u:u + 5, v:v + 5]
    z += mau.depthwise.bias.data[None, :, None, None]
    np.testing.assert_allclose(mau(Tensor(x.astype(np.float32))).data, sigmoid(np.abs(z)), rtol=1e-5, atol=1e-6)


def test_mau_range_on_1e4_inputs():
    lo, hi = 1.0, 0.0
    for seed in range(10):
        mau = MaskAttentionUnit(8, 4, rng(seed))
        randomize_parameters(mau, rng(100 + seed))
        with no_grad():
            m = mau(x32((1000, 8, 4, 4), seed=200 + seed, scale=2.0)).data
        lo, hi = min(lo, m.min()), max(hi, m.max())
    assert lo >= 0.5 and hi < 1.0


def test_mau_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        MaskAttentionUnit(8, 4, rng())(x32((1, 7, 4, 4)))


# -- channel attention --------------------------------------------------------------

def test_cau_zero_fc2_gives_half():
    cau = ChannelAttentionUnit(8, rng(), reduction=4)
    cau.fc2.weight.data[...] = 0
    assert np.all(cau(x32((2, 8, 3, 3))).data == 0.5)


def test_cau_gap_of_constant_channels():
    vals = np.arange(8, dtype=np.float32) - 3.5
    x = Tensor(np.broadcast_to(vals[None, :, None, None], (1, 8, 4, 4)).copy())
    np.testing.assert_array_equal(F.global_avg_pool(x).data.reshape(-1), vals)


def test_cau_matches_oracle_chain():
    cau = ChannelAttentionUnit(8, rng(1), reduction=4)
    randomize_parameters(cau, rng(2))
    x = rng(3).standard_normal((1, 8, 4, 4))
    s = x.mean(axis=(2, 3))
    h = np.maximum(s @ cau.fc1.weight.data.T.astype(np.float64) + cau.fc1.bias.data, 0)
    c = sigmoid(h @ cau.fc2.weight.data.T.astype(np.float64) + cau.fc2.bias.data)
    got = cau(Tensor(x.astype(np.float32))).data
    assert got.shape == (1, 8, 1, 1)
    np.testing.assert_allclose(got.reshape(1, 8), c, rtol=1e-5)


# -- OAB layer --------------------------------------------------------------------------

VARIANTS = [BlockVariantConfig(mau=m, cau=c) for m in ("off", "mask", "variant1", "variant2")
            for c in ("off", "oab", "variant1", "variant2")]


@pytest.mark.parametrize("variant", VARIANTS, ids=lambda v: f"{v.mau}-{v.cau}")
def test_oab_layer_channels_and_prefix(variant):
    layer = OABLayer(40, 32, 32, variant, rng(), cau_reduction=4)
    randomize_parameters(layer, rng(1))
    x = x32((2, 40, 6, 5), seed=2)
    out = layer(x)
    assert out.shape == (2, 72, 6, 5)
    np.testing.assert_array_equal(out.data[:, :40], x.data)


def test_oab_mask_mode_halves_magnitude_bound():
    v = BlockVariantConfig(mau="mask", cau="oab")
    layer = OABLayer(8, 4, 4, v, rng(), cau_reduction=4)
    randomize_parameters(layer, rng(1))
    layer.eval()
    x = x32((3, 8, 5, 5), seed=2)
    fn = layer.new_features(x).data
    ungated = layer.conv(layer.bottleneck(F.mul(x, layer.cau(x)))).data
    assert np.all(np.abs(fn) <= 0.5 * np.abs(ungated) + 1e-7)


def test_variants_at_zero_mask_logits():
    """Zero logits give M = 0.5: mask and variant1 scale by 0.5, variant2 by 1.5."""
    out = {}
    for mode in ("off", "mask", "variant1", "variant2"):
        layer = OABLayer(8, 4, 4, BlockVariantConfig(mau=mode, cau="oab"), rng(7), cau_reduction=4)
        if mode != "off":
            layer.mau.depthwise.weight.data[...] = 0
        out[mode] = layer.new_features(x32((1, 8, 4, 4), seed=3)).data
    np.testing.assert_allclose(out["mask"], 0.5 * out["off"], rtol=1e-6)
    np.testing.assert_allclose(out["variant1"], 0.5 * out["off"], rtol=1e-6)
    np.testing.assert_allclose(out["variant2"], 1.5 * out["off"], rtol=1e-6)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        BlockVariantConfig(mau="xunit")
    with pytest.raises(ValueError):
        BlockVariantConfig(cau="both")
    with pytest.raises(ValueError):
        BlockVariantConfig(fusion="concat")


# -- stages and transitions ----------------------------------------------------------------

def test_stage_danet102_stage1_width():
    st_ = OABStage(64, 6, 32, 32, BlockVariantConfig(), rng())
    assert st_.out_channels == 256
    assert [l.in_channels for l in st_.layers] == [64 + 32 * d for d in range(6)]


def test_stage_danet72_stage3_width():
    c0, pre, _ = preset("danet72").stage_widths()[2]
    assert (c0, pre) == (192, 576)


@pytest.mark.parametrize("name", ["danet72", "danet88", "danet98", "danet102"])
def test_channel_bookkeeping_all_presets(name):
    cfg = preset(name)
    c = cfg.stem_channels
    for s, (c0, pre, post) in zip(cfg.stages, cfg.stage_widths()):
        assert c0 == c and pre == c + s.layers * s.growth and post == s.transition
        c = s.transition


def test_empty_stage_is_identity():
    x = x32((1, 5, 3, 3))
    np.testing.assert_array_equal(OABStage(5, 0, 32, 32, BlockVariantConfig(), rng())(x).data, x.data)


def test_stage_chain_mismatch_rejected():
    with pytest.raises(ShapeError):
        OABStage(8, 2, 4, 4, BlockVariantConfig(), rng())(x32((1, 9, 4, 4)))


def test_transition_shapes():
    lateral, out = Transition(256, 128, True, rng())(x32((1, 256, 64, 48)))
    assert lateral.shape == (1, 128, 64, 48) and out.shape == (1, 128, 32, 24)
    lateral, out = Transition(768, 512, False, rng())(x32((1, 768, 8, 6)))
    assert lateral.shape == out.shape == (1, 512, 8, 6)


# -- fusion --------------------------------------------------------------------------------

def test_sfu_zero_theta_gives_mean():
    sfu = SecondOrderFusion(8, "sfu", rng())
    a, b = x32((1, 8, 4, 4), 1), x32((1, 8, 4, 4), 2)
    np.testing.assert_allclose(sfu(a, b).data, 0.5 * (a.data + b.data), rtol=1e-6, atol=1e-7)


def test_sfu_equal_inputs_returned_exactly():
    sfu = SecondOrderFusion(8, "sfu", rng())
    randomize_parameters(sfu, rng(1))
    f = x32((1, 8, 4, 4), 3)
    np.testing.assert_array_equal(sfu(f, f).data, f.data)


def test_sfu_convex_on_1e4_pairs():
    for seed in range(4):
        sfu = SecondOrderFusion(8, "sfu", rng(seed), reduction=2)
        randomize_parameters(sfu, rng(50 + seed))
        a, b = x32((2500, 8, 4, 4), 100 + seed), x32((2500, 8, 4, 4), 200 + seed, scale=3.0)
        with no_grad():
            lam = sfu.weights(a, b).data
            out = sfu(a, b).data
        assert np.all((lam > 0) & (lam < 1))
        assert np.all(out >= np.minimum(a.data, b.data)) and np.all(out <= np.maximum(a.data, b.data))


def test_sum_mode_violates_convexity():
    a, b = x32((1, 4, 2, 2), 1), x32((1, 4, 2, 2), 2)
    out = SecondOrderFusion(4, "sum", rng())(a, b).data
    np.testing.assert_array_equal(out, a.data + b.data)
    assert np.any(out > np.maximum(a.data, b.data)) or np.any(out < np.minimum(a.data, b.data))


def test_sfu_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        SecondOrderFusion(4, "sfu", rng())(x32((1, 4, 2, 2)), x32((1, 4, 2, 3)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16), c=st.integers(1, 6))
def test_sfu_output_inside_interval_property(seed, c):
    sfu = SecondOrderFusion(c, "sfu", rng(seed), reduction=1)
    randomize_parameters(sfu, rng(seed + 1), scale=2.0)
    a, b = x32((2, c, 3, 3), seed + 2), x32((2, c, 3, 3), seed + 3, scale=10.0)
    out = sfu(a, b).data
    assert np.all(out >= np.minimum(a.data, b.data)) and np.all(out <= np.maximum(a.data, b.data))


# -- gradients -------------------------------------------------------------------------------

@pytest.mark.parametrize("block", ["mau", "cau", "oab_layer", "sfu"])
def test_block_gradients_32bit(block):
    for seed in range(5):
        for name, rep in run_check(block, seed).items():
            assert rep.checked > 0 and rep.max_rel_error < GRAD_TOL_F32, (seed, name, rep.max_rel_error)


@pytest.mark.parametrize("block", ["mau", "cau", "oab_layer", "sfu"])
def test_block_gradients_64bit_with_parameters(block):
    for seed in range(2):
        for name, rep in run_check(block, seed, np.float64).items():
            assert rep.checked > 0 and rep.max_rel_error < GRAD_TOL_F64, (seed, name, rep.max_rel_error)
