import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg.dynamic_kernel import KernelGenerator, KernelUpdate, extract_lesion_feature, predict
from lesionseg.seg_core import build_model

from oracles import conv_oracle, kernel_update_oracle, lesion_oracle, pool_oracle


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


# ---------------------------------------------------------------- generation

def test_generate_kernel_k1_shape():
    gen = KernelGenerator(256, kernel_size=1).double()
    k = gen(torch.randn(1, 256, 2, 2, dtype=torch.float64))
    assert k.shape == (1, 64, 1, 1)


def test_constant_input_gives_spatially_constant_kernel():
    gen = KernelGenerator(8, kernel_size=2).double()
    k = gen(torch.full((1, 8, 4, 4), 0.7, dtype=torch.float64))
    assert torch.allclose(k, k[..., :1, :1].expand_as(k), atol=0, rtol=0)


def test_pooling_quadrants_match_bin_oracle(rng):
    x = rng.normal(size=(8, 8, 8))
    gen = KernelGenerator(8, kernel_size=2).double()
    with torch.no_grad():
        gen.proj.weight.copy_(torch.eye(8, dtype=torch.float64).repeat(8, 1)[:64].reshape(64, 8, 1, 1))
    out = gen(t64(x)[None])[0, :8].detach().numpy()
    quadrants = np.stack([[x[:, 4 * r:4 * r + 4, 4 * s:4 * s + 4].mean(axis=(1, 2)) for s in range(2)]
                          for r in range(2)]).transpose(2, 0, 1)
    np.testing.assert_allclose(out, quadrants, atol=1e-12)
    np.testing.assert_allclose(out, pool_oracle(x, 2), atol=1e-12)


@pytest.mark.parametrize("size,k", [(7, 3), (5, 2), (2, 3)])
def test_uneven_bins_match_oracle(rng, size, k, caplog):
    x = rng.normal(size=(3, size, size))
    gen = KernelGenerator(3, kernel_size=k).double()
    with torch.no_grad():
        gen.proj.weight.zero_()
        gen.proj.weight[:3, :, 0, 0] = torch.eye(3, dtype=torch.float64)
    with caplog.at_level(logging.WARNING):
        out = gen(t64(x)[None])[0, :3].detach().numpy()
    np.testing.assert_allclose(out, pool_oracle(x, k), atol=1e-12)
    assert ("exceeds" in caplog.text) == (k > size)


def test_kernel_depends_on_input():
    model = build_model(model_config_small()).double().eval()
    a, b = torch.rand(2, 1, 3, 32, 32, dtype=torch.float64)
    ka = model(a).kernels[5]
    kb = model(b).kernels[5]
    assert not torch.allclose(ka, kb)


def model_config_small():
    from lesionseg.config import ModelConfig
    return ModelConfig(encoder_channels=(4, 8, 8, 8, 8), decoder_channels=(4, 8, 8, 8, 8),
                       input_size=(32, 32), heads=2)


# ---------------------------------------------------------------- lesion features

def test_lesion_feature_vanishes_for_confident_background():
    d = torch.rand(1, 64, 4, 4, dtype=torch.float64)
    p = torch.full((1, 1, 4, 4), -60.0, dtype=torch.float64)
    f = extract_lesion_feature(d, p, upsample=False)
    assert f.shape == (1, 64)
    assert f.abs().max() < 1e-20


def test_lesion_feature_half_weight_constant_features():
    c = torch.linspace(-1, 2, 64, dtype=torch.float64)
    d = c.view(1, 64, 1, 1).expand(1, 64, 6, 5)
    f = extract_lesion_feature(d, torch.zeros(1, 1, 6, 5, dtype=torch.float64), upsample=False)
    torch.testing.assert_close(f[0], 0.5 * c * 30, rtol=0, atol=1e-12)
    # same result through the 2x upsampling path
    f_up = extract_lesion_feature(d[..., :6, :4], torch.zeros(1, 1, 3, 2, dtype=torch.float64))
    torch.testing.assert_close(f_up[0], 0.5 * c * 24, rtol=0, atol=1e-12)


@pytest.mark.parametrize("upsample", [False, True])
def test_lesion_feature_matches_pixel_loop(rng, upsample):
    d = rng.normal(size=(5, 4, 4))
    p = rng.normal(size=(2, 2) if upsample else (4, 4)) * 2
    f = extract_lesion_feature(t64(d)[None], t64(p)[None, None], upsample=upsample)
    np.testing.assert_allclose(f[0].numpy(), lesion_oracle(d, p, upsample), atol=1e-6)


def test_lesion_average_divides_by_weight(rng):
    d = t64(rng.normal(size=(1, 3, 4, 4)))
    p = t64(rng.normal(size=(1, 1, 4, 4)))
    plain = extract_lesion_feature(d, p, upsample=False)
    avg = extract_lesion_feature(d, p, upsample=False, average=True)
    torch.testing.assert_close(avg, plain / (torch.sigmoid(p).sum() + 1e-6))


def test_lesion_feature_resolution_mismatch():
    d = torch.zeros(1, 64, 8, 8)
    with pytest.raises(ValueError):
        extract_lesion_feature(d, torch.zeros(1, 1, 8, 8), upsample=True)
    with pytest.raises(ValueError):
        extract_lesion_feature(d, torch.zeros(1, 1, 4, 4), upsample=False)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_lesion_feature_linear_in_features(seed, a, b):
    g = np.random.default_rng(seed)
    d1, d2 = t64(g.normal(size=(1, 4, 4, 4))), t64(g.normal(size=(1, 4, 4, 4)))
    p = t64(g.normal(size=(1, 1, 2, 2)))
    lhs = extract_lesion_feature(a * d1 + b * d2, p)
    rhs = a * extract_lesion_feature(d1, p) + b * extract_lesion_feature(d2, p)
    torch.testing.assert_close(lhs, rhs, rtol=1e-9, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_lesion_feature_monotone_in_probability(seed):
    g = np.random.default_rng(seed)
    d = t64(np.abs(g.normal(size=(1, 4, 4, 4))))
    p = t64(g.normal(size=(1, 1, 4, 4)))
    bump = t64(np.abs(g.normal(size=(1, 1, 4, 4))))
    lo = extract_lesion_feature(d, p, upsample=False)
    hi = extract_lesion_feature(d, p + bump, upsample=False)
    assert (hi >= lo - 1e-12).all()


# ---------------------------------------------------------------- kernel update

def test_update_zero_propagation():
    upd = KernelUpdate().double()
    k = torch.zeros(1, 64, 1, 1, dtype=torch.float64)
    f = torch.zeros(1, 64, dtype=torch.float64)
    gate_f, gate_k = upd.gates(f.unsqueeze(1), k.flatten(2).transpose(1, 2))
    assert torch.all(gate_f == 0.5) and torch.all(gate_k == 0.5)
    assert torch.all(upd(k, f) == 0)


def test_update_scalar_toy():
    upd = KernelUpdate(dim=1).double()
    with torch.no_grad():
        for layer in upd.phi:
            layer.weight.fill_(1.0)
            layer.bias.zero_()
    out = upd(torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64))
    s = 1 / (1 + math.exp(-2))
    assert out.item() == pytest.approx(3 * s, abs=1e-12)
    assert out.item() == pytest.approx(2.6424, abs=1e-4)


def test_update_shape_k1():
    upd = KernelUpdate()
    assert upd(torch.randn(1, 64, 1, 1), torch.randn(1, 64)).shape == (1, 64, 1, 1)


def _phis(upd):
    return [(l.weight.detach().numpy(), l.bias.detach().numpy()) for l in upd.phi]


def test_update_matches_scalar_oracle(rng):
    torch.manual_seed(0)
    upd = KernelUpdate().double()
    with torch.no_grad():
        for l in upd.phi:
            l.bias.uniform_(-0.5, 0.5)
    k = rng.normal(size=(1, 64, 1, 1))
    f = rng.normal(size=(1, 64))
    out = upd(t64(k), t64(f))
    ref, _, _ = kernel_update_oracle(k[0, :, 0, 0], f[0], _phis(upd))
    np.testing.assert_allclose(out[0, :, 0, 0].detach().numpy(), ref, atol=1e-9)


def test_update_broadcasts_descriptor_over_kernel_positions(rng):
    upd = KernelUpdate(dim=6).double()
    k = rng.normal(size=(1, 6, 2, 2))
    f = rng.normal(size=(1, 6))
    out = upd(t64(k), t64(f)).detach().numpy()
    for r in range(2):
        for s in range(2):
            ref, _, _ = kernel_update_oracle(k[0, :, r, s], f[0], _phis(upd))
            np.testing.assert_allclose(out[0, :, r, s], ref, atol=1e-9)


def test_update_rejects_non_finite():
    upd = KernelUpdate()
    f = torch.full((1, 64), float("inf"))
    with pytest.raises(FloatingPointError, match="stage 3"):
        upd(torch.randn(1, 64, 1, 1), f, stage=3)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 2.0))
def test_gates_strictly_inside_unit_interval(seed, scale):
    # float64 sigmoid rounds to exactly 1.0 beyond ~37, so inputs stay in a non-saturating range
    torch.manual_seed(seed % 1000)
    upd = KernelUpdate().double()
    g = np.random.default_rng(seed)
    f = t64(g.normal(size=(1, 1, 64)) * scale)
    k = t64(g.normal(size=(1, 1, 64)) * scale)
    gate_f, gate_k = upd.gates(f, k)
    for gate in (gate_f, gate_k):
        assert (gate > 0).all() and (gate < 1).all()


# ---------------------------------------------------------------- predict

def test_predict_one_hot_selects_channel(rng):
    d = t64(rng.normal(size=(1, 64, 5, 5)))
    k = torch.zeros(1, 64, 1, 1, dtype=torch.float64)
    k[0, 17] = 1
    torch.testing.assert_close(predict(k, d)[0, 0], d[0, 17], rtol=0, atol=0)


def test_predict_zero_kernel():
    logits = predict(torch.zeros(1, 64, 1, 1), torch.randn(1, 64, 4, 4))
    assert torch.all(logits == 0)
    assert torch.all(torch.sigmoid(logits) == 0.5)


@pytest.mark.parametrize("k", [2, 3])
def test_predict_sliding_window_oracle(rng, k):
    d = rng.normal(size=(2, 4, 6, 6))
    kern = rng.normal(size=(2, 4, k, k))
    out = predict(t64(kern), t64(d)).detach().numpy()
    for b in range(2):
        np.testing.assert_allclose(out[b, 0], conv_oracle(d[b], kern[b]), atol=1e-6)


def test_predict_k1_is_matrix_product(rng):
    d = rng.normal(size=(3, 64, 4, 5))
    kern = rng.normal(size=(3, 64, 1, 1))
    out = predict(t64(kern), t64(d)).detach().numpy()
    for b in range(3):
        ref = (kern[b, :, 0, 0] @ d[b].reshape(64, -1)).reshape(4, 5)
        np.testing.assert_allclose(out[b, 0], ref, atol=1e-12)


def test_predict_channel_mismatch():
    with pytest.raises(ValueError):
        predict(torch.zeros(1, 32, 1, 1), torch.zeros(1, 64, 4, 4))
