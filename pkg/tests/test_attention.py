import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg.attention import NUM_POOLED, ESABlock, LCABlock, MultiHeadAttention, pyramid_pool

from oracles import attention_oracle, lca_gate_oracle, lesion_oracle, pyramid_oracle


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def np_params(layer):
    return layer.weight.detach().numpy(), layer.bias.detach().numpy()


def randomize_biases(module, scale=0.3):
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.uniform_(-scale, scale)
    return module


# ---------------------------------------------------------------- pyramid pooling

@pytest.mark.parametrize("h,w", [(1, 1), (2, 3), (5, 5), (7, 4), (16, 16), (64, 64)])
def test_pyramid_pool_always_35_rows(h, w):
    assert NUM_POOLED == 35
    assert pyramid_pool(torch.randn(2, 3, h, w)).shape == (2, 35, 3)


def test_single_pixel_gives_identical_rows(rng):
    x = t64(rng.normal(size=(1, 6, 1, 1)))
    out = pyramid_pool(x)[0]
    torch.testing.assert_close(out, x[0, :, 0, 0].expand(35, 6), rtol=0, atol=0)


@pytest.mark.parametrize("h,w", [(10, 10), (6, 9)])
def test_pyramid_pool_matches_bin_oracle(rng, h, w):
    x = rng.normal(size=(4, h, w))
    np.testing.assert_allclose(pyramid_pool(t64(x)[None])[0].numpy(), pyramid_oracle(x), atol=1e-6)


def test_first_row_is_global_mean(rng):
    x = t64(rng.normal(size=(2, 5, 13, 11)))
    torch.testing.assert_close(pyramid_pool(x)[:, 0], x.mean(dim=(2, 3)), rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- multi-head attention

def mha_oracle(mha, q, k, v):
    return attention_oracle(q, k, v, *np_params(mha.q_proj), *np_params(mha.k_proj), *np_params(mha.v_proj),
                            *np_params(mha.out_proj), mha.heads)


def test_attention_matches_triple_loop(rng):
    torch.manual_seed(1)
    mha = randomize_biases(MultiHeadAttention(8, 2).double())
    q, k, v = rng.normal(size=(4, 8)), rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    out, weights = mha(t64(q)[None], t64(k)[None], t64(v)[None], return_weights=True)
    ref, ref_w = mha_oracle(mha, q, k, v)
    np.testing.assert_allclose(out[0].detach().numpy(), ref, atol=1e-6)
    np.testing.assert_allclose(weights[0].detach().numpy(), np.array(ref_w), atol=1e-9)


def test_identical_keys_give_uniform_weights(rng):
    mha = MultiHeadAttention(8, 4).double()
    key = rng.normal(size=(1, 8))
    k = t64(np.repeat(key, 5, axis=0))[None]
    q1, q2 = t64(rng.normal(size=(1, 3, 8))), t64(rng.normal(size=(1, 3, 8)))
    out1, w = mha(q1, k, k, return_weights=True)
    out2 = mha(q2, k, k)
    torch.testing.assert_close(w, torch.full_like(w, 1 / 5), rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(out1, out2, rtol=1e-12, atol=1e-12)
    expected = mha.out_proj(mha.v_proj(t64(key)))
    torch.testing.assert_close(out1[0], expected.expand(3, 8), rtol=1e-12, atol=1e-12)


def test_single_token_identity_projections():
    mha = MultiHeadAttention(6, 1).double()
    with torch.no_grad():
        for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
            lin.weight.copy_(torch.eye(6))
            lin.bias.zero_()
    t = torch.randn(1, 1, 6, dtype=torch.float64)
    out = mha(torch.randn(1, 7, 6, dtype=torch.float64), t, t)
    torch.testing.assert_close(out[0], t[0].expand(7, 6), rtol=0, atol=1e-15)


def test_attention_rows_sum_to_one(rng):
    mha = MultiHeadAttention(16, 4).double()
    _, w = mha(t64(rng.normal(size=(2, 9, 16))), t64(rng.normal(size=(2, 35, 16))),
               t64(rng.normal(size=(2, 35, 16))), return_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 4, 9, dtype=torch.float64), rtol=0, atol=1e-6)


def test_attention_rejects_non_finite():
    mha = MultiHeadAttention(4, 2)
    q = torch.full((1, 2, 4), float("nan"))
    with pytest.raises(FloatingPointError):
        mha(q, torch.zeros(1, 3, 4), torch.zeros(1, 3, 4))


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 4)


# ---------------------------------------------------------------- ESA

def test_esa_shape_and_token_count():
    esa = ESABlock(64, heads=8)
    x = torch.randn(1, 64, 16, 16)
    seen = {}
    esa.attn.register_forward_hook(lambda m, inp, out: seen.update(q=inp[0].shape, k=inp[1].shape))
    assert esa(x).shape == x.shape
    assert seen["q"] == (1, 256, 64) and seen["k"] == (1, 35, 64)


def test_esa_score_matrix_is_n_by_35(rng):
    esa = ESABlock(8, heads=2).double()
    x = t64(rng.normal(size=(1, 8, 12, 12)))
    tokens = x.flatten(2).transpose(1, 2)
    pooled = pyramid_pool(x)
    _, w = esa.attn(tokens, pooled, pooled, return_weights=True)
    assert w.shape == (1, 2, 144, 35)


def test_esa_zero_output_projections_is_identity(rng):
    esa = ESABlock(8, heads=2).double()
    with torch.no_grad():
        esa.attn.out_proj.weight.zero_()
        esa.ffn[2].weight.zero_()
    x = t64(rng.normal(size=(2, 8, 5, 5)))
    torch.testing.assert_close(esa(x), x, rtol=0, atol=0)


def test_esa_matches_compositional_oracle(rng):
    torch.manual_seed(2)
    esa = randomize_biases(ESABlock(4, heads=2, expansion=2).double())
    x = rng.normal(size=(4, 3, 3))
    out = esa(t64(x)[None])[0].detach().numpy()

    tokens = x.reshape(4, -1).T
    attended, _ = mha_oracle(esa.attn, tokens, pyramid_oracle(x), pyramid_oracle(x))
    y = tokens + attended
    w1, b1 = np_params(esa.ffn[0])
    w2, b2 = np_params(esa.ffn[2])
    y = y + np.maximum(y @ w1.T + b1, 0) @ w2.T + b2
    np.testing.assert_allclose(out, y.T.reshape(4, 3, 3), atol=1e-5)


# ---------------------------------------------------------------- LCA

def lca_branch_oracle(lca, x, logits):
    """Attention-branch output per pixel, N x C, from scalar gate loops."""
    c = x.shape[0]
    lesion = lesion_oracle(x, logits, upsample=False)
    tokens = x.reshape(c, -1).T
    gates = lca_gate_oracle(tokens, lesion, *np_params(lca.q_proj), *np_params(lca.k_proj), lca.heads)
    wv, bv = np_params(lca.v_proj)
    wo, bo = np_params(lca.out_proj)
    v = wv @ lesion + bv
    d = c // lca.heads
    heads = np.concatenate([gates[:, h:h + 1] * v[h * d:(h + 1) * d] for h in range(lca.heads)], axis=1)
    return heads @ wo.T + bo, gates


def test_lca_gate_matches_pixel_oracle(rng):
    torch.manual_seed(4)
    lca = randomize_biases(LCABlock(6, heads=2, expansion=2).double())
    x = rng.normal(size=(6, 4, 4)) * 0.3
    logits = rng.normal(size=(4, 4))
    tokens = t64(x.reshape(6, -1).T)[None]
    lesion = t64(lesion_oracle(x, logits, upsample=False))[None]
    branch = lca.attend(tokens, lesion)[0].detach().numpy()
    ref, ref_gates = lca_branch_oracle(lca, x, logits)
    np.testing.assert_allclose(lca.gate(tokens, lesion)[0].detach().numpy(), ref_gates, atol=1e-6)
    np.testing.assert_allclose(branch, ref, atol=1e-6)

    full = lca(t64(x)[None], t64(logits)[None, None])[0].detach().numpy()
    y = x.reshape(6, -1).T + ref
    w1, b1 = np_params(lca.ffn[0])
    w2, b2 = np_params(lca.ffn[2])
    y = y + np.maximum(y @ w1.T + b1, 0) @ w2.T + b2
    np.testing.assert_allclose(full, y.T.reshape(6, 4, 4), atol=1e-6)


def test_lca_zero_lesion_token_leaves_only_feed_forward(rng):
    lca = LCABlock(8, heads=2).double()
    x = t64(rng.normal(size=(1, 8, 4, 4)))
    logits = torch.full((1, 1, 4, 4), -80.0, dtype=torch.float64)
    tokens = x.flatten(2).transpose(1, 2)
    torch.testing.assert_close(lca(x, logits), (tokens + lca.ffn(tokens)).transpose(1, 2).reshape(x.shape),
                               rtol=1e-12, atol=1e-12)


def test_lca_equal_queries_get_equal_enhancement(rng):
    lca = LCABlock(8, heads=2).double()
    x = rng.normal(size=(1, 8, 3, 3))
    x[0, :, 2, 2] = x[0, :, 0, 1]
    x = t64(x)
    out = lca(x, t64(rng.normal(size=(1, 1, 3, 3))))
    torch.testing.assert_close(out[0, :, 2, 2], out[0, :, 0, 1], rtol=0, atol=0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), step=st.floats(0.0, 5.0))
def test_lca_gate_monotone_in_similarity(seed, step):
    torch.manual_seed(seed % 997)
    lca = LCABlock(4, heads=1).double()
    with torch.no_grad():
        lca.q_proj.weight.copy_(torch.eye(4))
        lca.k_proj.weight.copy_(torch.eye(4))
    g = np.random.default_rng(seed)
    lesion = t64(g.normal(size=(1, 4)))
    q = t64(g.normal(size=(1, 1, 4)))
    # moving the query along the lesion direction raises q . t by step * |t|^2
    q2 = q + step * lesion[:, None]
    assert lca.gate(q2, lesion).item() >= lca.gate(q, lesion).item()


def test_lca_softmax_mode_weight_is_one(rng):
    lca = LCABlock(8, heads=4, mode="softmax").double()
    tokens = t64(rng.normal(size=(1, 5, 8)))
    assert torch.all(lca.gate(tokens, t64(rng.normal(size=(1, 8)))) == 1)


def test_lca_resolution_mismatch():
    lca = LCABlock(8, heads=2)
    with pytest.raises(ValueError):
        lca(torch.zeros(1, 8, 4, 4), torch.zeros(1, 1, 2, 2))
