"""Attention: outputs against a naive per-head numpy oracle, softmax row
normalization, permutation equivariance, and parameter accounting."""

import numpy as np
import pytest

from sacnet.attention import (AttentionAugmentedConv, AttentionConfig,
                              AttentionWeights, derive_attention_dims,
                              mhsa_parameter_count, multi_head_self_attention,
                              relative_logits, scaled_dot_attention)
from sacnet.tensor import Tensor, TensorError


def naive_mhsa(x, weights, cfg):
    """Independent per-head loop oracle; returns (output, attention rows)."""
    b, c, h, w = x.shape
    p = h * w
    seq = x.reshape(b, c, p).transpose(0, 2, 1)
    outs, all_rows = [], []
    for i in range(cfg.num_heads):
        q = seq @ weights.w_qry[i].data
        k = seq @ weights.w_key[i].data
        v = seq @ weights.w_val[i].data
        logits = q @ k.transpose(0, 2, 1) / np.sqrt(cfg.key_dim)
        if cfg.relative_positions:
            rows = np.arange(p) // w
            cols = np.arange(p) % w
            max_h = (weights.rel_height.data.shape[0] + 1) // 2
            max_w = (weights.rel_width.data.shape[0] + 1) // 2
            h_idx = rows[None, :] - rows[:, None] + max_h - 1
            w_idx = cols[None, :] - cols[:, None] + max_w - 1
            emb = weights.rel_height.data[h_idx] + weights.rel_width.data[w_idx]
            logits = logits + np.einsum("bpk,pqk->bpq",
                                        q / np.sqrt(cfg.key_dim), emb)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        all_rows.append(attn)
        outs.append(attn @ v)
    merged = np.concatenate(outs, axis=2)
    proj = merged @ weights.w_out.data
    return proj.transpose(0, 2, 1).reshape(b, cfg.output_dim, h, w), all_rows


@pytest.mark.parametrize("rel", [False, True])
def test_mhsa_matches_naive_oracle(rel):
    rng = np.random.default_rng(7)
    cfg = AttentionConfig(num_heads=3, key_dim=2, value_dim=3, output_dim=5,
                          relative_positions=rel, max_rel_extent=4)
    weights = AttentionWeights(6, cfg, "attn", rng)
    x = rng.normal(size=(2, 6, 4, 3))
    got = multi_head_self_attention(Tensor(x), weights, cfg).data
    want, rows = naive_mhsa(x, weights, cfg)
    assert np.max(np.abs(got - want)) < 1e-10
    for attn in rows:
        assert np.max(np.abs(attn.sum(axis=-1) - 1.0)) < 1e-9


def test_permutation_equivariance_without_relative_positions():
    rng = np.random.default_rng(8)
    cfg = AttentionConfig(num_heads=2, key_dim=3, value_dim=3, output_dim=4,
                          relative_positions=False)
    weights = AttentionWeights(5, cfg, "attn", rng)
    b, c, h, w = 2, 5, 3, 4
    x = rng.normal(size=(b, c, h, w))
    perm = rng.permutation(h * w)
    x_perm = x.reshape(b, c, h * w)[:, :, perm].reshape(b, c, h, w)
    out = multi_head_self_attention(Tensor(x), weights, cfg).data
    out_perm = multi_head_self_attention(Tensor(x_perm), weights, cfg).data
    expected = out.reshape(b, cfg.output_dim, h * w)[:, :, perm]
    assert np.max(np.abs(out_perm.reshape(b, cfg.output_dim, h * w)
                         - expected)) < 1e-12


def test_scaled_dot_attention_uniform_when_keys_equal():
    # identical keys -> uniform attention -> output is the mean of values
    q = Tensor(np.random.default_rng(9).normal(size=(1, 4, 3)))
    k = Tensor(np.ones((1, 4, 3)))
    v = Tensor(np.arange(8, dtype=np.float64).reshape(1, 4, 2))
    out = scaled_dot_attention(q, k, v).data
    assert np.allclose(out, v.data.mean(axis=1, keepdims=True), atol=1e-12)


def test_relative_logits_translation_structure():
    # the logit between positions depends only on their offset, given equal
    # query rows
    rng = np.random.default_rng(10)
    h, w = 2, 3
    p = h * w
    q = np.tile(rng.normal(size=(1, 1, 4)), (1, p, 1))
    rh = Tensor(rng.normal(size=(2 * 4 - 1, 4)))
    rw = Tensor(rng.normal(size=(2 * 4 - 1, 4)))
    out = relative_logits(Tensor(q), rh, rw, h, w).data[0]
    # (0,0)->(1,1) has the same offset as (0,1)->(1,2)
    assert np.isclose(out[0, w + 1], out[1, w + 2], atol=1e-12)


def test_relative_logits_capacity_error():
    rng = np.random.default_rng(11)
    q = Tensor(rng.normal(size=(1, 9, 2)))
    rh = Tensor(rng.normal(size=(3, 2)))  # capacity 2 < grid 3
    rw = Tensor(rng.normal(size=(3, 2)))
    with pytest.raises(TensorError):
        relative_logits(q, rh, rw, 3, 3)


def test_positions_cap_pooling_preserves_shape():
    rng = np.random.default_rng(12)
    cfg = AttentionConfig(num_heads=2, key_dim=2, value_dim=2, output_dim=4,
                          positions_cap=16)
    weights = AttentionWeights(3, cfg, "attn", rng)
    x = Tensor(rng.normal(size=(1, 3, 8, 8)))   # 64 positions > cap 16
    out = multi_head_self_attention(x, weights, cfg)
    assert out.shape == (1, 4, 8, 8)


def test_positions_cap_impossible_raises():
    rng = np.random.default_rng(13)
    cfg = AttentionConfig(num_heads=1, key_dim=2, value_dim=2, output_dim=2,
                          positions_cap=2)
    weights = AttentionWeights(3, cfg, "attn", rng)
    x = Tensor(rng.normal(size=(1, 3, 5, 7)))   # no common factor fits
    with pytest.raises(TensorError):
        multi_head_self_attention(x, weights, cfg)


def test_derive_attention_dims():
    # d_out = ceil(f/5) rounded up to a multiple of heads, d_k = d_out/heads
    assert derive_attention_dims(8, 2) == (2, 1, 1)
    assert derive_attention_dims(32, 2) == (8, 4, 4)
    assert derive_attention_dims(5, 4) == (4, 1, 1)
    assert derive_attention_dims(100, 8) == (24, 3, 3)


@pytest.mark.parametrize("rel", [False, True])
def test_parameter_count_closed_form(rel):
    rng = np.random.default_rng(14)
    cfg = AttentionConfig(num_heads=4, key_dim=3, value_dim=5, output_dim=8,
                          relative_positions=rel, max_rel_extent=7)
    weights = AttentionWeights(11, cfg, "attn", rng)
    assert weights.parameter_count() == mhsa_parameter_count(11, cfg)
    # independent arithmetic: Nh*C*(2Dk+Dh) + Nh*Dh*Dout (+ 2*(2M-1)*Dk)
    expected = 4 * 11 * (2 * 3 + 5) + 4 * 5 * 8
    if rel:
        expected += 2 * (2 * 7 - 1) * 3
    assert weights.parameter_count() == expected


def test_attention_augmented_conv_channel_split():
    rng = np.random.default_rng(15)
    cfg = AttentionConfig(num_heads=2, key_dim=2, value_dim=2, output_dim=4)
    block = AttentionAugmentedConv(6, 10, cfg, "layer", rng)
    x = Tensor(rng.normal(size=(2, 6, 5, 5)))
    out = block.forward(x)
    assert out.shape == (2, 10, 5, 5)
    # conv branch occupies the first f_out - d_out channels
    assert block.conv_weight.data.shape == (6, 6, 3, 3)


def test_attention_augmented_conv_rejects_oversized_attention():
    rng = np.random.default_rng(16)
    cfg = AttentionConfig(num_heads=1, key_dim=1, value_dim=1, output_dim=8)
    with pytest.raises(ValueError):
        AttentionAugmentedConv(4, 6, cfg, "layer", rng)


def test_attention_gradients_flow_to_all_weights():
    rng = np.random.default_rng(17)
    cfg = AttentionConfig(num_heads=2, key_dim=2, value_dim=2, output_dim=4,
                          relative_positions=True, max_rel_extent=4)
    weights = AttentionWeights(3, cfg, "attn", rng)
    x = Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True)
    from sacnet import tensor as T
    T.mean_all(multi_head_self_attention(x, weights, cfg)).backward()
    for p in weights.parameters() + [x]:
        assert p.grad is not None
        assert np.any(p.grad != 0)
