import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sapgan.attention import (
    AttentionMap,
    AttentionParams,
    FeatureMap,
    NLParams,
    nl_attention_weights,
    nl_forward,
    snl_attention_weights,
    snl_forward,
    snl_forward_naive,
    stable_softmax,
)

from conftest import seeded_randn

# softmax over logits (1, 0): e/(1+e) and 1/(1+e)
W_HI = math.e / (1.0 + math.e)
W_LO = 1.0 / (1.0 + math.e)


def small_params(c, seed=0, value_scale=0.3):
    g = torch.Generator().manual_seed(seed)
    w_k = torch.randn(1, c, generator=g)
    w_v = torch.randn(c, c, generator=g) * value_scale
    return AttentionParams(w_k=w_k, w_v=w_v)


fm_shapes = st.tuples(
    st.integers(1, 6), st.integers(1, 5), st.integers(1, 5)
)


class TestFeatureMap:
    def test_positions_view(self):
        data = torch.arange(12.0).reshape(2, 2, 3)
        fm = FeatureMap(data)
        assert fm.channels == 2
        assert fm.n_positions == 6
        assert fm.positions.shape == (6, 2)
        # position (h=0, w=1) holds channel values data[:, 0, 1]
        assert torch.equal(fm.positions[1], data[:, 0, 1])

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError, match=r"\[C, H, W\]"):
            FeatureMap(torch.zeros(3, 4))

    def test_rejects_nonfinite(self):
        bad = torch.zeros(1, 2, 2)
        bad[0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            FeatureMap(bad)


class TestAttentionMap:
    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="nonnegative"):
            AttentionMap(torch.tensor([1.5, -0.5]))

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError, match="sum to 1"):
            AttentionMap(torch.tensor([0.6, 0.6]))

    def test_global_vs_rows(self):
        assert AttentionMap(torch.tensor([0.5, 0.5])).is_global
        assert not AttentionMap(torch.eye(3)).is_global


class TestStableSoftmax:
    def test_matches_closed_form(self):
        w = stable_softmax(torch.tensor([1.0, 0.0]))
        assert torch.allclose(w, torch.tensor([W_HI, W_LO]), atol=1e-7)

    def test_huge_logits_stay_finite(self):
        w = stable_softmax(torch.tensor([1e4, 1e4 - 1.0]))
        assert torch.isfinite(w).all()
        assert torch.allclose(w, torch.tensor([W_HI, W_LO]), atol=1e-6)


class TestSNL:
    def test_two_position_oracle(self):
        # positions (1,0) and (0,1); w_k picks the first channel, so the
        # logits are (1, 0); identity value map adds the pooled feature.
        x = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]])
        p = AttentionParams(w_k=torch.tensor([[1.0, 0.0]]), w_v=torch.eye(2))
        weights = snl_attention_weights(x, p).weights
        assert torch.allclose(weights, torch.tensor([W_HI, W_LO]), atol=1e-6)
        z = snl_forward(x, p).data
        expect = torch.tensor([[[1.0 + W_HI, W_HI]], [[W_LO, 1.0 + W_LO]]])
        assert torch.allclose(z, expect, atol=1e-6)

    def test_zero_logit_map_is_uniform(self):
        x = seeded_randn(3, 4, 5, seed=1)
        p = AttentionParams(w_k=torch.zeros(1, 3), w_v=torch.eye(3))
        w = snl_attention_weights(x, p).weights
        assert torch.allclose(w, torch.full((20,), 1.0 / 20.0))

    def test_zero_value_map_is_identity(self):
        x = seeded_randn(4, 3, 3, seed=2)
        p = AttentionParams(w_k=seeded_randn(1, 4, seed=3), w_v=torch.zeros(4, 4))
        assert torch.equal(snl_forward(x, p).data, x)
        assert torch.equal(snl_forward_naive(x, p).data, x)

    def test_initialize_starts_as_identity(self):
        p = AttentionParams.initialize(8)
        assert p.w_v.abs().max() == 0
        x = seeded_randn(8, 4, 4, seed=4)
        assert torch.equal(snl_forward(x, p).data, x)

    def test_channel_mismatch_raises(self):
        x = seeded_randn(3, 2, 2, seed=5)
        with pytest.raises(ValueError, match="channel count"):
            snl_forward(x, small_params(4))

    def test_biases_enter_logits_and_context(self):
        x = seeded_randn(2, 2, 2, seed=6)
        base = small_params(2, seed=7)
        with_bias = AttentionParams(
            w_k=base.w_k, w_v=base.w_v, b_k=torch.tensor([3.0]), b_v=torch.tensor([0.5, -0.5])
        )
        # logit bias is shared by every position, so weights are unchanged
        w0 = snl_attention_weights(x, base).weights
        w1 = snl_attention_weights(x, with_bias).weights
        assert torch.allclose(w0, w1, atol=1e-6)
        z0 = snl_forward(x, base).data
        z1 = snl_forward(x, with_bias).data
        assert torch.allclose(z1 - z0, torch.tensor([0.5, -0.5]).reshape(2, 1, 1).expand(2, 2, 2))

    @given(shape=fm_shapes, seed=st.integers(0, 10_000))
    @settings(max_examples=120)
    def test_factored_matches_naive(self, shape, seed):
        c, h, w = shape
        x = seeded_randn(c, h, w, seed=seed, dtype=torch.float64)
        g = torch.Generator().manual_seed(seed + 1)
        p = AttentionParams(
            w_k=torch.randn(1, c, generator=g, dtype=torch.float64),
            w_v=torch.randn(c, c, generator=g, dtype=torch.float64),
        )
        a = snl_forward_naive(x, p).data
        b = snl_forward(x, p).data
        rel = (a - b).abs().max() / a.abs().max().clamp_min(1e-12)
        assert rel < 1e-5

    @given(shape=fm_shapes, seed=st.integers(0, 10_000))
    def test_weights_sum_to_one(self, shape, seed):
        c, h, w = shape
        x = seeded_randn(c, h, w, seed=seed)
        p = small_params(c, seed=seed + 1)
        weights = snl_attention_weights(x, p).weights
        assert (weights >= 0).all()
        assert abs(weights.sum().item() - 1.0) < 1e-6

    @given(shape=fm_shapes, seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
    def test_logit_translation_invariance(self, shape, seed, shift):
        c, h, w = shape
        x = seeded_randn(c, h, w, seed=seed)
        p = small_params(c, seed=seed + 1)
        shifted = AttentionParams(w_k=p.w_k, w_v=p.w_v, b_k=torch.tensor([shift]))
        w0 = snl_attention_weights(x, p).weights
        w1 = snl_attention_weights(x, shifted).weights
        assert torch.allclose(w0, w1, atol=1e-6)

    @given(seed=st.integers(0, 10_000))
    def test_position_permutation_equivariance(self, seed):
        # the global pool ignores position order, so permuting input
        # positions permutes the output the same way
        c, h, w = 3, 2, 4
        x = seeded_randn(c, h, w, seed=seed)
        p = small_params(c, seed=seed + 1)
        g = torch.Generator().manual_seed(seed + 2)
        perm = torch.randperm(h * w, generator=g)
        flat = x.reshape(c, h * w)
        x_perm = flat[:, perm].reshape(c, h, w)
        z = snl_forward(x, p).data.reshape(c, h * w)
        z_perm = snl_forward(x_perm, p).data.reshape(c, h * w)
        assert torch.allclose(z[:, perm], z_perm, atol=1e-6)

    def test_single_position(self):
        x = seeded_randn(5, 1, 1, seed=8)
        p = small_params(5, seed=9)
        w = snl_attention_weights(x, p).weights
        assert torch.allclose(w, torch.ones(1))
        assert torch.allclose(snl_forward(x, p).data, snl_forward_naive(x, p).data, atol=1e-6)


def nl_oracle(x: FeatureMap, p: NLParams) -> torch.Tensor:
    """Double loop over query and key positions, straight from the definition."""
    pos = x.positions
    n = pos.shape[0]
    out = torch.zeros_like(pos)
    for i in range(n):
        q_i = p.theta @ pos[i]
        logits = torch.stack([q_i @ (p.phi @ pos[j]) for j in range(n)])
        w = torch.softmax(logits, dim=0)
        pooled = torch.zeros(x.channels, dtype=pos.dtype)
        for j in range(n):
            pooled = pooled + w[j] * (p.w_v @ pos[j])
        out[i] = pos[i] + p.w_z @ pooled
    return out.T.reshape(x.data.shape)


class TestNL:
    def test_matches_double_loop_oracle(self):
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            c = 4
            x = FeatureMap(torch.randn(c, 3, 2, generator=g, dtype=torch.float64))
            p = NLParams(
                theta=torch.randn(2, c, generator=g, dtype=torch.float64),
                phi=torch.randn(2, c, generator=g, dtype=torch.float64),
                w_v=torch.randn(c, c, generator=g, dtype=torch.float64),
                w_z=torch.randn(c, c, generator=g, dtype=torch.float64),
            )
            assert torch.allclose(nl_forward(x, p).data, nl_oracle(x, p), atol=1e-10)

    @given(shape=fm_shapes, seed=st.integers(0, 10_000))
    def test_rows_sum_to_one(self, shape, seed):
        c, h, w = shape
        x = seeded_randn(c, h, w, seed=seed)
        g = torch.Generator().manual_seed(seed + 1)
        ce = max(1, c // 2)
        p = NLParams(
            theta=torch.randn(ce, c, generator=g),
            phi=torch.randn(ce, c, generator=g),
            w_v=torch.randn(c, c, generator=g),
            w_z=torch.randn(c, c, generator=g),
        )
        rows = nl_attention_weights(x, p).weights
        assert rows.shape == (h * w, h * w)
        sums = rows.sum(dim=-1)
        assert (sums - 1.0).abs().max() < 1e-6

    def test_zero_output_map_is_identity(self):
        x = seeded_randn(6, 3, 3, seed=11)
        p = NLParams.initialize(6, generator=torch.Generator().manual_seed(12))
        assert torch.equal(nl_forward(x, p).data, x)

    def test_initialize_default_embedding(self):
        assert NLParams.initialize(32).embed_channels == 4
        assert NLParams.initialize(4).embed_channels == 1  # floor at 1

    def test_initialize_keeps_value_map_live(self):
        # w_v must not start at zero or every gradient through the block dies
        p = NLParams.initialize(16, generator=torch.Generator().manual_seed(13))
        assert p.w_v.abs().max() > 0
        assert p.w_z.abs().max() == 0

    def test_shape_validation(self):
        c = 4
        good = NLParams.initialize(c)
        with pytest.raises(ValueError, match="phi"):
            NLParams(theta=good.theta, phi=torch.zeros(3, c), w_v=good.w_v, w_z=good.w_z)
        with pytest.raises(ValueError, match="w_z"):
            NLParams(theta=good.theta, phi=good.phi, w_v=good.w_v, w_z=torch.zeros(c, c + 1))
