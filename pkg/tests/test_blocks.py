import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cipherlayer import reference as ref
from cipherlayer.approx import ApproxProfile
from cipherlayer.blocks import (PAPER_NORM, AttentionConfig, LayerWeights, NormConfig, desk_layer_config,
                                layer_depth, layer_reference, rmsnorm, rope, rope_faithful, rope_heads,
                                sigmoid_attention, swiglu_ffn, transformer_layer)
from cipherlayer.he import ClearBackend, HeParams, RefreshDisabledError
from cipherlayer.packing import TernaryMatrix, pack_columns, unpack
from cipherlayer.runtime import LevelTracker

LAYER = HeParams(ring_degree=64, max_level=40, refresh_cost=2)


def unit_rms_rows(rng, s, d, lo=0.5, hi=2.0):
    X = rng.normal(size=(s, d))
    target = rng.uniform(lo, hi, s)
    return X * np.sqrt(target / np.mean(X * X, axis=1))[:, None]


@pytest.fixture
def be():
    return ClearBackend(LAYER)


class TestRope:
    def test_paired_matches_reference_in_one_level(self, be, rng):
        X = rng.normal(size=(8, 8))
        pm = pack_columns(be, X)
        out = rope_heads(be, pm, heads=2)
        assert np.allclose(unpack(be, out), ref.rope_heads(X, 2), atol=1e-13)
        assert pm.level - out.level == 1
        assert be.counters.rot == 0

    def test_position_zero_is_identity(self, be, rng):
        X = rng.normal(size=(4, 4))
        out = unpack(be, rope_heads(be, pack_columns(be, X), heads=1))
        assert np.allclose(out[0], X[0])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 16), st.sampled_from([2, 4, 8]), st.integers(0, 2 ** 31))
    def test_paired_preserves_pair_norms(self, s, d, seed):
        be = ClearBackend(LAYER)
        X = np.random.default_rng(seed).normal(size=(s, d))
        Y = unpack(be, rope_heads(be, pack_columns(be, X), heads=1))
        n_in = X[:, 0::2] ** 2 + X[:, 1::2] ** 2
        n_out = Y[:, 0::2] ** 2 + Y[:, 1::2] ** 2
        assert np.allclose(n_in, n_out)

    def test_faithful_matches_slot_formula(self, be, rng):
        s, d = 6, 4
        X = rng.normal(size=(s, d))
        cos, sin = rng.uniform(-1, 1, (2, s, d))
        out = rope_faithful(be, pack_columns(be, X), cos, sin)
        n = be.slot_count
        for i in range(d):
            q = np.zeros(n)
            q[:s] = X[:, i]
            neg = np.zeros(n)
            neg[0:s:2] = -1
            pos = np.zeros(n)
            pos[1:s:2] = 1
            t = np.roll(q, -1) * neg + np.roll(q, 1) * pos
            expect = q[:s] * cos[:, i] + t[:s] * sin[:, i]
            assert np.allclose(be.decrypt(out.cols[i])[:s], expect)

    def test_faithful_costs_two_levels_and_rotations(self, be, rng):
        s, d = 8, 4
        cos, sin = ref.rope_tables(s, d)
        pm = pack_columns(be, rng.normal(size=(s, d)))
        out = rope(be, pm, cos, sin, mode="faithful")
        assert pm.level - out.level == 2
        assert be.counters.rot == 2 * d

    def test_odd_width_rejected(self, be):
        cos, sin = ref.rope_tables(2, 2)
        with pytest.raises(ValueError):
            rope(be, pack_columns(be, np.ones((2, 3))), cos, sin)


class TestAttention:
    @pytest.mark.parametrize("heads", [1, 2])
    def test_matches_approximate_reference(self, be, rng, heads):
        s, d = 8, 8
        cfg = AttentionConfig(heads, s, d, sigmoid=ApproxProfile(31, (-8.0, 8.0)))
        Q, K, V = (unit_rms_rows(rng, s, d) for _ in range(3))
        tr = LevelTracker(be.counters)
        out = sigmoid_attention(be, pack_columns(be, Q), pack_columns(be, K), pack_columns(be, V), cfg, tr)
        approx = ref.sigmoid_attention(Q, K, V, heads, cfg.effective_bias, cfg.score_scale, cfg.sigmoid_approx())
        exact = ref.sigmoid_attention(Q, K, V, heads, cfg.effective_bias, cfg.score_scale)
        got = unpack(be, out)
        assert np.max(np.abs(got - approx)) < 1e-12
        assert np.max(np.abs(got - exact)) < 1e-3
        assert tr.assert_budget("attention.scores", 2).passed
        assert tr.assert_budget("attention.sigmoid", 6).passed

    def test_bias_modes(self):
        assert AttentionConfig(1, 8, 4).effective_bias == pytest.approx(-math.log(8))
        assert AttentionConfig(1, 8, 4, bias_mode="faithful").effective_bias == pytest.approx(math.log(8))
        assert AttentionConfig(1, 8, 4, bias=0.5).effective_bias == 0.5

    def test_score_scale(self):
        assert AttentionConfig(2, 8, 16).score_scale == pytest.approx(1 / math.sqrt(8))
        assert AttentionConfig(2, 8, 16, head_scale="model").score_scale == pytest.approx(1 / 4)

    @pytest.mark.parametrize("kw", [dict(heads=3, seq_len=4, model_dim=8), dict(heads=1, seq_len=4, model_dim=4,
                                                                              bias=float("nan"))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttentionConfig(**kw)


class TestRmsnorm:
    @pytest.mark.parametrize("d", [4, 8, 16, 32])
    def test_one_refresh_per_call(self, be, rng, d):
        X = unit_rms_rows(rng, 8, d)
        rmsnorm(be, pack_columns(be, X), np.ones(d), NormConfig(variance_domain=(0.25, 16.0), sqrt_degree=31,
                                                                   inverse_degree=31))
        assert be.counters.refresh == 1

    def test_accuracy_and_ledger(self, be, rng):
        cfg = NormConfig(variance_domain=(0.25, 16.0), sqrt_degree=31, inverse_degree=31)
        X = unit_rms_rows(rng, 8, 16)
        g = rng.uniform(0.5, 1.5, 16)
        tr = LevelTracker(be.counters)
        out = rmsnorm(be, pack_columns(be, X), g, cfg, tr)
        assert np.max(np.abs(unpack(be, out) - ref.rmsnorm(X, g, cfg.eps))) < 1e-3
        assert tr.assert_budget("rmsnorm.pre_refresh", cfg.levels_before_refresh).passed
        assert tr.assert_budget("rmsnorm.post_refresh", cfg.levels_after_refresh).passed
        assert tr.assert_budget("rmsnorm", cfg.levels_before_refresh + cfg.levels_after_refresh).passed

    def test_paper_profile_is_nineteen_levels(self):
        assert PAPER_NORM.levels_before_refresh == 9
        assert PAPER_NORM.levels_after_refresh == 10

    def test_x_path_not_refreshed(self, be, rng):
        cfg = NormConfig(variance_domain=(0.25, 16.0), sqrt_degree=15, inverse_degree=15)
        pm = pack_columns(be, unit_rms_rows(rng, 4, 4))
        out = rmsnorm(be, pm, np.ones(4), cfg)
        # fresh branch ends at R - inv_depth, then one mult and one pmult
        assert out.level == LAYER.refresh_level - cfg.levels_after_refresh

    def test_refresh_needs_no_outer_permission(self, rng):
        be = ClearBackend(LAYER, strict=True)
        cfg = NormConfig(variance_domain=(0.25, 16.0), sqrt_degree=15, inverse_degree=15)
        rmsnorm(be, pack_columns(be, unit_rms_rows(rng, 4, 4)), np.ones(4), cfg)
        with pytest.raises(RefreshDisabledError):
            be.refresh(be.encrypt_vector([1.0]))

    def test_gamma_length_checked(self, be):
        with pytest.raises(ValueError):
            rmsnorm(be, pack_columns(be, np.ones((2, 4))), np.ones(3))

    def test_padding_stays_zero(self, be, rng):
        cfg = NormConfig(variance_domain=(0.25, 16.0), sqrt_degree=15, inverse_degree=15)
        out = rmsnorm(be, pack_columns(be, unit_rms_rows(rng, 4, 4)), np.ones(4), cfg)
        assert all(np.all(be.decrypt(c)[4:] == 0) for c in out.cols)


class TestFfn:
    def test_matches_reference(self, be, rng):
        s, d, f = 8, 8, 16
        X = 0.3 * rng.normal(size=(s, d))
        w1, w2, w3 = (TernaryMatrix.random(rng, *shape) for shape in ((d, f), (d, f), (f, d)))
        prof = ApproxProfile(31, (-8.0, 8.0))
        tr = LevelTracker(be.counters)
        out = swiglu_ffn(be, pack_columns(be, X), w1, w2, w3, prof, tr)
        expect = ref.swiglu_ffn(X, w1.entries, w2.entries, w3.entries)
        assert np.max(np.abs(unpack(be, out) - expect)) < 1e-3
        assert tr.assert_budget("ffn.silu", 7).passed
        assert tr.assert_budget("ffn.hadamard", 1).passed
        for stage in ("ffn.gate", "ffn.up", "ffn.down"):
            assert tr.assert_budget(stage, 0).passed


class TestLayer:
    def test_clear_layer_equals_approximate_reference(self, rng):
        cfg = desk_layer_config()
        w = LayerWeights.random(rng, 16, 32)
        X = rng.normal(size=(8, 16))
        be = ClearBackend(LAYER, strict=True)
        tr = LevelTracker(be.counters)
        got = unpack(be, transformer_layer(be, pack_columns(be, X), w, cfg, tr))
        assert np.max(np.abs(got - layer_reference(X, w, cfg, approximate=True))) < 1e-10
        assert np.max(np.abs(got - layer_reference(X, w, cfg))) < 1e-3
        assert be.counters.refresh == 3
        assert sum(r.counters.refresh for r in tr.records if r.label.startswith("rmsnorm.") and
                   r.label.count(".") == 1) == 3

    def test_zero_weights_give_zero_output(self, rng):
        cfg = desk_layer_config()
        be = ClearBackend(LAYER)
        out = transformer_layer(be, pack_columns(be, rng.normal(size=(8, 16))), LayerWeights.zeros(16, 32), cfg)
        assert np.all(unpack(be, out) == 0)

    def test_depth_fits_desk_budget(self):
        cfg = desk_layer_config()
        need = layer_depth(cfg)["min_refresh_level"]
        assert need <= LAYER.refresh_level

    def test_without_final_norm(self, rng):
        cfg = desk_layer_config(final_norm=False)
        w = LayerWeights.random(rng, 16, 32)
        X = rng.normal(size=(8, 16))
        be = ClearBackend(LAYER)
        got = unpack(be, transformer_layer(be, pack_columns(be, X), w, cfg))
        assert np.max(np.abs(got - layer_reference(X, w, cfg, approximate=True))) < 1e-10
        assert be.counters.refresh == 2

    def test_weights_tensor_roundtrip(self, rng):
        w = LayerWeights.random(rng, 8, 16)
        back = LayerWeights.from_tensors(w.tensors())
        for k, v in w.tensors().items():
            assert np.array_equal(back.tensors()[k], v)

    def test_reference_trace_stays_in_domains(self, rng):
        cfg = desk_layer_config()
        for seed in range(10):
            r = np.random.default_rng(seed)
            trace = {}
            layer_reference(r.normal(size=(8, 16)), LayerWeights.random(r, 16, 32), cfg, trace=trace)
            lo, hi = cfg.norm.variance_domain
            for key in ("norm_attn.variance", "norm_ffn.variance", "norm_final.variance"):
                assert lo <= trace[key].min() and trace[key].max() <= hi
            assert cfg.attention.sigmoid_approx().covers(trace["scores"])
