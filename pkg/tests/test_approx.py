import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cipherlayer.approx import (DEFAULT_DOMAINS, ChebyshevApprox, approx_depth, cheb_fit, clog2, fit_inverse,
                                fit_sigmoid, fit_sqrt, inverse_ct, ps_eval, ps_mult_bound, ps_plan, sigmoid,
                                sigmoid_ct, silu, silu_ct, silu_depth, sqrt_ct)
from cipherlayer.he import ClearBackend, DepthExhaustedError, HeParams

from .oracles import horner_oracle

LONG = HeParams(ring_degree=64, max_level=30, refresh_cost=2)


def clear():
    return ClearBackend(LONG)


def run(be, approx, x, live=None, **kw):
    ct = be.encrypt_vector(x)
    out = ps_eval(be, ct, approx, live=live, **kw)
    return out, be.decrypt(out)


class TestFit:
    @pytest.mark.parametrize("n,expect", [(1, 0), (2, 1), (3, 2), (4, 2), (60, 6), (64, 6), (65, 7), (120, 7)])
    def test_clog2(self, n, expect):
        assert clog2(n) == expect

    @pytest.mark.parametrize("n,depth", [(1, 2), (3, 3), (7, 4), (15, 5), (31, 6), (59, 7), (63, 7), (119, 8)])
    def test_depth(self, n, depth):
        assert approx_depth(n) == depth

    def test_polynomial_reproduced(self):
        f = cheb_fit(lambda x: 3 * x ** 3 - x + 0.5, -2, 2, 3)
        assert f.max_fit_error < 1e-12

    def test_entire_function_converges(self):
        errs = [cheb_fit(np.sin, -3, 3, n).max_fit_error for n in (5, 9, 15, 21)]
        assert errs == sorted(errs, reverse=True)
        assert errs[-1] < 1e-12

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            cheb_fit(np.sin, 1, 1, 3)

    def test_non_finite_node_named(self):
        with pytest.raises(ValueError, match="log"):
            cheb_fit(np.log, -1, 1, 4, name="log")

    @pytest.mark.parametrize("fit,domain", [(fit_sqrt, (0.0, 1.0)), (fit_inverse, (-1.0, 1.0))])
    def test_domains_excluding_zero(self, fit, domain):
        with pytest.raises(ValueError):
            fit(domain, 9)

    def test_covers(self):
        f = fit_sigmoid(0.0, (-4.0, 4.0), 7)
        assert f.covers([-4, 0, 4]) and not f.covers([4.5])


class TestActivations:
    def test_sigmoid_degree_59_sup_error(self):
        assert fit_sigmoid().max_fit_error <= 1e-4

    def test_silu_degree_59_sup_error(self):
        f = fit_sigmoid(0.0, DEFAULT_DOMAINS["silu"])
        grid = np.linspace(f.a, f.b, 10_000)
        assert np.max(np.abs(grid * f(grid) - silu(grid))) <= 1e-4

    @pytest.mark.parametrize("bias", [-math.log(8), -1.0, 0.0, 2.5])
    def test_bias_spot_check(self, bias):
        f = fit_sigmoid(bias)
        assert abs(float(f(-bias)) - 0.5) <= f.max_fit_error

    def test_inverse_degree_monotone(self):
        errs = [fit_inverse(DEFAULT_DOMAINS["inverse"], n).max_fit_error for n in (30, 50, 60, 120)]
        assert errs == sorted(errs, reverse=True)


class TestPatersonStockmeyer:
    @pytest.mark.parametrize("n", [1, 2, 3, 7, 8, 15, 31, 59, 63, 100, 119, 127])
    def test_mult_bound(self, n):
        f = cheb_fit(np.tanh, -2, 2, n)
        assert ps_plan(f).nonscalar_mults <= ps_mult_bound(n)

    def test_degree_59_counter(self):
        be = clear()
        f = fit_sigmoid()
        run(be, f, np.linspace(-15, 15, 32))
        assert be.counters.mult <= 22 == ps_mult_bound(59)
        assert be.counters.mult == ps_plan(f).nonscalar_mults
        assert be.counters.mult < 59

    @pytest.mark.parametrize("n", [3, 8, 21, 59, 119])
    def test_matches_exact_horner(self, n):
        be = clear()
        f = fit_sigmoid(0.0, (-16.0, 16.0), n)
        x = np.linspace(-16, 16, 32)
        _, got = run(be, f, x)
        assert np.max(np.abs(got - horner_oracle(f, x))) <= 1e-9

    @pytest.mark.parametrize("n", [1, 2, 5, 16, 31, 32, 59, 64, 119])
    def test_consumes_declared_depth(self, n):
        be = clear()
        f = cheb_fit(np.cos, -1, 1, n)
        ct = be.encrypt_vector(np.linspace(-1, 1, 32))
        out = ps_eval(be, ct, f)
        assert ct.level - out.level == f.depth == approx_depth(n)

    def test_padding_evaluates_to_zero(self):
        be = clear()
        f = fit_sigmoid(0.0, (-8.0, 8.0), 15)
        _, got = run(be, f, np.full(8, 0.3), live=8)
        assert np.all(got[8:] == 0.0)
        assert np.allclose(got[:8], sigmoid(0.3), atol=f.max_fit_error)

    def test_explicit_baby_step(self):
        f = fit_sigmoid(0.0, (-8.0, 8.0), 31)
        x = np.linspace(-8, 8, 32)
        for k in (2, 4, 8, 16):
            _, got = run(clear(), f, x, baby=k)
            assert np.max(np.abs(got - f(x))) < 1e-12

    def test_depth_exhausted(self):
        be = clear()
        ct = be.encrypt_vector([0.0], level=5, tag="scores")
        with pytest.raises(DepthExhaustedError, match="scores"):
            ps_eval(be, ct, fit_sigmoid())

    def test_ckks_degree_59(self, deep_ckks):
        f = fit_sigmoid()
        x = np.linspace(-15, 15, deep_ckks.slot_count)
        out = ps_eval(deep_ckks, deep_ckks.encrypt_vector(x), f)
        assert np.max(np.abs(deep_ckks.decrypt(out) - sigmoid(x))) <= f.max_fit_error + 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=40), st.sampled_from([None, 2, 4, 8]))
    def test_random_series_match_clenshaw(self, coeffs, baby):
        c = np.array(coeffs)
        f = ChebyshevApprox(-1.0, 1.0, len(c) - 1, c, approx_depth(len(c) - 1), 0.0)
        x = np.linspace(-1, 1, 32)
        _, got = run(clear(), f, x, baby=baby)
        assert np.max(np.abs(got - f(x))) <= 1e-9 * max(1.0, np.sum(np.abs(c)))


class TestProtocols:
    def test_sigmoid_bias_folded(self):
        be = clear()
        x = np.linspace(-6, 6, 32)
        out = sigmoid_ct(be, be.encrypt_vector(x), bias=-2.0, domain=(-8, 8), degree=31)
        f = fit_sigmoid(-2.0, (-8.0, 8.0), 31)
        assert np.max(np.abs(be.decrypt(out) - sigmoid(x - 2))) <= f.max_fit_error + 1e-12

    def test_silu_one_extra_level(self):
        be = clear()
        x = np.linspace(-6, 6, 32)
        ct = be.encrypt_vector(x)
        out = silu_ct(be, ct, domain=(-8, 8), degree=31)
        assert ct.level - out.level == silu_depth(31) == 7
        assert np.max(np.abs(be.decrypt(out) - silu(x))) < 1e-3

    def test_sqrt_and_inverse(self):
        be = clear()
        x = np.linspace(0.5, 9, 32)
        s = be.decrypt(sqrt_ct(be, be.encrypt_vector(x), (0.25, 10.0), 59))
        assert np.max(np.abs(s - np.sqrt(x))) < 1e-4
        i = be.decrypt(inverse_ct(be, be.encrypt_vector(x), (0.25, 10.0), 59))
        assert np.max(np.abs(i - 1 / x)) < 1e-2
