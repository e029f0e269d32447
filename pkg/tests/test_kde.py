import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from wsre_meld.kde import (GaussianKde, bandwidth_rule, gaussian_product_params, kde_logpdf, log_sum_exp,
                           naive_ratio, weighted_kde_log_unnorm)

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class TestBandwidthRule:
    def test_two_points(self):
        x = np.array([-1.0, 1.0])
        sd = np.std(x, ddof=1)
        iqr = (np.percentile(x, 75) - np.percentile(x, 25)) / 1.34
        assert bandwidth_rule(x)[0] == pytest.approx(0.9 * min(sd, iqr) * 2 ** -0.2, rel=1e-14)

    @pytest.mark.parametrize("c", [0.01, 3.0, 1e4])
    def test_scale_equivariant(self, c):
        x = np.random.default_rng(1).normal(size=200)
        assert bandwidth_rule(c * x)[0] == pytest.approx(c * bandwidth_rule(x)[0], rel=1e-12)

    def test_per_dimension(self):
        rng = np.random.default_rng(2)
        x = np.column_stack([rng.normal(size=300), 10 * rng.normal(size=300)])
        h = bandwidth_rule(x)
        assert h.shape == (2,)
        assert h[0] == pytest.approx(bandwidth_rule(x[:, 0])[0])
        assert h[1] == pytest.approx(bandwidth_rule(x[:, 1])[0])

    def test_degenerate(self):
        with pytest.raises(ValueError):
            bandwidth_rule(np.ones(10))
        with pytest.raises(ValueError):
            bandwidth_rule(np.array([1.0]))


class TestStandardKde:
    def test_single_point_at_mode(self):
        est = GaussianKde(np.array([0.7]), 1.0)
        assert kde_logpdf(est, 0.7) == pytest.approx(-LOG_SQRT_2PI, abs=1e-15)

    def test_single_point_one_away(self):
        est = GaussianKde(np.array([0.7]), 1.0)
        assert kde_logpdf(est, 1.7) == pytest.approx(-LOG_SQRT_2PI - 0.5, abs=1e-14)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_integrates_to_one(self, seed):
        x = np.random.default_rng(seed).gamma(2.0, size=50)
        est = GaussianKde(x)
        val, _ = integrate.quad(lambda t: math.exp(kde_logpdf(est, t)), -np.inf, np.inf, limit=400,
                                points=None, epsabs=1e-10)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_matches_scipy_norm_mixture(self):
        x = np.random.default_rng(3).normal(size=40)
        est = GaussianKde(x, 0.3)
        t = np.linspace(-4, 4, 17)
        ref = np.log(np.mean(norm.pdf(t[:, None], loc=x[None, :], scale=0.3), axis=1))
        assert np.allclose(est.logpdf(t), ref, atol=1e-12)

    def test_permutation_invariant_exactly(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=300)
        a = GaussianKde(x, 0.2).logpdf(np.linspace(-3, 3, 11))
        b = GaussianKde(rng.permutation(x), 0.2).logpdf(np.linspace(-3, 3, 11))
        assert np.array_equal(a, b)

    def test_far_tail_stays_finite(self):
        est = GaussianKde(np.random.default_rng(5).normal(size=100))
        v = kde_logpdf(est, 60.0)
        assert math.isfinite(v) and v < -1e4

    def test_unweighted_log_unnorm_rejected(self):
        with pytest.raises(ValueError):
            GaussianKde(np.arange(3.0), 1.0, np.zeros(3)).logpdf(0.0)

    def test_empty_and_bad_weights(self):
        with pytest.raises(ValueError):
            GaussianKde(np.empty((0, 1)), 1.0)
        with pytest.raises(ValueError):
            GaussianKde(np.arange(3.0), 1.0, np.array([0.0, np.inf, 0.0]))
        with pytest.raises(ValueError):
            GaussianKde(np.arange(3.0), 1.0, np.zeros(2))


class TestJonesKde:
    def test_unit_weights_reduce_to_standard(self):
        x = np.random.default_rng(6).normal(size=80)
        std = GaussianKde(x, 0.4)
        jones = GaussianKde(x, 0.4, np.zeros(80))
        t = np.linspace(-3, 3, 25)
        assert np.allclose(jones.log_unnorm(t) - math.log(80), std.logpdf(t), atol=1e-12)

    def test_single_term(self):
        est = GaussianKde(np.array([1.0]), 0.5, np.array([2.0]))
        expected = 2.0 + norm.logpdf(1.3, loc=1.0, scale=0.5)
        assert weighted_kde_log_unnorm(est, 1.3) == pytest.approx(expected, abs=1e-13)

    def test_single_term_ratio_cancels_weight(self):
        est = GaussianKde(np.array([1.0]), 0.5, np.array([7.0]))
        diff = weighted_kde_log_unnorm(est, 0.2) - weighted_kde_log_unnorm(est, 1.4)
        assert diff == pytest.approx(norm.logpdf(0.2, 1.0, 0.5) - norm.logpdf(1.4, 1.0, 0.5), abs=1e-13)


class TestGaussianProduct:
    def test_zero_distance(self):
        log_s, mu_p, var_p = gaussian_product_params(1.5, 0.3, 1.5, 2.0)
        assert log_s == pytest.approx(-0.5 * math.log(2 * math.pi * (0.09 + 2.0)), abs=1e-15)
        assert mu_p == pytest.approx(1.5, abs=1e-15)

    def test_worked_example(self):
        log_s, mu_p, var_p = gaussian_product_params(0.0, 1.0, 2.0, 1.0)
        assert var_p == 0.5
        assert mu_p == 1.0
        assert log_s == pytest.approx(-0.5 * math.log(4 * math.pi) - 1.0, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.05, 3), st.floats(-5, 5), st.floats(0.05, 9), st.floats(-6, 6))
    def test_pointwise_identity(self, phi_n, h, mu, sigma2, x):
        log_s, mu_p, var_p = gaussian_product_params(phi_n, h, mu, sigma2)
        lhs = norm.logpdf(x, phi_n, h) + norm.logpdf(x, mu, math.sqrt(sigma2))
        rhs = log_s + norm.logpdf(x, mu_p, math.sqrt(var_p))
        assert lhs == pytest.approx(rhs, abs=1e-12 * max(1.0, abs(lhs)))

    def test_rejects_bad_scales(self):
        with pytest.raises(ValueError):
            gaussian_product_params(0.0, 0.0, 0.0, 1.0)


class TestLogSumExp:
    def test_all_neg_inf(self):
        assert log_sum_exp(np.array([-np.inf, -np.inf])) == -np.inf

    def test_large_values(self):
        assert log_sum_exp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0 + math.log(2))


class TestNaiveRatio:
    def test_kind_and_identity(self):
        r = naive_ratio(np.random.default_rng(7).normal(size=500))
        assert r.kind == "naive"
        assert r.log_ratio(0.3, 0.3) == 0.0

    def test_close_to_truth_in_body(self):
        r = naive_ratio(np.random.default_rng(8).normal(size=20000))
        assert r.log_ratio(0.0, 1.0) == pytest.approx(0.5, abs=0.05)
