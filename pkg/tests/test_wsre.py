import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from wsre_meld.density import DimensionError, SampleSet
from wsre_meld.kde import GaussianKde, bandwidth_rule, naive_ratio
from wsre_meld.mcmc import MhSettings, gibbs_blocks, RandomWalkBlock
from wsre_meld.models.gaussian import GaussianTestbed
from wsre_meld.wsre import (CombinedWsreRatio, JonesRatio, WeightedSampleSet, WeightingFunction, WsreConfig,
                            WsreEstimate, combine, combine_logs, estimate_single, hiv_config, h1n1_config,
                            reproduce_component, solve_kappa, tilted_mass, weighted_target, wsre_pipeline)


def _wss(draws, mean, var, h=None):
    draws = np.asarray(draws, dtype=float).reshape(-1, 1)
    h = bandwidth_rule(draws) if h is None else h
    return WeightedSampleSet(draws, WeightingFunction(mean, var), h, {"entropy": 0, "spawn_key": []})


@pytest.fixture(scope="module")
def normal_sample():
    return np.random.default_rng(2024).standard_normal(500)


class TestWeightingFunction:
    def test_log_w_matches_scipy(self):
        wf = WeightingFunction([1.0, -2.0], [4.0, 0.25])
        pts = np.array([[0.0, 0.0], [1.0, -2.0], [3.0, 1.0]])
        ref = norm.logpdf(pts[:, 0], 1.0, 2.0) + norm.logpdf(pts[:, 1], -2.0, 0.5)
        assert np.allclose(wf.log_w(pts), ref, atol=1e-13)

    @pytest.mark.parametrize("var", [0.0, -1.0, np.inf])
    def test_rejects_bad_variance(self, var):
        with pytest.raises(ValueError):
            WeightingFunction(0.0, var)

    def test_weighted_target_is_sum_of_parts(self):
        m = GaussianTestbed()
        wf = WeightingFunction(3.0, 1.0)
        t = weighted_target(m, wf)
        x = np.array([0.4, -1.2])
        assert t.log_density(x) == pytest.approx(m.log_density(x) + wf.log_w_point([0.4]), abs=1e-14)

    def test_weighted_target_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            weighted_target(GaussianTestbed(), WeightingFunction([0.0, 0.0], [1.0, 1.0]))

    def test_tilted_marginal_closed_form(self):
        # N(0,1) tilted by N(3,1) is N(1.5, 0.5)
        t = weighted_target(GaussianTestbed(), WeightingFunction(3.0, 1.0))
        s = MhSettings(iterations=22000, warmup=2000, step_size=1.0, seed=11)
        chain = gibbs_blocks(t, np.zeros(2), [RandomWalkBlock([0, 1])], s)
        phi = chain.draws[:, 0]
        assert np.mean(phi) == pytest.approx(1.5, abs=0.05)
        assert np.var(phi) == pytest.approx(0.5, abs=0.05)


class TestSolveKappa:
    def test_quadrature_oracle(self, normal_sample):
        h = bandwidth_rule(normal_sample)[0]
        sol = solve_kappa(normal_sample, h, (2.0, 4.0), 0.5, 1.0)
        assert sol.attainable and sol.status == "root"
        kde = GaussianKde(normal_sample, h)

        def f(x):
            return math.exp(kde.logpdf(x)[0]) * norm.pdf(x, sol.mu, 1.0)

        inside = integrate.quad(f, 2.0, 4.0, epsabs=1e-13)[0]
        total = sum(integrate.quad(f, a, b, epsabs=1e-13, limit=200)[0]
                    for a, b in ((-np.inf, 2.0), (2.0, 4.0), (4.0, np.inf)))
        assert inside / total == pytest.approx(0.5, abs=1e-3)

    def test_closed_form_mass_matches_quadrature(self, normal_sample):
        h = 0.3
        kde = GaussianKde(normal_sample, h)

        def f(x):
            return math.exp(kde.logpdf(x)[0]) * norm.pdf(x, 1.7, math.sqrt(2.0))

        inside = integrate.quad(f, -0.5, 1.0)[0]
        total = integrate.quad(f, -np.inf, np.inf, limit=200)[0]
        assert tilted_mass(normal_sample, h, (-0.5, 1.0), 1.7, 2.0) == pytest.approx(inside / total, abs=1e-8)

    def test_reflection_symmetry(self):
        x = np.random.default_rng(3).standard_normal(250)
        x = np.concatenate([x, -x])
        h = bandwidth_rule(x)[0]
        right = solve_kappa(x, h, (1.0, 3.0), 0.5, 1.0)
        left = solve_kappa(x, h, (-3.0, -1.0), 0.5, 1.0)
        assert left.mu == pytest.approx(-right.mu, abs=1e-6)

    def test_full_support_is_flagged(self, normal_sample):
        sol = solve_kappa(normal_sample, 0.3, (-1e12, 1e12), 0.99, 1.0)
        assert sol.status == "everywhere"
        assert sol.mass == pytest.approx(1.0, abs=1e-9)

    def test_unattainable_is_flagged(self, normal_sample):
        # a far region with a narrow weight cannot capture most of the mass
        sol = solve_kappa(normal_sample, 0.3, (50.0, 50.001), 0.9, 1.0)
        assert not sol.attainable and sol.status == "closest"

    @pytest.mark.parametrize("region,kappa", [((1.0, 1.0), 0.5), ((2.0, 1.0), 0.5), ((0.0, 1.0), 0.0),
                                              ((0.0, 1.0), 1.0)])
    def test_bad_arguments(self, normal_sample, region, kappa):
        with pytest.raises(ValueError):
            solve_kappa(normal_sample, 0.3, region, kappa, 1.0)

    def test_degenerate_sample(self):
        with pytest.raises(ValueError):
            solve_kappa(np.ones(20), 0.3, (0.0, 1.0), 0.5, 1.0)

    def test_multivariate_rejected(self):
        with pytest.raises(DimensionError):
            solve_kappa(np.zeros((10, 2)), 0.3, (0.0, 1.0), 0.5, 1.0)


class TestSingleEstimate:
    @pytest.fixture(scope="class")
    @staticmethod
    def jones():
        x = np.random.default_rng(5).normal(1.2, 0.8, size=400)
        return JonesRatio(_wss(x, 2.5, 1.0))

    def test_identity(self, jones):
        assert jones.log_ratio(0.7, 0.7) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-3, 6), st.floats(-3, 6))
    def test_antisymmetry_exact(self, jones, a, b):
        assert jones.log_ratio(a, b) == -jones.log_ratio(b, a)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-3, 6), st.floats(-3, 6), st.floats(-3, 6))
    def test_additivity(self, jones, a, b, c):
        lhs = jones.log_ratio(a, b) + jones.log_ratio(b, c)
        assert lhs == pytest.approx(jones.log_ratio(a, c), abs=1e-12 * max(1.0, abs(lhs)))

    def test_formula(self):
        x = np.array([0.0, 1.0, 2.5])
        wf = WeightingFunction(1.0, 2.0)
        j = JonesRatio(_wss(x, 1.0, 2.0, h=0.5))
        lw = wf.log_w(x.reshape(-1, 1))

        def f(p):
            return np.log(np.sum(np.exp(-lw) * norm.pdf(p, x, 0.5)))

        assert j.log_ratio(0.3, 1.9) == pytest.approx(f(0.3) - f(1.9), abs=1e-12)

    def test_gaussian_accuracy_median(self):
        # standard-normal phi marginal, true log r(2, 3) = 2.5; thinning brings
        # the effective size near N, the iid error being about 0.08 here
        model = GaussianTestbed()
        wf = WeightingFunction(2.5, 1.0)
        errs = []
        for seed in range(20):
            s = MhSettings(iterations=27500, warmup=2500, step_size=1.0, seed=seed, thin=10, min_accept=0.01)
            _, r = estimate_single(model, wf, 2500, s)
            errs.append(abs(r.log_ratio(2.0, 3.0) - 2.5))
        assert np.median(errs) < 0.15

    def test_sample_count_checked(self):
        s = MhSettings(iterations=200, warmup=100, seed=0)
        with pytest.raises(ValueError):
            estimate_single(GaussianTestbed(), WeightingFunction(0.0, 1.0), 50, s)


class TestCombine:
    def test_single_component_equals_single(self):
        x = np.random.default_rng(6).normal(size=300)
        wss = _wss(x, 0.5, 2.0)
        comb = combine([(wss, JonesRatio(wss))])
        single = JonesRatio(wss)
        for a, b in [(0.0, 1.0), (-2.0, 2.5), (3.0, -1.0)]:
            assert comb.log_ratio(a, b) == pytest.approx(single.log_ratio(a, b), abs=1e-12)

    def test_identity_exact(self):
        sets = [_wss(np.random.default_rng(k).normal(k, 1, 200), k, 1.0) for k in range(3)]
        assert combine(sets).log_ratio(1.3, 1.3) == 0.0

    def test_dominant_component_wins(self):
        a = _wss(np.random.default_rng(1).normal(0.0, 1.0, 400), 0.0, 1.0)
        b = _wss(np.random.default_rng(2).normal(40.0, 1.0, 400), 40.0, 1.0)
        comb = combine([a, b])
        assert comb.log_ratio(0.2, -0.4) == pytest.approx(JonesRatio(a).log_ratio(0.2, -0.4), abs=1e-9)
        assert comb.log_ratio(40.2, 39.6) == pytest.approx(JonesRatio(b).log_ratio(40.2, 39.6), abs=1e-9)

    def test_weighted_mean_formula(self):
        a = _wss(np.random.default_rng(3).normal(0.0, 1.0, 100), 0.0, 1.0)
        b = _wss(np.random.default_rng(4).normal(1.0, 1.0, 100), 1.0, 1.0)
        nu, de = 0.3, 1.1
        num = den = 0.0
        for s in (a, b):
            shat = GaussianKde(s.draws, s.bandwidth)
            wgt = math.exp(shat.logpdf(nu)[0] + shat.logpdf(de)[0])
            num += wgt * JonesRatio(s).ratio(nu, de)
            den += wgt
        assert combine([a, b]).log_ratio(nu, de) == pytest.approx(math.log(num / den), abs=1e-12)

    def test_underflow_fallback(self):
        vals, fell = combine_logs(np.array([1.0, 3.0]), np.array([-np.inf, -np.inf]))
        assert fell and vals == 2.0
        vals, fell = combine_logs(np.array([1.0, 3.0]), np.array([0.0, -np.inf]))
        assert not fell and vals == 1.0

    def test_bound_matches_direct(self):
        sets = [_wss(np.random.default_rng(k).normal(k, 1, 150), k, 1.0) for k in range(3)]
        comb = combine(sets)
        pts = np.array([[-1.0], [0.5], [2.2], [4.0]])
        b = comb.bind(pts)
        for i in range(4):
            for j in range(4):
                assert b.log_ratio_idx(i, j) == pytest.approx(comb.log_ratio(pts[i], pts[j]), abs=1e-12)

    def test_empty_and_mixed_dimension(self):
        with pytest.raises(ValueError):
            combine([])
        one = _wss(np.arange(5.0), 0.0, 1.0)
        two = WeightedSampleSet(np.random.default_rng(0).normal(size=(5, 2)), WeightingFunction([0, 0], [1, 1]),
                                [0.5, 0.5], {})
        with pytest.raises(DimensionError):
            CombinedWsreRatio([one, two])

    def test_near_flat_weight_matches_naive(self):
        x = np.random.default_rng(9).normal(size=2000).reshape(-1, 1)
        wss = _wss(x, 0.0, 1e12)
        comb = combine([wss])
        naive = naive_ratio(SampleSet(x), bandwidth=wss.bandwidth)
        for a, b in [(0.0, 1.0), (-1.5, 0.5), (1.8, -0.3)]:
            assert comb.log_ratio(a, b) == pytest.approx(naive.log_ratio(a, b), abs=1e-2)


class TestPipeline:
    @pytest.fixture(scope="class")
    @staticmethod
    def small():
        cfg = WsreConfig(tuple(WeightingFunction(m, 1.0) for m in (0.0, 2.0)), 200, seed=17, scan="joint")
        return GaussianTestbed(), wsre_pipeline(GaussianTestbed(), cfg, label="g")

    def test_counts_and_labels(self, small):
        _, est = small
        assert est.total_draws == 400
        assert [s.label for s in est.sets] == ["w1", "w2"]

    def test_json_round_trip(self, small):
        _, est = small
        back = WsreEstimate.from_json(est.to_json())
        assert back.to_json() == est.to_json()
        assert back.evaluator.log_ratio(0.0, 2.5) == est.evaluator.log_ratio(0.0, 2.5)

    def test_json_rejects_other_documents(self):
        with pytest.raises(ValueError):
            WsreEstimate.from_json('{"format": "other"}')
        with pytest.raises(ValueError):
            WsreEstimate.from_json('{"format": "wsre-estimate", "version": 99}')

    @pytest.mark.parametrize("k", [0, 1])
    def test_component_reproduces_bit_identically(self, small, k):
        model, est = small
        again = reproduce_component(model, est, k)
        assert np.array_equal(again.draws, est.sets[k].draws)
        assert np.array_equal(again.bandwidth, est.sets[k].bandwidth)

    def test_hiv_defaults(self):
        cfg = hiv_config()
        means = [w.mean[0] for w in cfg.weighting_functions]
        assert cfg.W == 10 and cfg.n_per_w == 250
        assert means[0] == pytest.approx(0.01) and means[-1] == pytest.approx(0.99)
        assert np.allclose(np.diff(means), means[1] - means[0])
        assert all(w.var[0] == pytest.approx(0.0625) for w in cfg.weighting_functions)

    def test_h1n1_defaults(self):
        cfg = h1n1_config()
        means = np.array([w.mean for w in cfg.weighting_functions])
        assert cfg.W == 100 and cfg.n_per_w == 1000
        assert sorted(set(means[:, 0])) == pytest.approx(np.linspace(30, 275, 10))
        assert sorted(set(means[:, 1])) == pytest.approx(np.linspace(500, 3000, 10))
        assert np.allclose(cfg.weighting_functions[0].var, [625.0, 62500.0])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            WsreConfig((), 10)
        with pytest.raises(ValueError):
            WsreConfig((WeightingFunction(0, 1),), 1)
        with pytest.raises(ValueError):
            WsreConfig((WeightingFunction(0, 1),), 10, scan="random")
