"""Median smoothing and certification tests.

Oracles: scipy quadrature of the normal density for the CDF, closed-form
Gaussian propagation for linear scorers, and direct index arithmetic for
the order statistics.
"""

import math

import numpy as np
import pytest
from scipy import integrate

from ctiq.errors import ConfigError, FeasibilityError, ShapeError
from ctiq.smoothing import (CertifiedScore, SmoothingConfig, certify, gaussian_cdf,
                            gaussian_cdf_inv, is_feasible, max_ratio, mean_smooth,
                            min_samples, percentile_indices, sample_scores)

from helpers import linear_score_fn


def phi_quadrature(z: float) -> float:
    """Independent CDF oracle: numeric integration of the normal density."""
    val, _ = integrate.quad(lambda t: math.exp(-t * t / 2.0) / math.sqrt(2.0 * math.pi), -12.0, z)
    return val


class TestGaussianCdf:
    def test_symmetry_at_zero(self):
        assert gaussian_cdf(0.0) == 0.5

    @pytest.mark.parametrize("z", [-3.0, -1.0, -0.3, 0.7, 2.0, 3.5])
    def test_matches_quadrature(self, z):
        assert abs(gaussian_cdf(z) - phi_quadrature(z)) <= 1e-7

    def test_phi_two(self):
        assert abs(gaussian_cdf(2.0) - 0.977250) < 5e-7

    def test_inverse_roundtrip(self):
        assert abs(gaussian_cdf_inv(gaussian_cdf(1.3)) - 1.3) <= 1e-6

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2, 1.7])
    def test_inverse_domain_error(self, p):
        with pytest.raises(ConfigError):
            gaussian_cdf_inv(p)


class TestConfigFeasibility:
    def test_valid_config(self):
        SmoothingConfig(sigma=0.18, epsilon=0.36, n_samples=2000, seed=0)

    def test_infeasible_raises_at_construction(self):
        # eps/sigma = 4 needs ~32000 samples
        with pytest.raises(FeasibilityError, match="N"):
            SmoothingConfig(sigma=0.1, epsilon=0.4, n_samples=2000, seed=0)

    def test_parameter_validation(self):
        with pytest.raises(ConfigError):
            SmoothingConfig(sigma=-0.1, epsilon=0.1, n_samples=100, seed=0)
        with pytest.raises(ConfigError):
            SmoothingConfig(sigma=0.1, epsilon=-0.1, n_samples=100, seed=0)
        with pytest.raises(ConfigError):
            SmoothingConfig(sigma=0.1, epsilon=0.0, n_samples=1, seed=0)


class TestCertifyIndices:
    def test_strong_preset_indices(self):
        cfg = SmoothingConfig(sigma=0.18, epsilon=0.36, n_samples=2000, seed=0)
        lower, median, upper = percentile_indices(cfg)
        # Phi oracle: floor(Phi(-2)*2000) = 45, ceil(Phi(2)*2000) = 1955
        assert (lower, median, upper) == (45, 1000, 1955)

    def test_zero_radius_indices_coincide(self):
        cfg = SmoothingConfig(sigma=0.18, epsilon=0.0, n_samples=2000, seed=0)
        lower, median, upper = percentile_indices(cfg)
        assert lower == median == upper == 1000

    def test_sorted_sequence_lookup(self):
        cfg = SmoothingConfig(sigma=0.18, epsilon=0.36, n_samples=2000, seed=0)
        cert = certify(np.arange(1.0, 2001.0), cfg, 100.0)
        assert cert.lower == 45.0
        assert cert.median == 1000.0
        assert cert.upper == 1955.0
        # 100 * (1955 - 45) / 100; the percentage includes the factor 100
        assert cert.cd_pct == 1910.0

    def test_unsorted_rejected(self):
        cfg = SmoothingConfig(sigma=0.18, epsilon=0.0, n_samples=10, seed=0)
        with pytest.raises(ShapeError, match="sorted"):
            certify(np.array([3.0, 1.0] + [5.0] * 8), cfg, 100.0)

    def test_wrong_count_rejected(self):
        cfg = SmoothingConfig(sigma=0.18, epsilon=0.0, n_samples=10, seed=0)
        with pytest.raises(ShapeError):
            certify(np.arange(9.0), cfg, 100.0)

    def test_monotone_nesting_in_epsilon(self):
        samples = np.sort(np.random.default_rng(0).standard_normal(2000))
        prev = None
        for eps in (0.0, 0.09, 0.18, 0.36, 0.54):
            cfg = SmoothingConfig(sigma=0.18, epsilon=eps, n_samples=2000, seed=0)
            cert = certify(samples, cfg, 100.0)
            if prev is not None:
                assert cert.lower <= prev.lower and cert.upper >= prev.upper
            prev = cert

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        vals = rng.standard_normal(500)
        cfg = SmoothingConfig(sigma=0.2, epsilon=0.2, n_samples=500, seed=0)
        a = certify(np.sort(vals), cfg, 100.0)
        b = certify(np.sort(rng.permutation(vals)), cfg, 100.0)
        assert (a.lower, a.median, a.upper) == (b.lower, b.median, b.upper)

    def test_median_robust_to_top_percent_blowup(self):
        rng = np.random.default_rng(2)
        samples = np.sort(rng.standard_normal(2000))
        corrupted = samples.copy()
        corrupted[-20:] = np.inf  # top 1%
        cfg = SmoothingConfig(sigma=0.18, epsilon=0.36, n_samples=2000, seed=0)
        a = certify(samples, cfg, 100.0)
        b = certify(corrupted, cfg, 100.0)
        assert a.median == b.median and a.lower == b.lower


class TestMaxRatioMinSamples:
    def test_max_ratio_2000_matches_paper_scale(self):
        r = max_ratio(2000)
        assert 3.28 <= r <= 3.30
        # inverse-CDF oracle via quadrature bisection
        lo, hi = 3.0, 3.6
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if phi_quadrature(mid) < 1999 / 2000:
                lo = mid
            else:
                hi = mid
        assert abs(r - 0.5 * (lo + hi)) < 1e-5

    def test_min_samples_small_ratio(self):
        assert min_samples(0.5) <= 4

    def test_min_samples_matches_enumeration(self):
        for ratio in (0.3, 0.8, 1.7, 2.4):
            expected = next(n for n in range(2, 100000) if is_feasible(1.0, ratio, n))
            assert min_samples(ratio) == expected

    def test_min_samples_monotone(self):
        values = [min_samples(r) for r in (0.5, 1.0, 2.0, 3.0)]
        assert values == sorted(values)

    def test_min_samples_is_feasible_boundary(self):
        for ratio in (0.5, 1.5, 2.5, 3.29):
            n = min_samples(ratio)
            assert is_feasible(1.0, ratio, n)
            assert n == 2 or not is_feasible(1.0, ratio, n - 1)


class TestSampleScores:
    def test_constant_fn(self):
        cfg = SmoothingConfig(sigma=0.1, epsilon=0.05, n_samples=64, seed=3)
        x = np.random.default_rng(4).uniform(0, 1, (3, 8, 8))
        scores = sample_scores(lambda b: np.full(len(b), 7.25), x, cfg)
        assert np.all(scores == 7.25)

    def test_vanishing_noise(self):
        cfg = SmoothingConfig(sigma=1e-9, epsilon=0.0, n_samples=32, seed=5)
        x = np.random.default_rng(6).uniform(0.2, 0.8, (3, 8, 8))
        fn = linear_score_fn(np.random.default_rng(7).standard_normal(x.size))
        scores = sample_scores(fn, x, cfg)
        assert np.all(np.abs(scores - fn(x[None])[0]) < 1e-4)

    def test_linear_fn_sd_matches_gaussian_propagation(self):
        # scores of w.(x+r) have sd sigma * ||w||_2 exactly in population
        rng = np.random.default_rng(8)
        w = rng.standard_normal(3 * 8 * 8)
        x = rng.uniform(0, 1, (3, 8, 8))
        cfg = SmoothingConfig(sigma=0.18, epsilon=0.36, n_samples=2000, seed=9)
        scores = sample_scores(linear_score_fn(w), x, cfg)
        expected_sd = cfg.sigma * np.linalg.norm(w)
        assert abs(scores.std() - expected_sd) / expected_sd < 0.10

    def test_sorted_ascending(self):
        cfg = SmoothingConfig(sigma=0.2, epsilon=0.1, n_samples=100, seed=10)
        x = np.random.default_rng(11).uniform(0, 1, (3, 8, 8))
        scores = sample_scores(linear_score_fn(np.ones(x.size)), x, cfg)
        assert np.all(np.diff(scores) >= 0)

    def test_deterministic_and_worker_independent(self):
        cfg = SmoothingConfig(sigma=0.15, epsilon=0.1, n_samples=120, seed=12)
        x = np.random.default_rng(13).uniform(0, 1, (3, 8, 8))
        fn = linear_score_fn(np.random.default_rng(14).standard_normal(x.size))
        a = sample_scores(fn, x, cfg, chunk_size=32, workers=1)
        b = sample_scores(fn, x, cfg, chunk_size=32, workers=4)
        np.testing.assert_array_equal(a, b)

    def test_chunk_size_does_not_change_noise(self):
        # per-index substreams: chunk boundaries must not alter the draws
        from ctiq.smoothing import noise_sample

        cfg = SmoothingConfig(sigma=0.15, epsilon=0.1, n_samples=50, seed=15)
        x = np.zeros((3, 8, 8))
        collected = {}

        def capture(batch):
            for row in batch:
                collected[len(collected)] = row.copy()
            return np.zeros(len(batch))

        sample_scores(capture, x, cfg, chunk_size=7)
        for i in range(cfg.n_samples):
            np.testing.assert_array_equal(
                collected[i], noise_sample(cfg.seed, i, x.shape, cfg.sigma)
            )


class TestMeanSmooth:
    def test_constant_fn(self):
        cfg = SmoothingConfig(sigma=0.1, epsilon=0.0, n_samples=16, seed=16)
        assert mean_smooth(lambda b: np.full(len(b), 3.0), np.zeros((3, 8, 8)), cfg) == 3.0

    def test_equals_median_for_symmetric_samples(self):
        cfg = SmoothingConfig(sigma=0.1, epsilon=0.0, n_samples=101, seed=17)
        vals = np.sort(np.concatenate([[-x, x] for x in range(1, 51)] + [[0.0]]))
        cert = certify(vals, cfg, 100.0)
        assert cert.median == 0.0 == np.mean(vals)

    def test_linear_fn_clt_bound(self):
        rng = np.random.default_rng(18)
        w = rng.standard_normal(3 * 8 * 8)
        x = rng.uniform(0, 1, (3, 8, 8))
        cfg = SmoothingConfig(sigma=0.18, epsilon=0.0, n_samples=2000, seed=19)
        m = mean_smooth(linear_score_fn(w), x, cfg)
        center = float(x.reshape(-1) @ w)
        bound = 3.0 * cfg.sigma * np.linalg.norm(w) / math.sqrt(cfg.n_samples)
        assert abs(m - center) <= bound


class TestAnalyticSoundness:
    def test_linear_certificate_contains_boundary_medians(self):
        rng = np.random.default_rng(20)
        d = 3 * 8 * 8
        w = rng.standard_normal(d)
        x = rng.uniform(0.2, 0.8, (3, 8, 8))
        cfg = SmoothingConfig(sigma=0.18, epsilon=0.36, n_samples=2000, seed=21)
        fn = linear_score_fn(w)
        cert = certify(sample_scores(fn, x, cfg), cfg, 100.0)
        # population median at x+u is w.x + w.u; allow 3 order-stat SEs
        se_median = math.sqrt(math.pi / (2 * cfg.n_samples)) * cfg.sigma * np.linalg.norm(w)
        for k in range(20):
            u = np.random.default_rng(100 + k).standard_normal(d)
            u *= cfg.epsilon / np.linalg.norm(u)
            shifted = SmoothingConfig(sigma=cfg.sigma, epsilon=cfg.epsilon,
                                      n_samples=cfg.n_samples, seed=500 + k)
            samples_at_u = sample_scores(fn, x + u.reshape(x.shape), shifted)
            emp_median = float(np.median(samples_at_u))
            assert cert.lower - 3 * se_median <= emp_median <= cert.upper + 3 * se_median
