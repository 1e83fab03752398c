"""Median randomized smoothing with order-statistic certification.

For noise level sigma and attack radius epsilon, the smoothed score at x
is the empirical median of scores over N Gaussian-noised copies of x,
and the certified interval is given by the order statistics at
percentile levels Phi(-eps/sigma) and Phi(+eps/sigma). Percentile
indices are 1-based: lower = max(1, floor(p_lo * N)), median =
ceil(N / 2), upper = ceil(p_up * N); certification is possible only
while ceil(p_up * N) < N.

Noise draw i comes from the RNG substream (seed, i), so results do not
depend on chunking or worker scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FeasibilityError, ShapeError

_SQRT2 = math.sqrt(2.0)


def gaussian_cdf(z: float) -> float:
    """Standard normal CDF via erfc (accurate in both tails)."""
    return 0.5 * math.erfc(-z / _SQRT2)


def gaussian_cdf_inv(p: float, tol: float = 1e-9) -> float:
    """Inverse CDF by bisection on gaussian_cdf."""
    if not 0.0 < p < 1.0:
        raise ConfigError(f"percentile must lie strictly inside (0, 1), got {p}")
    lo, hi = -40.0, 40.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gaussian_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _percentiles(sigma: float, epsilon: float):
    ratio = epsilon / sigma
    return gaussian_cdf(-ratio), gaussian_cdf(ratio)


def is_feasible(sigma: float, epsilon: float, n_samples: int) -> bool:
    _, p_up = _percentiles(sigma, epsilon)
    return math.ceil(p_up * n_samples) < n_samples


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    epsilon: float
    n_samples: int
    seed: int

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.epsilon < 0.0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.n_samples < 2:
            raise ConfigError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if not is_feasible(self.sigma, self.epsilon, self.n_samples):
            raise FeasibilityError(
                f"ceil(Phi(eps/sigma) * N) < N fails for sigma={self.sigma}, "
                f"epsilon={self.epsilon}, N={self.n_samples}; need N >= "
                f"{min_samples(self.epsilon / self.sigma)}"
            )


@dataclass(frozen=True)
class CertifiedScore:
    median: float
    lower: float
    upper: float
    cd_pct: float
    samples_sorted: np.ndarray | None = None


def certify(samples_sorted: np.ndarray, cfg: SmoothingConfig, range_m: float,
            keep_samples: bool = False) -> CertifiedScore:
    """Order-statistic certificate from an ascending sample array."""
    samples_sorted = np.asarray(samples_sorted, dtype=np.float64)
    n = cfg.n_samples
    if samples_sorted.shape != (n,):
        raise ShapeError(f"expected {n} sorted samples, got shape {samples_sorted.shape}")
    if np.any(np.diff(samples_sorted) < 0):
        raise ShapeError("samples must be sorted ascending")
    p_lo, p_up = _percentiles(cfg.sigma, cfg.epsilon)
    upper_idx = math.ceil(p_up * n)
    if upper_idx >= n + 1:
        raise FeasibilityError(
            f"upper percentile index {upper_idx} exceeds sample count {n}; increase n_samples"
        )
    lower_idx = max(1, math.floor(p_lo * n))
    median_idx = math.ceil(n / 2)
    lower = float(samples_sorted[lower_idx - 1])
    upper = float(samples_sorted[upper_idx - 1])
    median = float(samples_sorted[median_idx - 1])
    if range_m <= 0.0:
        raise ConfigError(f"metric range must be positive, got {range_m}")
    cd_pct = 100.0 * (upper - lower) / range_m
    return CertifiedScore(
        median=median,
        lower=lower,
        upper=upper,
        cd_pct=cd_pct,
        samples_sorted=samples_sorted if keep_samples else None,
    )


def percentile_indices(cfg: SmoothingConfig):
    """1-based (lower, median, upper) order-statistic indices."""
    p_lo, p_up = _percentiles(cfg.sigma, cfg.epsilon)
    n = cfg.n_samples
    return max(1, math.floor(p_lo * n)), math.ceil(n / 2), math.ceil(p_up * n)


def noise_sample(seed: int, index: int, shape, sigma: float) -> np.ndarray:
    rng = np.random.default_rng((seed, index))
    return sigma * rng.standard_normal(shape)


def sample_scores(score_fn, x: np.ndarray, cfg: SmoothingConfig, denoiser=None,
                  chunk_size: int = 128, workers: int = 1) -> np.ndarray:
    """Ascending scores of N noised (optionally denoised) copies of x.

    ``score_fn`` maps a (B, 3, H, W) batch to a (B,) score array.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"sample_scores expects a single (3, H, W) image, got {x.shape}")
    n = cfg.n_samples
    bounds = [(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]

    def eval_chunk(bound):
        start, stop = bound
        noisy = np.empty((stop - start,) + x.shape)
        for i in range(start, stop):
            noisy[i - start] = x + noise_sample(cfg.seed, i, x.shape, cfg.sigma)
        if denoiser is not None:
            noisy = denoiser.denoise_batch(noisy)
        return np.asarray(score_fn(noisy), dtype=np.float64)

    scores = np.empty(n)
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for (start, stop), part in zip(bounds, pool.map(eval_chunk, bounds)):
                scores[start:stop] = part
    else:
        for start, stop in bounds:
            scores[start:stop] = eval_chunk((start, stop))
    return np.sort(scores)


def mean_smooth(score_fn, x: np.ndarray, cfg: SmoothingConfig, denoiser=None,
                chunk_size: int = 128, workers: int = 1) -> float:
    """Uncertified mean-smoothing baseline over the same sample set."""
    return float(np.mean(sample_scores(score_fn, x, cfg, denoiser, chunk_size, workers)))


def certified_score(metric, x: np.ndarray, cfg: SmoothingConfig, denoiser=None,
                    chunk_size: int = 128, workers: int = 1,
                    keep_samples: bool = False) -> CertifiedScore:
    """Full median-smoothing certificate of a quality metric at image x."""
    samples = sample_scores(metric.score_batch, x, cfg, denoiser, chunk_size, workers)
    return certify(samples, cfg, metric.range, keep_samples=keep_samples)


def max_ratio(n_samples: int) -> float:
    """Largest eps/sigma certifiable with n_samples samples."""
    if n_samples < 2:
        raise ConfigError(f"n_samples must be >= 2, got {n_samples}")
    return gaussian_cdf_inv((n_samples - 1) / n_samples)


def min_samples(ratio: float) -> int:
    """Smallest N with ceil(Phi(ratio) * N) < N."""
    if ratio < 0.0:
        raise ConfigError(f"ratio must be non-negative, got {ratio}")
    tail = 0.5 * math.erfc(ratio / _SQRT2)
    if tail <= 1e-15:
        raise FeasibilityError(f"eps/sigma ratio {ratio} needs more than 1e15 samples")
    candidate = max(2, int(math.ceil(1.0 / tail)))
    while candidate - 1 >= 2 and is_feasible(1.0, ratio, candidate - 1):
        candidate -= 1
    while not is_feasible(1.0, ratio, candidate):
        candidate += 1
    return candidate
