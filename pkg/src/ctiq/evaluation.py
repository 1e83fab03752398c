"""Correlation metrics, defense-quality deltas, rank-error certificates,
and the MS / DMS / DMS-IQA comparison pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateDataError
from .smoothing import SmoothingConfig, certified_score

PRESETS = {"weak": (0.12, 0.06), "strong": (0.18, 0.36)}

METHODS = ("no_defence", "ms", "dms", "dms_iqa")


def ranks(values: np.ndarray) -> np.ndarray:
    """Fractional (average) ranks, 1-based; ties share the mean rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    out = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        out[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return out


def plcc(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; raises on degenerate (constant) input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError(f"correlation needs aligned vectors, got {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise ConfigError(f"correlation needs at least 3 points, got {len(x)}")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(np.dot(xc, xc))
    vy = float(np.dot(yc, yc))
    if vx == 0.0 or vy == 0.0:
        raise DegenerateDataError("correlation undefined: zero variance input")
    return float(np.clip(np.dot(xc, yc) / np.sqrt(vx * vy), -1.0, 1.0))


def srocc(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation = Pearson on average ranks."""
    return plcc(ranks(x), ranks(y))


def tau_closeness(metric_scores, defended_scores, mos):
    """Absolute correlation drops (tau_srocc, tau_plcc) caused by a defense."""
    t_s = abs(srocc(metric_scores, mos) - srocc(defended_scores, mos))
    t_p = abs(plcc(metric_scores, mos) - plcc(defended_scores, mos))
    return t_s, t_p


@dataclass(frozen=True)
class RankErrorCertificate:
    delta_inf: float
    t_bound: int
    observed_errors: int
    m: int


def rank_error_certificate(a, b) -> RankErrorCertificate:
    """Bound on defended-vs-undefended ranking errors from score deviation.

    delta_inf = max_i |a_i - b_i|; t_bound counts unordered pairs whose
    undefended score gap is <= delta_inf; observed_errors counts actual
    discordant pairs by brute force.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ConfigError(f"need two aligned vectors of length >= 2, got {a.shape} vs {b.shape}")
    m = len(a)
    delta_inf = float(np.max(np.abs(a - b)))
    iu = np.triu_indices(m, k=1)
    gaps = np.abs(b[:, None] - b[None, :])[iu]
    t_bound = int(np.sum(gaps <= delta_inf))
    ra, rb = ranks(a), ranks(b)
    observed = int(np.sum(((ra[:, None] - ra[None, :]) * (rb[:, None] - rb[None, :]))[iu] < 0))
    return RankErrorCertificate(delta_inf=delta_inf, t_bound=t_bound,
                                observed_errors=observed, m=m)


def preset_config(name: str, n_samples: int, seed: int) -> SmoothingConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (expected one of {sorted(PRESETS)})")
    sigma, epsilon = PRESETS[name]
    return SmoothingConfig(sigma=sigma, epsilon=epsilon, n_samples=n_samples, seed=seed)


def compare_methods(metric, denoisers: dict, items, presets, n_samples: int, seed: int,
                    chunk_size: int = 16, workers: int = 1):
    """Table rows for {no_defence, ms, dms, dms_iqa} x presets on a split.

    ``denoisers`` maps 'dms' and 'dms_iqa' to trained denoiser models.
    Returns (rows, per_image_records).
    """
    for key in ("dms", "dms_iqa"):
        if key not in denoisers or denoisers[key] is None:
            raise ConfigError(f"compare_methods needs a '{key}' denoiser")
    if not items:
        raise ConfigError("empty evaluation split")
    images = np.stack([it.image for it in items])
    mos = np.array([it.mos for it in items])
    undefended = metric.score_batch(images)

    rows = []
    records = []
    for preset in presets:
        cfg = preset_config(preset, n_samples, seed)
        for method in METHODS:
            if method == "no_defence":
                defended = undefended.copy()
                cds = np.full(len(items), np.inf)
                for i, score in enumerate(defended):
                    records.append({
                        "image_id": i, "method": method, "preset": preset,
                        "median": float(score), "lower": float("-inf"),
                        "upper": float("inf"), "cd_pct": float("inf"),
                    })
            else:
                denoiser = None if method == "ms" else denoisers[method]
                defended = np.empty(len(items))
                cds = np.empty(len(items))
                for i in range(len(items)):
                    cert = certified_score(metric, images[i], cfg, denoiser,
                                           chunk_size=chunk_size, workers=workers)
                    defended[i] = cert.median
                    cds[i] = cert.cd_pct
                    records.append({
                        "image_id": i, "method": method, "preset": preset,
                        "median": cert.median, "lower": cert.lower,
                        "upper": cert.upper, "cd_pct": cert.cd_pct,
                    })
            t_s, t_p = tau_closeness(undefended, defended, mos)
            rows.append({
                "method": method,
                "preset": preset,
                "sigma": cfg.sigma,
                "epsilon": cfg.epsilon,
                "srocc": srocc(defended, mos),
                "plcc": plcc(defended, mos),
                "tau_srocc": t_s,
                "tau_plcc": t_p,
                "mean_cd_pct": float(np.mean(cds)),
            })
    return rows, records


def sweep_eps_sigma(metric, denoiser, items, sigmas, epsilons, n_samples: int, seed: int,
                    chunk_size: int = 16, workers: int = 1):
    """Correlation / certified-delta grid over (sigma, epsilon) pairs.

    Infeasible cells are reported with NaN values. One denoiser (or none)
    is applied across the whole grid.
    """
    if not items:
        raise ConfigError("empty evaluation split")
    images = np.stack([it.image for it in items])
    mos = np.array([it.mos for it in items])
    undefended = metric.score_batch(images)
    rows = []
    for sigma in sigmas:
        for epsilon in epsilons:
            try:
                cfg = SmoothingConfig(sigma=sigma, epsilon=epsilon, n_samples=n_samples, seed=seed)
            except Exception:
                rows.append({"sigma": sigma, "epsilon": epsilon, "tau_srocc": float("nan"),
                             "tau_plcc": float("nan"), "mean_cd_pct": float("nan")})
                continue
            defended = np.empty(len(items))
            cds = np.empty(len(items))
            for i in range(len(items)):
                cert = certified_score(metric, images[i], cfg, denoiser,
                                       chunk_size=chunk_size, workers=workers)
                defended[i] = cert.median
                cds[i] = cert.cd_pct
            t_s, t_p = tau_closeness(undefended, defended, mos)
            rows.append({"sigma": sigma, "epsilon": epsilon, "tau_srocc": t_s,
                         "tau_plcc": t_p, "mean_cd_pct": float(np.mean(cds))})
    return rows
