"""Training for the quality metric and the auxiliary denoiser.

The denoiser has two phases: MSE-only pretraining (the plain denoised
median smoothing baseline) and composite fine-tuning that adds a pairwise
ranking penalty and a frozen-metric score-matching penalty:

    L = MSE + c_r * RANK + c_t * TARG

One noise draw per image per step; epoch-level RNG substreams derive
from the training seed, so a seed pins the whole history. Validation
selects the returned weights: lowest val MSE in mse_only mode (metric
agnostic, one denoiser serves any metric), highest single-draw proxy
SROCC in composite mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .evaluation import srocc
from .optim import Adam
from .tensor import Tape, Tensor, backward

MODES = ("mse_only", "composite")

VAL_NOISE_STREAM = 0x56414C  # fixed substream tag for the validation draw


@dataclass(frozen=True)
class LossWeights:
    c_r: float = 1.0
    c_t: float = 1000.0

    def __post_init__(self):
        if self.c_r < 0 or self.c_t < 0:
            raise ConfigError(f"loss weights must be non-negative, got c_r={self.c_r}, c_t={self.c_t}")


@dataclass(frozen=True)
class TrainConfig:
    sigma: float
    epochs: int
    lr: float
    seed: int
    batch_size: int = 15
    mode: str = "mse_only"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or (self.mode == "composite" and self.batch_size < 2):
            raise ConfigError(
                f"batch_size {self.batch_size} too small for mode '{self.mode}' (ranking needs pairs)"
            )


def mse_loss(batch_clean: Tensor, batch_denoised: Tensor) -> Tensor:
    """Per-pixel mean squared error, normalized by 3 * N * d1 * d2."""
    return T.mse(batch_clean, batch_denoised)


def ranking_matrix(p: Tensor, t: np.ndarray) -> Tensor:
    """R[i, j] = (p_i - p_j) * sign(t_j - t_i); subjective scores t are constants."""
    t = np.asarray(t, dtype=np.float64)
    if p.data.shape != t.shape:
        raise ConfigError(f"score vectors must align, got {p.data.shape} vs {t.shape}")
    sign = np.sign(t[None, :] - t[:, None])
    return T.mul(T.pairwise_diffs(p), Tensor(sign))


def rank_loss(p: Tensor, t: np.ndarray) -> Tensor:
    """(1/N^2) * sum(max(0, R)) / (1 + max|R|); the normalizer is detached."""
    r = ranking_matrix(p, t)
    n = p.data.shape[0]
    max_abs = float(np.max(np.abs(r.data))) if n else 0.0
    return T.mul_scalar(T.tsum(T.relu(r)), 1.0 / (n * n * (1.0 + max_abs)))


def target_loss(metric, batch_clean: np.ndarray, batch_denoised: Tensor) -> Tensor:
    """(1/N) * sum (M(x_i) - M(D(x_i+r)))^2 with frozen targets M(x_i)."""
    targets = metric.score_batch(np.asarray(batch_clean, dtype=np.float64))
    preds = metric.forward(batch_denoised)
    return T.mse(preds, Tensor(targets))


def composite_loss(metric, denoiser, batch_clean: np.ndarray, mos: np.ndarray,
                   batch_noisy: np.ndarray, weights: LossWeights):
    """Full training loss; returns (total Tensor, component floats)."""
    if len(batch_clean) < 2:
        raise ConfigError("composite loss needs a batch of at least 2 images")
    denoised = denoiser.forward(Tensor(batch_noisy))
    l_mse = mse_loss(Tensor(batch_clean), denoised)
    p = metric.forward(denoised)
    l_rank = rank_loss(p, mos)
    targets = metric.score_batch(np.asarray(batch_clean, dtype=np.float64))
    l_targ = T.mse(p, Tensor(targets))
    total = T.add(l_mse, T.add(T.mul_scalar(l_rank, weights.c_r), T.mul_scalar(l_targ, weights.c_t)))
    parts = {"mse": float(l_mse.data), "rank": float(l_rank.data), "targ": float(l_targ.data)}
    return total, parts


def _merge_split(datasets, name):
    items = []
    for ds in datasets:
        items.extend(ds.split(name))
    return items


def _stack(items):
    return np.stack([it.image for it in items]), np.array([it.mos for it in items])


def _chunked_denoise(denoiser, images, chunk=16):
    out = np.empty_like(images)
    for start in range(0, len(images), chunk):
        out[start : start + chunk] = denoiser.denoise_batch(images[start : start + chunk])
    return out


def _chunked_score(metric, images, chunk=256):
    out = np.empty(len(images))
    for start in range(0, len(images), chunk):
        out[start : start + chunk] = metric.score_batch(images[start : start + chunk])
    return out


def train_denoiser(denoiser, metric, datasets, cfg: TrainConfig,
                   weights: LossWeights | None = None):
    """Train (or fine-tune) the denoiser in place; returns history rows.

    ``metric`` may be None in mse_only mode. Keeps the epoch snapshot
    best on validation: val MSE for mse_only, proxy SROCC for composite.
    """
    weights = weights or LossWeights()
    if cfg.mode == "composite" and metric is None:
        raise ConfigError("composite mode requires a quality metric")
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    train_items = _merge_split(datasets, "train")
    val_items = _merge_split(datasets, "val")
    if not train_items:
        raise ConfigError("training split is empty")
    if not val_items:
        raise ConfigError("validation split is empty")

    train_x, train_mos = _stack(train_items)
    val_x, val_mos = _stack(val_items)
    val_rng = np.random.default_rng((cfg.seed, VAL_NOISE_STREAM))
    val_noisy = val_x + cfg.sigma * val_rng.standard_normal(val_x.shape)

    denoiser.set_trainable(True)
    if metric is not None:
        metric.set_trainable(False)
    opt = Adam(denoiser.params(), lr=cfg.lr)
    history = []
    best_key = None
    best_state = None
    n_train = len(train_items)

    for epoch in range(cfg.epochs):
        perm = np.random.default_rng((cfg.seed, epoch)).permutation(n_train)
        sums = {"mse": 0.0, "rank": 0.0, "targ": 0.0, "total": 0.0}
        n_batches = 0
        for bi, start in enumerate(range(0, n_train - cfg.batch_size + 1, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            clean = train_x[idx]
            mos = train_mos[idx]
            noise_rng = np.random.default_rng((cfg.seed, epoch, bi))
            noisy = clean + cfg.sigma * noise_rng.standard_normal(clean.shape)
            opt.zero_grad()
            with Tape():
                if cfg.mode == "composite":
                    total, parts = composite_loss(metric, denoiser, clean, mos, noisy, weights)
                else:
                    total = mse_loss(Tensor(clean), denoiser.forward(Tensor(noisy)))
                    parts = {"mse": float(total.data), "rank": float("nan"), "targ": float("nan")}
            backward(total)
            opt.step()
            for key, val in parts.items():
                if not np.isnan(val):
                    sums[key] += val
            sums["total"] += float(total.data)
            n_batches += 1
        if n_batches == 0:
            raise ConfigError(
                f"batch_size {cfg.batch_size} exceeds training split size {n_train}"
            )

        val_denoised = _chunked_denoise(denoiser, val_noisy)
        val_mse = float(np.mean((val_denoised - val_x) ** 2))
        if metric is not None:
            val_srocc = srocc(_chunked_score(metric, val_denoised), val_mos)
        else:
            val_srocc = float("nan")
        row = {
            "epoch": epoch,
            "mse": sums["mse"] / n_batches,
            "rank": sums["rank"] / n_batches if cfg.mode == "composite" else float("nan"),
            "targ": sums["targ"] / n_batches if cfg.mode == "composite" else float("nan"),
            "total": sums["total"] / n_batches,
            "val_srocc": val_srocc,
        }
        history.append(row)
        key = val_srocc if cfg.mode == "composite" else -val_mse
        if best_key is None or key > best_key:
            best_key = key
            best_state = denoiser.state_arrays()

    if best_state is not None:
        denoiser.load_state_arrays(best_state)
    denoiser.set_trainable(False)
    return history


def train_metric(metric, datasets, epochs: int, lr: float = 1e-3, batch_size: int = 32,
                 seed: int = 0):
    """Fit the quality metric to (degraded image, MOS) pairs; returns history."""
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    train_items = _merge_split(datasets, "train")
    val_items = _merge_split(datasets, "val")
    if not train_items or not val_items:
        raise ConfigError("train and validation splits must be non-empty")
    train_x, train_mos = _stack(train_items)
    val_x, val_mos = _stack(val_items)

    metric.set_trainable(True)
    opt = Adam(metric.params(), lr=lr)
    history = []
    best_key = None
    best_state = None
    n_train = len(train_items)
    for epoch in range(epochs):
        perm = np.random.default_rng((seed, epoch)).permutation(n_train)
        total = 0.0
        n_batches = 0
        for start in range(0, n_train - batch_size + 1, batch_size):
            idx = perm[start : start + batch_size]
            opt.zero_grad()
            with Tape():
                loss = T.mse(metric.forward(Tensor(train_x[idx])), Tensor(train_mos[idx]))
            backward(loss)
            opt.step()
            total += float(loss.data)
            n_batches += 1
        if n_batches == 0:
            raise ConfigError(f"batch_size {batch_size} exceeds training split size {n_train}")
        val_srocc = srocc(_chunked_score(metric, val_x), val_mos)
        history.append({"epoch": epoch, "mse": total / n_batches, "val_srocc": val_srocc})
        if best_key is None or val_srocc > best_key:
            best_key = val_srocc
            best_state = [p.data.copy() for p in metric.params()]
    if best_state is not None:
        for p, a in zip(metric.params(), best_state):
            p.data = a.copy()
    metric.set_trainable(False)
    return history
