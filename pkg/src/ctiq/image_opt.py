"""Image denoising by direct pixel optimization of a (smoothed) metric.

Minimizes  1 - qw * Q(y) / 100 + MSE(y, x_noisy) / 1000  over pixels y,
starting from the noisy image. For smoothed backends the gradient of Q
is the mean of per-sample gradients of M(D(y + r_i)) over the step's N
noise draws (the usual smoothing surrogate; the sorted-sample median
itself has no useful gradient), while the LOGGED quality value stays
the median. The clean image is used only to report RMSE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, CtiqError
from .optim import Adam
from .tensor import Tape, Tensor, backward

BACKENDS = ("undefended", "ms", "dms", "dms_iqa")

QUALITY_SCALE = 100.0
ANCHOR_SCALE = 1000.0
PIXEL_GUARD = (-0.5, 1.5)


@dataclass(frozen=True)
class OptConfig:
    sigma: float
    steps: int = 1000
    lr: float = 1e-5
    n_samples: int = 100
    backend: str = "dms_iqa"
    seed: int = 0
    quality_weight: float = 1.0
    log_every: int = 50
    chunk_size: int = 20

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got '{self.backend}'")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.steps < 0 or self.n_samples < 1 or self.lr <= 0:
            raise ConfigError("steps must be >= 0, n_samples >= 1, lr > 0")


def _step_noise(cfg: OptConfig, step: int, shape) -> np.ndarray:
    rng = np.random.default_rng((cfg.seed, step))
    return cfg.sigma * rng.standard_normal((cfg.n_samples,) + shape)


def optimize_image(x_noisy: np.ndarray, x_clean: np.ndarray, metric, denoiser,
                   cfg: OptConfig):
    """Returns (final image clipped to [0, 1], trajectory rows).

    Trajectory rows log the pre-update iterate at step 0 and every
    ``log_every`` steps; the last row is the clipped final image.
    """
    x_noisy = np.asarray(x_noisy, dtype=np.float64)
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if x_noisy.shape != x_clean.shape or x_noisy.ndim != 3:
        raise ConfigError(
            f"noisy/clean images must be aligned (3, H, W), got {x_noisy.shape} vs {x_clean.shape}"
        )
    if cfg.backend in ("dms", "dms_iqa") and denoiser is None:
        raise ConfigError(f"backend '{cfg.backend}' requires a denoiser")
    metric.set_trainable(False)
    if denoiser is not None:
        denoiser.set_trainable(False)

    y = Tensor(x_noisy[None].copy(), requires_grad=True)
    anchor_const = Tensor(x_noisy[None])
    opt = Adam([y], lr=cfg.lr)
    qw = cfg.quality_weight

    def quality_and_grad(step: int):
        """Accumulates d(loss)/dy into y.grad; returns (q_logged, loss_value)."""
        with Tape():
            anchor = T.mul_scalar(T.mse(y, anchor_const), 1.0 / ANCHOR_SCALE)
        anchor_val = float(anchor.data)
        backward(anchor)
        if cfg.backend == "undefended":
            with Tape():
                q = T.tsum(metric.forward(y))
                contrib = T.mul_scalar(q, -qw / QUALITY_SCALE)
            q_logged = float(q.data)
            backward(contrib)
        else:
            noise = _step_noise(cfg, step, x_noisy.shape)
            scores = np.empty(cfg.n_samples)
            for start in range(0, cfg.n_samples, cfg.chunk_size):
                stop = min(start + cfg.chunk_size, cfg.n_samples)
                with Tape():
                    z = T.add(T.tile_batch(y, stop - start), Tensor(noise[start:stop]))
                    if cfg.backend in ("dms", "dms_iqa"):
                        z = denoiser.forward(z)
                    s = metric.forward(z)
                    contrib = T.mul_scalar(T.tsum(s), -qw / (QUALITY_SCALE * cfg.n_samples))
                scores[start:stop] = s.data
                backward(contrib)
            q_logged = float(np.median(scores))
        return q_logged, 1.0 - qw * q_logged / QUALITY_SCALE + anchor_val

    def raw_rmse() -> float:
        return float(np.sqrt(np.mean((y.data[0] - x_clean) ** 2)))

    trajectory = []
    q_last = loss_last = None
    for step in range(cfg.steps):
        opt.zero_grad()
        q_last, loss_last = quality_and_grad(step)
        if step % cfg.log_every == 0:
            lo, hi = PIXEL_GUARD
            if y.data.min() < lo or y.data.max() > hi:
                raise CtiqError(
                    f"pixel drift outside {PIXEL_GUARD} at step {step}; lr too aggressive"
                )
            trajectory.append({
                "step": step, "loss": loss_last, "q_value": q_last, "rmse_vs_clean": raw_rmse(),
            })
        opt.step()

    if q_last is None:  # steps == 0: still report the starting point
        q_last, loss_last = quality_and_grad(0)
    final = np.clip(y.data[0], 0.0, 1.0)
    trajectory.append({
        "step": cfg.steps, "loss": loss_last, "q_value": q_last,
        "rmse_vs_clean": float(np.sqrt(np.mean((final - x_clean) ** 2))),
    })
    return final, trajectory
