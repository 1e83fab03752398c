"""Shared test hooks."""

import numpy as np

from ctiq import tensor as T
from ctiq.tensor import Tensor


class LinearMetric:
    """Linear scoring model M(x) = w . x with a declared range.

    Analytic test hook: optimal L2-bounded attack gain and the Gaussian
    propagation of smoothing noise both have closed forms.
    """

    def __init__(self, w: np.ndarray, score_range: float = 100.0):
        self.w_flat = np.asarray(w, dtype=np.float64).reshape(-1)
        self.w = Tensor(self.w_flat[:, None])
        self.b = Tensor(np.zeros(1))
        self.range = score_range

    def params(self):
        return [self.w, self.b]

    def set_trainable(self, flag):
        for p in self.params():
            p.requires_grad = flag

    def forward(self, x: Tensor) -> Tensor:
        n = x.data.shape[0]
        flat = T.reshape(x, (n, self.w_flat.size))
        return T.reshape(T.linear(flat, self.w, self.b), (n,))

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        return images.reshape(len(images), -1) @ self.w_flat

    def score(self, image: np.ndarray) -> float:
        return float(image.reshape(-1) @ self.w_flat)


def linear_score_fn(w: np.ndarray):
    w_flat = np.asarray(w, dtype=np.float64).reshape(-1)

    def fn(batch: np.ndarray) -> np.ndarray:
        return batch.reshape(len(batch), -1) @ w_flat

    return fn
