"""The toy NR-IQA metric and the U-Net denoiser.

Both are small enough to train from scratch on a synthetic benchmark in
minutes while exercising the full certification pipeline. Parameters are
float64 tensors; freshly built models are frozen (``requires_grad``
False) and trainers flip them on via ``set_trainable``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .container import load_weights, save_weights
from .errors import DataFormatError, ShapeError
from .tensor import Tensor

QUALITY_CHANNELS = (8, 16, 32)
DENOISER_CHANNELS = (16, 32, 64)


def _he_conv(rng, c_out, c_in, k):
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.standard_normal((c_out, c_in, k, k)) * std


def _conv_params(rng, c_out, c_in, k=3):
    return Tensor(_he_conv(rng, c_out, c_in, k)), Tensor(np.zeros(c_out))


class QualityModel:
    """Scalar image-quality scorer with a bounded output range.

    Three conv/relu/pool stages, global average pooling, one linear head
    and an affine sigmoid squash into ``score_range``. Spatial extents
    must be multiples of 8 (three pooling stages).
    """

    kind = "quality"

    def __init__(self, seed: int = 0, score_range=(0.0, 100.0)):
        lo, hi = float(score_range[0]), float(score_range[1])
        if hi <= lo:
            raise ShapeError(f"score range must have positive width, got ({lo}, {hi})")
        self.score_range = (lo, hi)
        rng = np.random.default_rng(seed)
        c1, c2, c3 = QUALITY_CHANNELS
        self.conv1_w, self.conv1_b = _conv_params(rng, c1, 3)
        self.conv2_w, self.conv2_b = _conv_params(rng, c2, c1)
        self.conv3_w, self.conv3_b = _conv_params(rng, c3, c2)
        std = np.sqrt(2.0 / c3)
        self.fc_w = Tensor(rng.standard_normal((c3, 1)) * std)
        self.fc_b = Tensor(np.zeros(1))

    @property
    def range(self) -> float:
        return self.score_range[1] - self.score_range[0]

    def params(self) -> list[Tensor]:
        return [
            self.conv1_w, self.conv1_b,
            self.conv2_w, self.conv2_b,
            self.conv3_w, self.conv3_b,
            self.fc_w, self.fc_b,
        ]

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.requires_grad = flag

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def _check_input(self, shape):
        if len(shape) != 4 or shape[1] != 3:
            raise ShapeError(f"metric expects (batch, 3, H, W), got {shape}")
        if shape[2] % 8 or shape[3] % 8:
            raise ShapeError(f"metric needs spatial extents divisible by 8, got {shape[2]}x{shape[3]}")

    def forward(self, x: Tensor) -> Tensor:
        """(N, 3, H, W) -> (N,) scores inside score_range."""
        self._check_input(x.data.shape)
        h = T.avg_pool2d(T.relu(T.conv2d(x, self.conv1_w, self.conv1_b, padding=1)))
        h = T.avg_pool2d(T.relu(T.conv2d(h, self.conv2_w, self.conv2_b, padding=1)))
        h = T.avg_pool2d(T.relu(T.conv2d(h, self.conv3_w, self.conv3_b, padding=1)))
        h = T.global_avg_pool(h)
        z = T.linear(h, self.fc_w, self.fc_b)
        lo, hi = self.score_range
        squashed = T.add_scalar(T.mul_scalar(T.sigmoid(z), hi - lo), lo)
        return T.reshape(squashed, (x.data.shape[0],))

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        """Pure inference on a (N, 3, H, W) array; no tape involvement."""
        return self.forward(Tensor(images)).data

    def score(self, image: np.ndarray) -> float:
        if image.ndim != 3:
            raise ShapeError(f"score expects a single (3, H, W) image, got {image.shape}")
        return float(self.score_batch(image[None])[0])

    def save(self, path):
        save_weights(
            path,
            self.kind,
            {"channels": list(QUALITY_CHANNELS), "score_range": list(self.score_range)},
            {
                "conv1.w": self.conv1_w.data, "conv1.b": self.conv1_b.data,
                "conv2.w": self.conv2_w.data, "conv2.b": self.conv2_b.data,
                "conv3.w": self.conv3_w.data, "conv3.b": self.conv3_b.data,
                "fc.w": self.fc_w.data, "fc.b": self.fc_b.data,
            },
        )

    @classmethod
    def load(cls, path) -> "QualityModel":
        kind, meta, tensors = load_weights(path)
        if kind != cls.kind:
            raise DataFormatError(f"{path}: expected kind '{cls.kind}', found '{kind}'")
        if tuple(meta.get("channels", ())) != QUALITY_CHANNELS:
            raise DataFormatError(f"{path}: channel plan {meta.get('channels')} does not match build")
        model = cls(seed=0, score_range=tuple(meta["score_range"]))
        _assign(model, path, tensors, {
            "conv1.w": model.conv1_w, "conv1.b": model.conv1_b,
            "conv2.w": model.conv2_w, "conv2.b": model.conv2_b,
            "conv3.w": model.conv3_w, "conv3.b": model.conv3_b,
            "fc.w": model.fc_w, "fc.b": model.fc_b,
        })
        return model


class DenoiserModel:
    """7-conv U-Net mapping a noisy image to a [0, 1] clean estimate.

    Two downsampling stages (after e1, e2) and two nearest-neighbour
    upsampling stages with skip concatenation from e2 and e1, a full
    resolution refinement conv, and a 3-channel output conv under a
    clamp. Spatial extents must be multiples of 4.
    """

    kind = "denoiser"

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = DENOISER_CHANNELS
        self.e1_w, self.e1_b = _conv_params(rng, c1, 3)
        self.e2_w, self.e2_b = _conv_params(rng, c2, c1)
        self.e3_w, self.e3_b = _conv_params(rng, c3, c2)
        self.d1_w, self.d1_b = _conv_params(rng, c2, c3 + c2)
        self.d2_w, self.d2_b = _conv_params(rng, c1, c2 + c1)
        self.d3_w, self.d3_b = _conv_params(rng, c1, c1)
        self.out_w, self.out_b = _conv_params(rng, 3, c1)

    _tensor_names = ("e1", "e2", "e3", "d1", "d2", "d3", "out")

    def params(self) -> list[Tensor]:
        out = []
        for name in self._tensor_names:
            out.append(getattr(self, f"{name}_w"))
            out.append(getattr(self, f"{name}_b"))
        return out

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.requires_grad = flag

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def _check_input(self, shape):
        if len(shape) != 4 or shape[1] != 3:
            raise ShapeError(f"denoiser expects (batch, 3, H, W), got {shape}")
        if shape[2] % 4 or shape[3] % 4:
            raise ShapeError(
                f"denoiser needs spatial extents divisible by 4, got {shape[2]}x{shape[3]}"
            )

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x.data.shape)
        a1 = T.relu(T.conv2d(x, self.e1_w, self.e1_b, padding=1))
        a2 = T.relu(T.conv2d(T.avg_pool2d(a1), self.e2_w, self.e2_b, padding=1))
        a3 = T.relu(T.conv2d(T.avg_pool2d(a2), self.e3_w, self.e3_b, padding=1))
        u1 = T.concat_channels(T.nearest_upsample2d(a3), a2)
        a4 = T.relu(T.conv2d(u1, self.d1_w, self.d1_b, padding=1))
        u2 = T.concat_channels(T.nearest_upsample2d(a4), a1)
        a5 = T.relu(T.conv2d(u2, self.d2_w, self.d2_b, padding=1))
        a6 = T.relu(T.conv2d(a5, self.d3_w, self.d3_b, padding=1))
        return T.clamp01(T.conv2d(a6, self.out_w, self.out_b, padding=1))

    def denoise_batch(self, images: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(images)).data

    def denoise(self, image: np.ndarray) -> np.ndarray:
        if image.ndim != 3:
            raise ShapeError(f"denoise expects a single (3, H, W) image, got {image.shape}")
        return self.denoise_batch(image[None])[0]

    def save(self, path):
        tensors = {}
        for name in self._tensor_names:
            tensors[f"{name}.w"] = getattr(self, f"{name}_w").data
            tensors[f"{name}.b"] = getattr(self, f"{name}_b").data
        save_weights(path, self.kind, {"channels": list(DENOISER_CHANNELS)}, tensors)

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        kind, meta, tensors = load_weights(path)
        if kind != cls.kind:
            raise DataFormatError(f"{path}: expected kind '{cls.kind}', found '{kind}'")
        if tuple(meta.get("channels", ())) != DENOISER_CHANNELS:
            raise DataFormatError(f"{path}: channel plan {meta.get('channels')} does not match build")
        model = cls(seed=0)
        targets = {}
        for name in cls._tensor_names:
            targets[f"{name}.w"] = getattr(model, f"{name}_w")
            targets[f"{name}.b"] = getattr(model, f"{name}_b")
        _assign(model, path, tensors, targets)
        return model

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params()]

    def load_state_arrays(self, arrays):
        for p, a in zip(self.params(), arrays):
            if p.data.shape != a.shape:
                raise ShapeError(f"state array shape {a.shape} does not match {p.data.shape}")
            p.data = a.copy()


def _assign(model, path, tensors, targets):
    for name, param in targets.items():
        if name not in tensors:
            raise DataFormatError(f"{path}: manifest missing entry '{name}'")
        arr = tensors[name]
        if arr.shape != param.data.shape:
            raise DataFormatError(
                f"{path}: entry '{name}' has shape {arr.shape}, expected {param.data.shape}"
            )
        param.data = arr
    extra = set(tensors) - set(targets)
    if extra:
        raise DataFormatError(f"{path}: unexpected manifest entries {sorted(extra)}")


def load_any(path):
    kind, _, _ = load_weights(path)
    if kind == QualityModel.kind:
        return QualityModel.load(path)
    if kind == DenoiserModel.kind:
        return DenoiserModel.load(path)
    raise DataFormatError(f"{path}: unknown model kind '{kind}'")
