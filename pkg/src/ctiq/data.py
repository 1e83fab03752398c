"""Reproducible synthetic image-quality benchmark.

Clean images are band-limited sinusoid textures; each gets exactly one
degradation (additive Gaussian noise, box blur, or contrast crush) at a
uniform severity s, and the ground-truth MOS is 100 * (1 - s). Every
item derives its own RNG substream from (dataset seed, index), so
generation order and worker count cannot change the result.
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataFormatError, ShapeError

MAGIC = b"CTDS1"

KIND_NOISE = "noise"
KIND_BLUR = "blur"
KIND_CONTRAST = "contrast"
KIND_NONE = "none"

_KIND_TO_BYTE = {KIND_NOISE: 0, KIND_BLUR: 1, KIND_CONTRAST: 2, KIND_NONE: 255}
_BYTE_TO_KIND = {v: k for k, v in _KIND_TO_BYTE.items()}

NOISE_AMPLITUDE = 0.35
BLUR_MAX_RADIUS = 4


@dataclass
class LabeledImage:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    mos: float
    kind: str
    severity: float
    seed: int


@dataclass
class Dataset:
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def _split_sizes(self):
        n = len(self.items)
        n_val = int(round(n / 10))
        n_test = int(round(n / 10))
        return n - n_val - n_test, n_val, n_test

    def split_of(self, index: int) -> str:
        n_train, n_val, _ = self._split_sizes()
        if index < n_train:
            return "train"
        if index < n_train + n_val:
            return "val"
        return "test"

    def split(self, name: str) -> list:
        n_train, n_val, n_test = self._split_sizes()
        if name == "train":
            return self.items[:n_train]
        if name == "val":
            return self.items[n_train : n_train + n_val]
        if name == "test":
            return self.items[n_train + n_val :]
        if name == "all":
            return list(self.items)
        raise ConfigError(f"unknown split '{name}' (use train/val/test/all)")

    def images(self, split_name: str = "all") -> np.ndarray:
        return np.stack([it.image for it in self.split(split_name)])

    def mos_values(self, split_name: str = "all") -> np.ndarray:
        return np.array([it.mos for it in self.split(split_name)])


def make_base_image(rng, height: int, width: int) -> np.ndarray:
    """Band-limited random texture: <= 8 sinusoids per channel, in [0.1, 0.9]."""
    ys = np.arange(height)[:, None] / height
    xs = np.arange(width)[None, :] / width
    chans = []
    for _ in range(3):
        n_waves = int(rng.integers(1, 9))
        acc = np.zeros((height, width))
        for _ in range(n_waves):
            fx = rng.uniform(-4.0, 4.0)
            fy = rng.uniform(-4.0, 4.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.3, 1.0)
            acc += amp * np.sin(2.0 * np.pi * (fx * xs + fy * ys) + phase)
        lo, hi = acc.min(), acc.max()
        if hi - lo < 1e-12:
            chans.append(np.full((height, width), 0.5))
        else:
            chans.append(0.1 + 0.8 * (acc - lo) / (hi - lo))
    return np.stack(chans)


def _box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return image.copy()
    k = 2 * radius + 1
    padded = np.pad(image, ((0, 0), (radius, radius), (radius, radius)), mode="reflect")
    blurred = sliding_window_view(padded, k, axis=1).mean(axis=-1)
    blurred = sliding_window_view(blurred, k, axis=2).mean(axis=-1)
    return blurred


def apply_degradation(image: np.ndarray, kind: str, severity: float, rng) -> np.ndarray:
    """One degradation at severity in [0, 1]; output clipped into [0, 1]."""
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"severity must be in [0, 1], got {severity}")
    if kind == KIND_NOISE:
        out = image + NOISE_AMPLITUDE * severity * rng.standard_normal(image.shape)
    elif kind == KIND_BLUR:
        out = _box_blur(image, int(round(BLUR_MAX_RADIUS * severity)))
    elif kind == KIND_CONTRAST:
        # equivalent to 0.5 + (1-s)*(image-0.5) but exact at severity 0
        out = image + severity * (0.5 - image)
    elif kind == KIND_NONE:
        out = image.copy()
    else:
        raise ConfigError(f"unknown degradation kind '{kind}'")
    return np.clip(out, 0.0, 1.0)


def _make_item(dataset_seed: int, index: int, height: int, width: int, mos_noise: float) -> LabeledImage:
    rng = np.random.default_rng((dataset_seed, index))
    base = make_base_image(rng, height, width)
    kind = (KIND_NOISE, KIND_BLUR, KIND_CONTRAST)[int(rng.integers(0, 3))]
    severity = float(rng.uniform())
    degraded = apply_degradation(base, kind, severity, rng)
    mos = 100.0 * (1.0 - severity)
    if mos_noise > 0.0:
        mos = float(np.clip(mos + mos_noise * rng.standard_normal(), 0.0, 100.0))
    return LabeledImage(image=degraded, mos=mos, kind=kind, severity=severity, seed=index)


def generate(count: int, height: int, width: int, seed: int, mos_noise: float = 0.0,
             workers: int = 1) -> Dataset:
    if count < 10:
        raise ConfigError(f"count must be >= 10, got {count}")
    if height % 8 or width % 8:
        raise ShapeError(f"image extents must be multiples of 8, got {height}x{width}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            items = list(
                pool.map(lambda i: _make_item(seed, i, height, width, mos_noise), range(count))
            )
    else:
        items = [_make_item(seed, i, height, width, mos_noise) for i in range(count)]
    return Dataset(items=items)


def concat_datasets(datasets) -> Dataset:
    merged = []
    for ds in datasets:
        merged.extend(ds.items)
    return Dataset(items=merged)


def save_dataset(dataset: Dataset, path) -> None:
    chunks = [struct.pack("<I", len(dataset.items))]
    for it in dataset.items:
        img = np.ascontiguousarray(it.image, dtype=np.float64)
        if img.ndim != 3:
            raise ShapeError(f"dataset images must be (C, H, W), got {img.shape}")
        chunks.append(struct.pack("<dBdQ", it.mos, _KIND_TO_BYTE[it.kind], it.severity, it.seed))
        chunks.append(struct.pack("<B", img.ndim))
        chunks.append(struct.pack(f"<{img.ndim}I", *img.shape))
        chunks.append(img.astype("<f8").tobytes())
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: missing CTDS1 magic")
    payload, crc_bytes = raw[len(MAGIC) : -4], raw[-4:]
    (expected_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != expected_crc:
        raise DataFormatError(f"{path}: CRC-32 mismatch, file is corrupt or truncated")

    offset = 0

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(payload):
            raise DataFormatError(f"{path}: truncated payload at byte {offset}")
        vals = struct.unpack_from(fmt, payload, offset)
        offset += size
        return vals

    (count,) = take("<I")
    items = []
    for idx in range(count):
        mos, kind_byte, severity, seed = take("<dBdQ")
        if kind_byte not in _BYTE_TO_KIND:
            raise DataFormatError(f"{path}: item {idx} has unknown degradation byte {kind_byte}")
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        n_px = int(np.prod(shape))
        if offset + 8 * n_px > len(payload):
            raise DataFormatError(f"{path}: item {idx} pixel block extends past end of payload")
        img = np.frombuffer(payload, dtype="<f8", count=n_px, offset=offset).reshape(shape).copy()
        offset += 8 * n_px
        items.append(
            LabeledImage(image=img, mos=mos, kind=_BYTE_TO_KIND[kind_byte],
                         severity=severity, seed=seed)
        )
    if offset != len(payload):
        raise DataFormatError(f"{path}: {len(payload) - offset} unexpected trailing payload bytes")
    return Dataset(items=items)
