"""Binary weight container ("CTIQ1").

Layout: magic, little-endian u32 header length, JSON header holding the
model kind, architecture hyperparameters and a tensor manifest
(name / dtype / shape), then raw little-endian float64 payloads in
manifest order. The loader cross-checks the total byte length and names
the first manifest entry that cannot be satisfied.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"CTIQ1"


def save_weights(path, kind: str, meta: dict, tensors: dict) -> None:
    """Write named float64 arrays with a manifest header."""
    manifest = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        manifest.append({"name": name, "dtype": "f64", "shape": list(arr.shape)})
        payloads.append(arr.astype("<f8").tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "tensors": manifest}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_weights(path):
    """Read a container; returns (kind, meta, {name: float64 array})."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read weight container {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: missing CTIQ1 magic")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_start = len(MAGIC) + 4
    if header_start + header_len > len(raw):
        raise DataFormatError(f"{path}: truncated header (declared {header_len} bytes)")
    try:
        header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: unparseable header: {exc}") from exc
    for key in ("kind", "meta", "tensors"):
        if key not in header:
            raise DataFormatError(f"{path}: header missing '{key}'")

    tensors = {}
    offset = header_start + header_len
    for entry in header["tensors"]:
        name = entry.get("name", "<unnamed>")
        if entry.get("dtype") != "f64":
            raise DataFormatError(f"{path}: entry '{name}' has unsupported dtype {entry.get('dtype')}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        if offset + nbytes > len(raw):
            raise DataFormatError(f"{path}: entry '{name}' extends past end of file")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(
            shape
        ).copy()
        offset += nbytes
    if offset != len(raw):
        raise DataFormatError(
            f"{path}: {len(raw) - offset} trailing bytes after final manifest entry"
        )
    return header["kind"], header["meta"], tensors
