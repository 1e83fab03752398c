"""Weight container round-trips and corruption handling."""

import numpy as np
import pytest

from ctiq.container import load_weights, save_weights
from ctiq.errors import DataFormatError


@pytest.fixture
def sample(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.random((3, 4)), "a.b": rng.random(4), "z": rng.random(())}
    path = tmp_path / "m.ctiq"
    save_weights(path, "quality", {"channels": [1, 2]}, tensors)
    return path, tensors


def test_roundtrip_bit_exact(sample):
    path, tensors = sample
    kind, meta, loaded = load_weights(path)
    assert kind == "quality"
    assert meta == {"channels": [1, 2]}
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], arr)
        assert loaded[name].dtype == np.float64


def test_missing_magic(tmp_path):
    path = tmp_path / "bad.ctiq"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(DataFormatError, match="magic"):
        load_weights(path)


def test_truncated_payload_names_entry(sample):
    path, _ = sample
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])  # cut into the final tensor's payload
    with pytest.raises(DataFormatError, match="'z'"):
        load_weights(path)


def test_trailing_garbage_rejected(sample):
    path, _ = sample
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(DataFormatError, match="trailing"):
        load_weights(path)


def test_corrupt_header(sample):
    path, _ = sample
    raw = bytearray(path.read_bytes())
    raw[9] ^= 0xFF  # flip a byte inside the JSON header
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError):
        load_weights(path)
