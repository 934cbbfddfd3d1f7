"""Round-trip and corruption tests for the named-tensor container."""

import numpy as np
import pytest

from multibn.container import (
    ContainerError,
    IntegrityError,
    PrecisionMismatch,
    load_tensors,
    save_tensors,
)


def sample_tensors(dtype=np.float32):
    rng = np.random.default_rng(3)
    return {
        "conv/0/weight": rng.standard_normal((4, 3, 3, 3, 3)).astype(dtype),
        "bn/0/branch1/gamma": rng.standard_normal(4).astype(dtype),
        "labels": rng.integers(0, 5, size=7),
        "scalarish": np.array([], dtype=dtype),
    }


def test_round_trip_bitwise(tmp_path):
    path = tmp_path / "t.ntc"
    tensors = sample_tensors()
    manifest = {"K": 3, "scheme": "multibn", "seed": 11}
    save_tensors(path, tensors, manifest)
    loaded, meta = load_tensors(path)
    assert meta == manifest
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        assert np.array_equal(loaded[name], tensors[name])


def test_round_trip_float64(tmp_path):
    path = tmp_path / "t.ntc"
    tensors = sample_tensors(np.float64)
    save_tensors(path, tensors)
    loaded, meta = load_tensors(path)
    assert meta == {}
    assert loaded["conv/0/weight"].dtype == np.float64


def test_save_then_save_is_deterministic(tmp_path):
    a, b = tmp_path / "a.ntc", tmp_path / "b.ntc"
    save_tensors(a, sample_tensors(), {"seed": 1})
    save_tensors(b, sample_tensors(), {"seed": 1})
    assert a.read_bytes() == b.read_bytes()


def test_truncated_payload_is_integrity_error(tmp_path):
    path = tmp_path / "t.ntc"
    save_tensors(path, sample_tensors())
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(IntegrityError):
        load_tensors(path)


def test_truncated_header_is_integrity_error(tmp_path):
    path = tmp_path / "t.ntc"
    save_tensors(path, sample_tensors())
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(IntegrityError):
        load_tensors(path)


def test_bad_magic_is_integrity_error(tmp_path):
    path = tmp_path / "t.ntc"
    save_tensors(path, sample_tensors())
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_tensors(path)


def test_trailing_garbage_is_integrity_error(tmp_path):
    path = tmp_path / "t.ntc"
    save_tensors(path, sample_tensors())
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(IntegrityError):
        load_tensors(path)


def test_cross_precision_load_rejected(tmp_path):
    path = tmp_path / "t.ntc"
    save_tensors(path, sample_tensors(np.float64))
    with pytest.raises(PrecisionMismatch):
        load_tensors(path, require_dtype="float32")
    # integer tensors are exempt from the precision gate
    loaded, _ = load_tensors(path, require_dtype="float64")
    assert loaded["labels"].dtype == np.int64


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ContainerError):
        save_tensors(tmp_path / "t.ntc", {"x": np.zeros(3, dtype=np.complex64)})
