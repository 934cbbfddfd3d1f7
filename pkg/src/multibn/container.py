"""Named-tensor container file: the one on-disk format for everything.

Layout: 4-byte magic, 8-byte little-endian header length, then a UTF-8
JSON header listing a free-form ``manifest`` plus per-tensor entries
(name, precision tag, shape, byte count), then the payloads back to back
in header order, row-major little-endian.  Checkpoints, datasets, and
crafted-attack dumps all ride on this; round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"NTC1"

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


class ContainerError(RuntimeError):
    """Base class for container format failures."""


class IntegrityError(ContainerError):
    """File is corrupt: bad magic, malformed header, or truncated payload."""


class PrecisionMismatch(ContainerError):
    """Stored precision differs from what the caller requires."""


def _dtype_tag(arr):
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt:
            return tag
    raise ContainerError(f"unsupported dtype {arr.dtype}; use one of {sorted(_DTYPES)}")


def save_tensors(path, tensors, manifest=None):
    """Write a name -> ndarray mapping plus an optional JSON-able manifest."""
    entries = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        entries.append((name, arr))
    header = {
        "manifest": manifest if manifest is not None else {},
        "tensors": [
            {"name": name, "dtype": _dtype_tag(arr), "shape": list(arr.shape), "nbytes": arr.nbytes}
            for name, arr in entries
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def load_tensors(path, require_dtype=None):
    """Read a container back as ``(tensors, manifest)``.

    ``require_dtype`` (e.g. "float32") makes the load reject any floating
    tensor stored at a different precision instead of silently casting.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a named-tensor container")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    if start + hlen > len(raw):
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        entries = header["tensors"]
        manifest = header["manifest"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: malformed header ({exc})") from exc
    tensors = {}
    offset = start + hlen
    for entry in entries:
        try:
            name, tag, shape, nbytes = entry["name"], entry["dtype"], entry["shape"], entry["nbytes"]
        except (KeyError, TypeError) as exc:
            raise IntegrityError(f"{path}: malformed tensor entry ({exc})") from exc
        if tag not in _DTYPES:
            raise IntegrityError(f"{path}: unknown precision tag {tag!r}")
        dt = _DTYPES[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != expected:
            raise IntegrityError(f"{path}: entry {name!r} declares {nbytes} bytes, shape implies {expected}")
        if offset + nbytes > len(raw):
            raise IntegrityError(f"{path}: truncated payload at tensor {name!r}")
        if require_dtype is not None and tag.startswith("float") and tag != require_dtype:
            raise PrecisionMismatch(f"{path}: tensor {name!r} stored as {tag}, requires {require_dtype}")
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        tensors[name] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise IntegrityError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return tensors, manifest
