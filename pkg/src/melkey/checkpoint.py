"""Binary persistence: tensor-blob checkpoints and feature cache files.

Checkpoint layout (all integers little-endian uint32):

    b"MKCK" | version | meta_len | meta JSON (UTF-8) | n_entries |
    entries: name_len | name bytes | rank | dims[rank] | float32 data

Feature cache files hold one track-variant's embedding matrix:

    b"MKFT" | version | meta_len | meta JSON | float32 data [n_windows x dim]

The JSON header of a feature file records the track id, context length,
encoder checkpoint hash, pitch shift, and label index.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import DataError

CHECKPOINT_MAGIC = b"MKCK"
FEATURE_MAGIC = b"MKFT"
FORMAT_VERSION = 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _read_u32(fh) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise DataError("truncated file while reading uint32")
    return struct.unpack("<I", raw)[0]


def save_blob(path, tensors: dict, metadata: dict) -> None:
    """Write named float32 tensors plus a JSON metadata document."""
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        _write_u32(fh, FORMAT_VERSION)
        _write_u32(fh, len(meta_bytes))
        fh.write(meta_bytes)
        _write_u32(fh, len(tensors))
        for name, arr in tensors.items():
            name_bytes = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            _write_u32(fh, len(name_bytes))
            fh.write(name_bytes)
            _write_u32(fh, arr.ndim)
            for dim in arr.shape:
                _write_u32(fh, dim)
            fh.write(arr.tobytes())


def load_blob(path):
    """Read a tensor blob back as (tensors dict, metadata dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic {magic!r})")
        version = _read_u32(fh)
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint format version {version}")
        meta_len = _read_u32(fh)
        metadata = json.loads(fh.read(meta_len).decode("utf-8"))
        n_entries = _read_u32(fh)
        tensors = {}
        for _ in range(n_entries):
            name_len = _read_u32(fh)
            name = fh.read(name_len).decode("utf-8")
            rank = _read_u32(fh)
            dims = tuple(_read_u32(fh) for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise DataError(f"truncated tensor data for entry {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        return tensors, metadata


def write_feature_file(path, matrix: np.ndarray, *, track_id: str, context_len: int,
                       checkpoint_hash: str, shift: int = 0, label_index: int | None = None) -> None:
    matrix = np.ascontiguousarray(np.atleast_2d(matrix), dtype="<f4")
    meta = {
        "track_id": track_id,
        "context_len": int(context_len),
        "checkpoint_hash": checkpoint_hash,
        "shift": int(shift),
        "label_index": label_index,
        "n_windows": int(matrix.shape[0]),
        "dim": int(matrix.shape[1]),
        "version": FORMAT_VERSION,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        _write_u32(fh, FORMAT_VERSION)
        _write_u32(fh, len(meta_bytes))
        fh.write(meta_bytes)
        fh.write(matrix.tobytes())


def read_feature_file(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise DataError(f"{path} is not a feature cache file (bad magic {magic!r})")
        version = _read_u32(fh)
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported feature file version {version}")
        meta_len = _read_u32(fh)
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        count = meta["n_windows"] * meta["dim"]
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise DataError(f"truncated feature matrix in {path}")
        matrix = np.frombuffer(raw, dtype="<f4").reshape(meta["n_windows"], meta["dim"]).copy()
    return meta, matrix


def feature_cache_name(track_id: str, shift: int) -> str:
    """Stable, filesystem-safe cache filename for one track variant."""
    digest = hashlib.sha256(track_id.encode("utf-8")).hexdigest()[:12]
    sign = "m" if shift < 0 else "p"
    return f"{digest}_{sign}{abs(shift)}.feat"
