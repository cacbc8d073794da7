"""Flat binary parameter checkpoints.

A checkpoint is a small header followed by an ordered list of
(name, shape, float64 little-endian values) records; the exact byte
layout is documented in docs/FORMATS.md. The header embeds a hash of the
model-defining configuration so evaluation can refuse checkpoints whose
head shape does not match.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MVDETCKP"
VERSION = 1


def save_checkpoint(path: str, arrays: dict, config_hash: str = "") -> None:
    """Write named arrays in dict order. Values are stored as float64 LE."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        hash_bytes = config_hash.encode("ascii")
        fh.write(struct.pack("<I", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, value in arrays.items():
            data = np.asarray(getattr(value, "data", value), dtype="<f8")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes(order="C"))


def load_checkpoint(path: str) -> tuple[dict, str]:
    """Read a checkpoint; returns (ordered name->float64 array, config hash)."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hash_len,) = struct.unpack("<I", fh.read(4))
        config_hash = fh.read(hash_len).decode("ascii")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
        return arrays, config_hash
