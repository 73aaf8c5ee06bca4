"""Checkpoint file format.

Layout (all integers little-endian):

    magic    8 bytes  b"AVSSCKPT"
    version  u32
    records  repeated until EOF:
        name_len  u32
        name      utf-8 bytes
        rank      u32
        extents   rank x u64
        data      prod(extents) x f32
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"AVSSCKPT"
VERSION = 1


def save(path, arrays):
    """Write named arrays as float32 records, in dict order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.astype("<f4").tobytes())


def load(path):
    """Read a checkpoint back into {name: float32 ndarray}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arrays = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        extents = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        count = int(np.prod(extents)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        arrays[name] = data.reshape(extents).copy()
    return arrays


def save_model(path, model, extra=None):
    arrays = {name: p.data for name, p in model.named_parameters()}
    if extra:
        arrays.update(extra)
    save(path, arrays)


def load_model(path, model, dtype=None):
    """Load parameters into `model` by name; returns the non-parameter records.

    Raises ValueError naming both sides on any shape mismatch.
    """
    arrays = load(path)
    extra = dict(arrays)
    for name, p in model.named_parameters():
        if name not in arrays:
            raise ValueError(f"checkpoint {path} is missing parameter '{name}'")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ValueError(
                f"parameter '{name}': checkpoint shape {tuple(arr.shape)} "
                f"!= model shape {tuple(p.shape)}"
            )
        p.data = arr.astype(dtype or p.data.dtype)
        extra.pop(name)
    return extra
