"""Binary container for named f64 arrays (checkpoints, latents, embeddings).

Layout, all little-endian:

    magic   4 bytes  b"ALVF"
    version u32      currently 1
    count   u64      number of records
    then per record:
        name_len u32
        name     UTF-8 bytes
        rank     u32
        dims     u64 * rank
        data     f64 * prod(dims), C order

Round-trips must be bit-exact; writers always emit records sorted by the
caller's ordering (dict insertion order), readers preserve it.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError

MAGIC = b"ALVF"
VERSION = 1


def save_arrays(path, arrays):
    """Write an ordered mapping name -> ndarray to `path`."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(data.tobytes(order="C"))


def load_arrays(path):
    """Read a container written by save_arrays; returns dict name -> ndarray."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContractError(f"bad container magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ContractError(f"unsupported container version {version} in {path}")
        (count,) = struct.unpack("<Q", fh.read(8))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = [struct.unpack("<Q", fh.read(8))[0] for _ in range(rank)]
            n = int(np.prod(dims)) if dims else 1
            raw = fh.read(8 * n)
            arr = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
            out[name] = arr
    return out
