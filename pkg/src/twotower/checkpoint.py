"""Binary tensor checkpoints.

Byte layout (all integers little-endian, payload little-endian IEEE f64,
C row-major order):

    offset  size        field
    0       4           magic, the ASCII bytes "BSC1"
    4       4           format version, u32 (currently 1)
    8       4           tensor count, u32
    then per tensor, in file order:
            4           name length in bytes, u32
            name_len    name, UTF-8
            4           rank, u32
            8 * rank    shape extents, u64 each
            8 * prod    payload, f64

Round trips are bitwise: load(save(x)) returns arrays equal bit for bit,
in the same order. Names must be unique; loading preserves file order.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"BSC1"
VERSION = 1


def save_checkpoint(path: str, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            if name in out:
                raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, "shape"))[0]
                for _ in range(rank)
            )
            n_elems = 1
            for extent in shape:
                n_elems *= extent
            payload = _read_exact(fh, 8 * n_elems, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return out
