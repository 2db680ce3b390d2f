"""Binary checkpoint container for named arrays.

Layout (all little-endian):
    header : magic b"OMCK", uint32 version, uint32 entry count
    entry  : uint32 name length, utf-8 name, uint32 rank,
             rank * uint64 dims, prod(dims) * float64 payload

Every value is stored as float64, so float32 parameters round-trip
bit-exactly (float32 -> float64 -> float32 is lossless).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"OMCK"
VERSION = 1

__all__ = ["save_arrays", "load_arrays", "MAGIC", "VERSION"]


def save_arrays(path: Path | str, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(arrays[name], dtype=np.float64, order="C")
        if not np.isfinite(arr).all():
            raise CheckpointError(f"array {name!r} contains non-finite values")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


def load_arrays(path: Path | str) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = arr.copy()
    if off != len(buf):
        raise CheckpointError(f"trailing bytes in {path}")
    return out
