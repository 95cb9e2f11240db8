"""Binary ``.tns`` tensor container.

Layout: ``b"TNS1"``, u32 rank, rank x u64 dims, then float64 little-endian
values in row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TNS1"


class TnsFormatError(ValueError):
    pass


def encode_tns(arr) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def decode_tns(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TnsFormatError(f"{source}: bad magic bytes (expected {MAGIC!r})")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise TnsFormatError(f"{source}: truncated header for rank {rank}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 8 * count:
        raise TnsFormatError(
            f"{source}: payload has {len(buf) - off} bytes, dims {tuple(dims)} need {8 * count}"
        )
    return np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64).reshape(dims)


def save_tns(path, arr) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_tns(arr))
    os.replace(tmp, path)


def load_tns(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tns(fh.read(), source=str(path))
