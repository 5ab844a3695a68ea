"""Binary weight files.

Layout, all little-endian:

    magic   4 bytes  b"PNAV"
    version u32      currently 1
    then per parameter, in insertion order:
        name_len u32
        name     UTF-8, name_len bytes
        rank     u32
        extents  rank x u64
        payload  product(extents) x f64, row-major

Scalars are rank 0 with a single f64 payload.  Round-trips are bit-exact:
the payload is the raw IEEE-754 image of the array.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PNAV"
VERSION = 1


def save_weights(path, params: Mapping[str, np.ndarray]) -> None:
    """Write named arrays in iteration order. Overwrites ``path``."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in params.items():
        arr = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            chunks.append(struct.pack("<Q", extent))
        chunks.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    """Read a weight file back into an ordered name -> array dict."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ValueError(f"weight file too short: {path}")
    if blob[:4] != MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r} in weight file: {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 8
    total = len(blob)
    while offset < total:
        offset = _need(offset, 4, total, path)
        (name_len,) = struct.unpack_from("<I", blob, offset - 4)
        offset = _need(offset, name_len, total, path)
        name = blob[offset - name_len : offset].decode("utf-8")
        offset = _need(offset, 4, total, path)
        (rank,) = struct.unpack_from("<I", blob, offset - 4)
        offset = _need(offset, 8 * rank, total, path)
        shape = struct.unpack_from(f"<{rank}Q", blob, offset - 8 * rank) if rank else ()
        count = 1
        for extent in shape:
            count *= extent
        offset = _need(offset, 8 * count, total, path)
        flat = np.frombuffer(blob, dtype="<f8", count=count, offset=offset - 8 * count)
        if name in out:
            raise ValueError(f"duplicate parameter name {name!r} in weight file")
        out[name] = flat.astype(np.float64).reshape(shape)
    return out


def _need(offset: int, nbytes: int, total: int, path) -> int:
    end = offset + nbytes
    if end > total:
        raise ValueError(f"truncated weight file: {path}")
    return end
