"""Flat binary checkpoint container.

Byte layout (all integers little-endian):

    offset  size  field
    0       4     magic ``LCKP``
    4       4     format version, uint32 (currently 1)
    8       1     precision, uint8: bytes per value, 4 (float32) or 8 (float64)

then zero or more records until end of file, each:

    2            name length L, uint16
    L            name, UTF-8
    1            rank R, uint8
    4 * R        shape, uint32 per dimension
    prec * prod  values, little-endian IEEE floats in row-major order

Model parameters are stored under their parameter names; Adam moment buffers
are appended under the same names suffixed ``.m`` and ``.v``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LCKP"
VERSION = 1

_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(Exception):
    """Raised for malformed or mismatched checkpoint files."""


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], precision: int = 4) -> None:
    """Write named arrays to ``path`` in the container format above."""
    if precision not in _DTYPES:
        raise ValueError(f"precision must be 4 or 8 bytes per value, got {precision}")
    dtype = _DTYPES[precision]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IB", VERSION, precision))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name!r}")
            a = np.asarray(arr)
            if a.ndim > 0xFF:
                raise ValueError(f"rank too large for {name!r}")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", a.ndim))
            for dim in a.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> array dict (insertion order kept)."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic {blob[:4]!r})")
    version, precision = struct.unpack_from("<IB", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if precision not in _DTYPES:
        raise CheckpointError(f"{path}: unsupported precision {precision}")
    dtype = _DTYPES[precision]

    tensors: dict[str, np.ndarray] = {}
    pos = 9
    end = len(blob)
    while pos < end:
        if pos + 2 > end:
            raise CheckpointError(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = count * precision
        if pos + nbytes > end:
            raise CheckpointError(f"{path}: truncated values for {name!r}")
        values = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += nbytes
        tensors[name] = values.copy()
    return tensors
