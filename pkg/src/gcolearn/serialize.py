"""Binary tensor dumps.

A record is ``b"GCTN"``, u32 version, u8 dtype code, u32 rank, u64 dims[rank]
and then the little-endian row-major payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GCTN"
VERSION = 1

DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("<u8"): 4,
               np.dtype("u1"): 5}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


def dump_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    head = MAGIC + struct.pack("<IBI", VERSION, DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def load_array(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record at ``offset``; returns the array and the end offset."""
    buf = memoryview(buf)
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FormatError("bad tensor magic")
    if len(buf) < offset + 13:
        raise FormatError("truncated tensor header")
    version, code, rank = struct.unpack_from("<IBI", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 13
    if len(buf) < pos + 8 * rank:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt).reshape(dims).copy()
    return arr, pos + nbytes
