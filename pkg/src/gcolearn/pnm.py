"""Binary PPM (P6) images and PGM (P5) masks, 8-bit only."""

from __future__ import annotations

import os
import re

import numpy as np


class PNMError(ValueError):
    pass


_HEADER = re.compile(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    if h < 1 or w < 1:
        raise PNMError("image dims must be >= 1")
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def _decode(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    m = _HEADER.match(data)
    if not m or m.group(1) != magic:
        raise PNMError(f"malformed {magic.decode()} header")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255 or w < 1 or h < 1:
        raise PNMError(f"unsupported header: {w}x{h} maxval {maxval}")
    payload = data[m.end():]
    need = w * h * channels
    if len(payload) < need:
        raise PNMError(f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload[:need], dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def encode_image(rgb: np.ndarray) -> bytes:
    """H×W×3 uint8 -> P6 bytes."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise PNMError(f"expected H×W×3, got {rgb.shape}")
    return _encode(b"P6", rgb)


def encode_mask(mask: np.ndarray) -> bytes:
    """H×W array with values in {0, 255} -> P5 bytes."""
    if mask.ndim != 2:
        raise PNMError(f"expected H×W, got {mask.shape}")
    check_mask_values(mask)
    return _encode(b"P5", mask)


def encode_gray(gray: np.ndarray) -> bytes:
    """Arbitrary 8-bit grayscale map (saliency, attention) -> P5 bytes."""
    if gray.ndim != 2:
        raise PNMError(f"expected H×W, got {gray.shape}")
    return _encode(b"P5", gray)


def check_mask_values(mask: np.ndarray) -> None:
    bad = ~np.isin(mask, (0, 255))
    if bad.any():
        raise PNMError(f"mask values must be 0 or 255, found {np.unique(np.asarray(mask)[bad])[:5]}")


def _write(path: str | os.PathLike, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def write_image(path, rgb: np.ndarray) -> None:
    _write(path, encode_image(rgb))


def write_mask(path, mask: np.ndarray) -> None:
    _write(path, encode_mask(mask))


def write_gray(path, gray: np.ndarray) -> None:
    _write(path, encode_gray(gray))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _decode(fh.read(), b"P6", 3)


def read_gray(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _decode(fh.read(), b"P5", 1)


def read_mask(path) -> np.ndarray:
    mask = read_gray(path)
    check_mask_values(mask)
    return mask
