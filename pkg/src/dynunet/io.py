"""File formats: DUT1 binary tensors and 8-bit binary PGM images.

DUT1 layout (little-endian)::

    b"DUT1" | u8 rank | 4 x u32 extents | u8 dtype (0=f32, 1=f64) | payload

The first ``rank`` extents hold the shape; unused trailing slots are 1. The
payload is the row-major array.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DUT1"
_HEADER = struct.Struct("<4sB4IB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise FormatError(f"DUT1 stores float32/float64 only, got {arr.dtype}")
    if not 0 <= arr.ndim <= 4:
        raise FormatError(f"DUT1 stores rank <= 4, got rank {arr.ndim}")
    extents = list(arr.shape) + [1] * (4 - arr.ndim)
    tag = _TAGS[arr.dtype]
    header = _HEADER.pack(MAGIC, arr.ndim, *extents, tag)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated DUT1 header")
    magic, rank, e0, e1, e2, e3, tag = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if rank > 4 or tag not in _DTYPES:
        raise FormatError(f"bad DUT1 header: rank={rank} dtype tag={tag}")
    shape = (e0, e1, e2, e3)[:rank]
    dtype = _DTYPES[tag]
    count = int(np.prod(shape)) if rank else 1
    payload = buf[_HEADER.size :]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"payload is {len(payload)} bytes, expected {count * dtype.itemsize} for shape {shape}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def _pgm_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Return an 8-bit binary PGM as a ``[H, W]`` uint8 array."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(buf, 4)
    if magic != b"P5":
        raise FormatError(f"only binary PGM (P5) is supported, got {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit PGM is supported, maxval={maxval}")
    data = np.frombuffer(buf[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise FormatError("truncated PGM payload")
    return data.reshape(h, w).copy()


def write_pgm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError(f"write_pgm needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def labels_to_pgm(labels, num_classes: int) -> np.ndarray:
    """Spread labels ``0..K-1`` evenly over ``0..255``."""
    labels = np.asarray(labels)
    return np.round(labels * (255.0 / (num_classes - 1))).astype(np.uint8)
