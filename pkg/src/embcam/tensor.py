"""Dense float32 tensors and the TNSR binary file format.

Layout (all integers little-endian)::

    0..3   b"TNSR"
    4      version = 1
    5      dtype   = 1 (float32, little-endian)
    6      ndim    in 1..4
    7      reserved = 0
    8..    ndim x uint32 dims, outermost first
    ...    prod(dims) x float32, row-major
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import (BadMagic, NonFinite, ShapeError, TruncatedFile,
                     UnsupportedDtype, UnsupportedVersion)

MAGIC = b"TNSR"
VERSION = 1
DTYPE_F32 = 1
MAX_NDIM = 4

_F32 = np.dtype("<f4")


class Tensor:
    """Immutable float32 array with 1-4 positive axes and finite values."""

    __slots__ = ("_data",)

    def __init__(self, data, dims=None):
        arr = np.array(data, dtype=_F32, copy=True, order="C")
        if dims is not None:
            dims = tuple(int(d) for d in dims)
            if arr.size != int(np.prod(dims, dtype=np.int64)):
                raise ShapeError(f"{arr.size} values do not fill dims {dims}")
            arr = arr.reshape(dims)
        if not 1 <= arr.ndim <= MAX_NDIM:
            raise ShapeError(f"tensors need 1..{MAX_NDIM} axes, got {arr.ndim}")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"all dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFinite("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self._data = arr

    @property
    def dims(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        """Read-only float32 view, shaped by ``dims``."""
        return self._data

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dims == other.dims and self._data.tobytes() == other._data.tobytes()

    def __hash__(self):
        return hash((self.dims, self._data.tobytes()))

    def __repr__(self):
        return f"Tensor(dims={self.dims})"


def as_tensor(t) -> Tensor:
    return t if isinstance(t, Tensor) else Tensor(t)


def encode_tensor(t) -> bytes:
    t = as_tensor(t)
    header = MAGIC + bytes([VERSION, DTYPE_F32, len(t.dims), 0])
    dims = struct.pack(f"<{len(t.dims)}I", *t.dims)
    return header + dims + t.data.astype(_F32, copy=False).tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 8:
        if buf[:4] != MAGIC[: len(buf)]:
            raise BadMagic("not a TNSR file")
        raise TruncatedFile("header shorter than 8 bytes")
    if buf[:4] != MAGIC:
        raise BadMagic(f"expected b'TNSR', got {bytes(buf[:4])!r}")
    version, dtype, ndim = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise UnsupportedVersion(f"TNSR version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(f"TNSR dtype code {dtype}")
    if not 1 <= ndim <= MAX_NDIM:
        raise ShapeError(f"TNSR ndim {ndim} outside 1..{MAX_NDIM}")
    end = 8 + 4 * ndim
    if len(buf) < end:
        raise TruncatedFile("dims block truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    if any(d == 0 for d in dims):
        raise ShapeError(f"zero-sized dim in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) < end + 4 * count:
        raise TruncatedFile(f"payload needs {4 * count} bytes, found {len(buf) - end}")
    data = np.frombuffer(buf, dtype=_F32, count=count, offset=end)
    if not np.all(np.isfinite(data)):
        raise NonFinite("TNSR payload contains NaN or Inf")
    return Tensor(data, dims)


def read_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def write_tensor(t, path: str | os.PathLike) -> None:
    payload = encode_tensor(t)
    with open(path, "wb") as fh:
        fh.write(payload)
