"""Little-endian binary record helpers for the checkpoint and sample
formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import TruncatedError

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")

DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
TAG_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def pack_u64(value: int) -> bytes:
    return _U64.pack(value)


def pack_u32(value: int) -> bytes:
    return _U32.pack(value)


class Reader:
    """Cursor over a byte buffer that fails loudly on overrun."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedError(
                f"need {n} bytes at offset {self.offset}, only {len(self.data) - self.offset} left"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset


def pack_array(arr: np.ndarray) -> bytes:
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return np.ascontiguousarray(le).tobytes()


def read_array(reader: Reader, dtype: np.dtype, shape) -> np.ndarray:
    count = int(np.prod(shape)) if len(shape) else 1
    raw = reader.take(count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=count)
    return arr.astype(dtype).reshape(shape)
