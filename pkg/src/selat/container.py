"""Flat binary container for named float32 arrays.

Layout: magic ``SELAT1``, then a u64-length-prefixed UTF-8 name for the whole
container, a u64 entry count, and per entry a u64-length-prefixed name, a u64
rank, u64 dims, and the raw little-endian float32 payload. All integers are
64-bit little-endian. Checkpoints and dataset fixtures share this format.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SELAT1"


def _write_str(fh, text: str):
    raw = text.encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)


def write_container(path, name: str, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_str(fh, name)
        fh.write(struct.pack("<Q", len(arrays)))
        for key, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            _write_str(fh, key)
            fh.write(struct.pack("<Q", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


class _Reader:
    def __init__(self, path):
        with open(path, "rb") as fh:
            self.buf = fh.read()
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated, needed {n} bytes at offset {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def string(self):
        return self.take(self.u64()).decode("utf-8")


def read_container(path) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(path)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    name = r.string()
    arrays = {}
    for _ in range(r.u64()):
        key = r.string()
        rank = r.u64()
        shape = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        arrays[key] = data.copy()
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes after last entry")
    return name, arrays
