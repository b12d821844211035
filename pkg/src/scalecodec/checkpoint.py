"""``SHMCKPT`` checkpoint files: named little-endian float32 arrays with a CRC-32 trailer.

Layout::

    magic "SHMCKPT" | version u8 | entry count u32
    per entry: name length u16 | name utf-8 | dtype u8 (0 = float32) | rank u8 | dims u32 x rank | values
    crc32 u32 over everything before it
"""

import struct
import zlib
from collections import OrderedDict
from typing import Dict

import numpy as np

MAGIC = b"SHMCKPT"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def dumps(arrays: Dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<BI", VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise CheckpointError(f"entry {name!r} cannot be stored")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", DTYPE_F32, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def loads(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(data) < len(MAGIC) + 9 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an SHMCKPT file (bad magic)")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checksum mismatch: file is corrupt")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<BI", data, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos += 5
    end = len(data) - 4
    arrays = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            if dtype != DTYPE_F32:
                raise CheckpointError(f"entry {name!r}: unknown dtype code {dtype}")
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > end:
                raise CheckpointError(f"entry {name!r} runs past end of file")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as err:
        raise CheckpointError(f"truncated checkpoint: {err}") from None
    if pos != end:
        raise CheckpointError("unexpected bytes after last entry")
    return arrays


def save(arrays: Dict[str, np.ndarray], path):
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return loads(fh.read())
