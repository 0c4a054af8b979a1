"""Flat binary parameter container ("TFNK").

Layout, all little-endian::

    b"TFNK" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float32 * prod(dims)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

MAGIC = b"TFNK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def entry_nbytes(name: str, shape: tuple[int, ...]) -> int:
    return 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * int(np.prod(shape, dtype=np.int64))


def serialized_size(shapes: Mapping[str, tuple[int, ...]]) -> int:
    return 12 + sum(entry_nbytes(k, tuple(v)) for k, v in shapes.items())


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def iter_entries(buf: bytes) -> Iterator[tuple[str, tuple[int, ...], int]]:
    """Yield ``(name, dims, payload offset)`` without decoding the floats."""
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic; not a TFNK checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        yield name, tuple(dims), off
        off += 4 * int(np.prod(dims, dtype=np.int64))
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after {count} entries")


def loads(buf: bytes) -> dict[str, np.ndarray]:
    out = {}
    for name, dims, off in iter_entries(buf):
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> int:
    data = dumps(tensors)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
