"""Flat binary container for named float64 tensors.

Layout: 4-byte tag, u32 version, u64 entry count, then per entry a u32
name length, the UTF-8 name, a u64 rank, `rank` u64 dims, and the row-major
float64 values. All integers and floats are little-endian. The same container
backs both parameter stores and dataset caches; the tag tells them apart.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

TAG_PARAMS = b"PST1"
TAG_DATASET = b"DST1"
_VERSION = 1


class ContainerError(ValueError):
    """Malformed or truncated container file."""


def write_container(path: str, tag: bytes, entries: Iterable[tuple[str, np.ndarray]]) -> None:
    if len(tag) != 4:
        raise ContainerError(f"tag must be 4 bytes, got {tag!r}")
    items = [(name, np.ascontiguousarray(arr, dtype=np.float64)) for name, arr in entries]
    with open(path, "wb") as f:
        f.write(tag)
        f.write(struct.pack("<IQ", _VERSION, len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_container(path: str, expected_tag: bytes) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ContainerError(f"{path}: truncated container (wanted {n} bytes at offset {pos})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    tag = take(4)
    if tag != expected_tag:
        raise ContainerError(f"{path}: bad tag {tag!r}, expected {expected_tag!r}")
    version, count = struct.unpack("<IQ", take(12))
    if version != _VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n_values = 1
        for d in dims:
            n_values *= d
        values = np.frombuffer(take(8 * n_values), dtype="<f8").reshape(dims).copy()
        entries.append((name, values))
    if pos != len(data):
        raise ContainerError(f"{path}: {len(data) - pos} trailing bytes after last entry")
    return entries
