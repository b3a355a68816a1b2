"""Bit-packed key files: u64 little-endian bit count, then MSB-first packed bytes."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


def pack_bits(bits) -> bytes:
    b = np.asarray(bits, dtype=np.uint8) & 1
    return struct.pack("<Q", b.size) + np.packbits(b, bitorder="big").tobytes()


def unpack_bits(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise ValueError("truncated bit header")
    (n,) = struct.unpack("<Q", data[:8])
    body = np.frombuffer(data[8:], dtype=np.uint8)
    if body.size != (n + 7) // 8:
        raise ValueError(f"expected {(n + 7) // 8} payload bytes, got {body.size}")
    return np.unpackbits(body, bitorder="big")[:n].copy()


def write_bits(path, bits) -> None:
    Path(path).write_bytes(pack_bits(bits))


def read_bits(path) -> np.ndarray:
    return unpack_bits(Path(path).read_bytes())
