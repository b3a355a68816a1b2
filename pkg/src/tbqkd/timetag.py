"""TTAG time-tag files.

Header (18 bytes): b"TTAG", u16 version, u32 resolution_ps, 8 zero bytes.
Records (16 bytes): u64 timestamp_ps, u8 channel, u8 flags, 6 zero bytes.
All integers little-endian.

Channel registry: transmitter files carry the prepared state (0-3 = E, L, +, -);
receiver files carry the detector port (0-1).  Flag bit 0 marks a simulated
background click (ground truth, dropped in blind mode); bits 1-2 hold the
intensity class on transmitter files.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"TTAG"
VERSION = 1
HEADER = struct.Struct("<4sHI8s")
RECORD = np.dtype([("t", "<u8"), ("ch", "u1"), ("flags", "u1"), ("pad", "V6")])
FLAG_BACKGROUND = 0x01
INTENSITY_SHIFT = 1
INTENSITY_MASK = 0x06

assert HEADER.size == 18 and RECORD.itemsize == 16


@dataclass
class TimeTags:
    timestamps: np.ndarray  # int64 ps
    channels: np.ndarray  # uint8
    flags: np.ndarray  # uint8
    resolution_ps: int = 1

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        self.flags = np.asarray(self.flags, dtype=np.uint8)
        if not (self.timestamps.size == self.channels.size == self.flags.size):
            raise ValueError("timestamps, channels and flags differ in length")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if self.timestamps.size and self.timestamps.min() < 0:
            raise ValueError("timestamps must be non-negative")

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def intensities(self) -> np.ndarray:
        return ((self.flags & INTENSITY_MASK) >> INTENSITY_SHIFT).astype(np.int8)

    @property
    def background(self) -> np.ndarray:
        return (self.flags & FLAG_BACKGROUND).astype(bool)

    def blind(self) -> "TimeTags":
        """Copy without the ground-truth background marker."""
        return TimeTags(self.timestamps, self.channels, self.flags & ~np.uint8(FLAG_BACKGROUND),
                        self.resolution_ps)


def to_bytes(tags: TimeTags) -> bytes:
    rec = np.zeros(len(tags), dtype=RECORD)
    rec["t"] = tags.timestamps
    rec["ch"] = tags.channels
    rec["flags"] = tags.flags
    return HEADER.pack(MAGIC, VERSION, tags.resolution_ps, bytes(8)) + rec.tobytes()


def from_bytes(data: bytes) -> TimeTags:
    if len(data) < HEADER.size:
        raise ValueError("truncated TTAG header")
    magic, version, res, reserved = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("bad TTAG magic")
    if version != VERSION:
        raise ValueError(f"unsupported TTAG version {version}")
    if reserved != bytes(8):
        raise ValueError("reserved TTAG header bytes must be zero")
    body = data[HEADER.size:]
    if len(body) % RECORD.itemsize:
        raise ValueError("TTAG body is not a whole number of 16-byte records")
    rec = np.frombuffer(body, dtype=RECORD)
    raw = np.frombuffer(body, dtype=np.uint8).reshape(-1, RECORD.itemsize)
    if np.any(raw[:, 10:]):
        raise ValueError("TTAG record padding must be zero")
    return TimeTags(rec["t"].astype(np.int64), rec["ch"].copy(), rec["flags"].copy(), res)


def write_tags(path, tags: TimeTags) -> None:
    Path(path).write_bytes(to_bytes(tags))


def read_tags(path) -> TimeTags:
    return from_bytes(Path(path).read_bytes())
