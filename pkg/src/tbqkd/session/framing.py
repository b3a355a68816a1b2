"""Wire frames: magic 'QK', version, type, u32 BE length, payload, CRC-32 BE.

The CRC (IEEE, as in zlib) covers type + length + payload.
"""
from __future__ import annotations

import enum
import struct
import zlib

MAGIC = b"\x51\x4b"
VERSION = 0x01
HEADER = struct.Struct(">2sBBI")  # magic, version, type, length
CRC = struct.Struct(">I")
OVERHEAD = HEADER.size + CRC.size  # 12 bytes
MAX_PAYLOAD = 2**32 - 1


class MsgType(enum.IntEnum):
    HELLO = 0x01
    SECOND_SUMMARY = 0x02
    BASIS_REVEAL = 0x03
    SIFT_INDICES = 0x04
    SYNDROME = 0x05
    VERIFY_TAG = 0x06
    PA_SEED = 0x07
    KEY_CONFIRM = 0x08
    ABORT = 0xFF


class FrameError(ValueError):
    pass


def frame_encode(msg_type: int, payload: bytes = b"") -> bytes:
    payload = bytes(payload)
    if len(payload) > MAX_PAYLOAD:
        raise FrameError("payload too large")
    body = struct.pack(">BI", int(msg_type), len(payload)) + payload
    return MAGIC + bytes([VERSION]) + body + CRC.pack(zlib.crc32(body))


def _check_header(head: bytes) -> tuple[int, int]:
    magic, version, mtype, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise FrameError("bad magic")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    return mtype, length


def _finish(mtype: int, length: int, payload: bytes, crc: bytes) -> tuple[MsgType, bytes]:
    body = struct.pack(">BI", mtype, length) + payload
    if CRC.unpack(crc)[0] != zlib.crc32(body):
        raise FrameError("CRC mismatch")
    try:
        return MsgType(mtype), payload
    except ValueError:
        raise FrameError(f"unknown message type 0x{mtype:02x}") from None


def frame_decode(data: bytes) -> tuple[MsgType, bytes]:
    """Decode exactly one frame; trailing bytes are an error."""
    if len(data) < OVERHEAD:
        raise FrameError("truncated frame")
    mtype, length = _check_header(data[:HEADER.size])
    if len(data) != OVERHEAD + length:
        raise FrameError("frame length does not match header")
    end = HEADER.size + length
    return _finish(mtype, length, data[HEADER.size:end], data[end:])


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise FrameError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> tuple[MsgType, bytes, bytes]:
    """Read one frame from a socket; returns (type, payload, raw frame bytes)."""
    head = _recv_exact(sock, HEADER.size)
    mtype, length = _check_header(head)
    rest = _recv_exact(sock, length + CRC.size)
    t, payload = _finish(mtype, length, rest[:length], rest[length:])
    return t, payload, head + rest
