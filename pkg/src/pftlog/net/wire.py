"""Length-prefixed, checksummed frames for sockets and the durable log.

Layout (big-endian)::

    magic "PFTW" | version u8 | type u8 | length u32 | body | crc32 u32

The checksum covers the type, the length and the body, so a damaged type byte
cannot route an intact body to the wrong decoder.
"""
from __future__ import annotations

import struct
import zlib

from ..encoding import DecodeError
from ..messages import decode_message, encode_message

MAGIC = b"PFTW"
WIRE_VERSION = 1
HEADER = struct.Struct(">4sBBI")
TRAILER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
OVERHEAD = HEADER.size + TRAILER.size
MAX_BODY = 64 << 20

# sent back to a peer before closing a connection that misbehaved
ERROR_TYPE = 0xFF


class NeedMoreBytes(Exception):
    """The buffer holds only a prefix of a frame."""

    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


class ProtocolError(ValueError):
    pass


def _checksum(ftype: int, body: bytes) -> int:
    return zlib.crc32(body, zlib.crc32(struct.pack(">BI", ftype, len(body))))


def pack_frame(ftype: int, body: bytes, version: int = WIRE_VERSION) -> bytes:
    if len(body) > MAX_BODY:
        raise ValueError("frame body too large")
    return b"".join((HEADER.pack(MAGIC, version, ftype, len(body)), body,
                     TRAILER.pack(_checksum(ftype, body))))


def unpack_frame(data: bytes | bytearray | memoryview, offset: int = 0) -> tuple[int, bytes, int]:
    """Parse one raw frame at ``offset``; returns ``(type, body, next_offset)``."""
    avail = len(data) - offset
    if avail < HEADER_SIZE:
        raise NeedMoreBytes(HEADER_SIZE - avail)
    magic, version, ftype, length = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise ProtocolError("bad magic")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported format version {version}")
    if length > MAX_BODY:
        raise ProtocolError(f"frame length {length} exceeds limit")
    end = offset + HEADER_SIZE + length + TRAILER.size
    if len(data) < end:
        raise NeedMoreBytes(end - len(data))
    body = bytes(data[offset + HEADER_SIZE:end - TRAILER.size])
    (crc,) = TRAILER.unpack_from(data, end - TRAILER.size)
    if crc != _checksum(ftype, body):
        raise ProtocolError("checksum mismatch")
    return ftype, body, end


def encode_frame(msg) -> bytes:
    code, body = encode_message(msg)
    return pack_frame(code, body)


def error_frame(reason: str) -> bytes:
    return pack_frame(ERROR_TYPE, reason.encode("utf-8")[:1024])


def _decode_body(ftype: int, body: bytes):
    if ftype == ERROR_TYPE:
        raise ProtocolError("peer reported: " + body.decode("utf-8", "replace"))
    try:
        return decode_message(ftype, body)
    except (DecodeError, ValueError) as exc:
        raise ProtocolError(f"undecodable type-{ftype} body: {exc}") from None


def decode_frame(data: bytes):
    """Decode exactly one frame holding a protocol message."""
    ftype, body, end = unpack_frame(data)
    if end != len(data):
        raise ProtocolError("trailing bytes after frame")
    return _decode_body(ftype, body)


class FrameDecoder:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self.buf = bytearray()

    def feed(self, data: bytes) -> list:
        self.buf.extend(data)
        out = []
        pos = 0
        try:
            while True:
                try:
                    ftype, body, pos2 = unpack_frame(self.buf, pos)
                except NeedMoreBytes:
                    break
                out.append(_decode_body(ftype, body))
                pos = pos2
        finally:
            del self.buf[:pos]
        return out
