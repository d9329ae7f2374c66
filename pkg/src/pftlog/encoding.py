"""Strict binary encoding shared by hashing, signing, storage and the wire.

Integers are fixed-width big-endian, byte strings are length-prefixed and
optional values carry a 0/1 presence byte. Decoding rejects any trailing or
missing bytes and any non-canonical flag value, so each value has exactly one
encoding.
"""
from __future__ import annotations

import struct

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class DecodeError(ValueError):
    pass


class Writer:
    __slots__ = ("parts",)

    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, value: int) -> Writer:
        self.parts.append(_U8.pack(value))
        return self

    def u16(self, value: int) -> Writer:
        self.parts.append(_U16.pack(value))
        return self

    def u32(self, value: int) -> Writer:
        self.parts.append(_U32.pack(value))
        return self

    def u64(self, value: int) -> Writer:
        self.parts.append(_U64.pack(value))
        return self

    def flag(self, value: bool) -> Writer:
        return self.u8(1 if value else 0)

    def fixed(self, data: bytes, size: int) -> Writer:
        if len(data) != size:
            raise ValueError(f"expected {size} bytes, got {len(data)}")
        self.parts.append(data)
        return self

    def blob(self, data: bytes) -> Writer:
        self.parts.append(_U32.pack(len(data)))
        self.parts.append(data)
        return self

    def raw(self, data: bytes) -> Writer:
        self.parts.append(data)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, size: int) -> bytes:
        end = self.pos + size
        if end > len(self.data):
            raise DecodeError("truncated input")
        chunk = bytes(self.data[self.pos:end])
        self.pos = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def flag(self) -> bool:
        value = self.u8()
        if value > 1:
            raise DecodeError(f"invalid flag byte {value}")
        return value == 1

    def fixed(self, size: int) -> bytes:
        return self._take(size)

    def blob(self, limit: int = 1 << 26) -> bytes:
        size = self.u32()
        if size > limit:
            raise DecodeError(f"length {size} exceeds limit {limit}")
        return self._take(size)

    def count(self, limit: int = 1 << 20) -> int:
        value = self.u32()
        if value > limit:
            raise DecodeError(f"count {value} exceeds limit {limit}")
        return value

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes")
