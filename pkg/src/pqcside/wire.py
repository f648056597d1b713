"""Big-endian, length-prefixed field encoding shared by certificates,
key files and handshake messages."""

from __future__ import annotations

import struct


class DecodeError(ValueError):
    """Raised when a byte string does not parse as the expected structure."""


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">B", value))
        return self

    def u16(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">H", value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">I", value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">Q", value))
        return self

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(bytes(data))
        return self

    def bytes8(self, data: bytes) -> "Writer":
        if len(data) > 0xFF:
            raise ValueError("field too long for 1-byte length prefix")
        return self.u8(len(data)).raw(data)

    def bytes16(self, data: bytes) -> "Writer":
        if len(data) > 0xFFFF:
            raise ValueError("field too long for 2-byte length prefix")
        return self.u16(len(data)).raw(data)

    def bytes32(self, data: bytes) -> "Writer":
        return self.u32(len(data)).raw(data)

    def text16(self, text: str) -> "Writer":
        return self.bytes16(text.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0) -> None:
        self._data = memoryview(data)
        self.offset = offset

    def _take(self, n: int) -> bytes:
        end = self.offset + n
        if n < 0 or end > len(self._data):
            raise DecodeError(f"truncated input: need {n} bytes at offset {self.offset}")
        chunk = self._data[self.offset:end].tobytes()
        self.offset = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def bytes8(self) -> bytes:
        return self._take(self.u8())

    def bytes16(self) -> bytes:
        return self._take(self.u16())

    def bytes32(self) -> bytes:
        return self._take(self.u32())

    def text16(self) -> str:
        try:
            return self.bytes16().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid UTF-8 text field") from exc

    @property
    def remaining(self) -> int:
        return len(self._data) - self.offset

    def done(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes")
