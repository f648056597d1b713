"""AEAD record framing for application bytes inside an established tunnel.

Wire format of one record: 4-byte big-endian ciphertext length, then the
ciphertext (plaintext + 16-byte tag).  The cipher is ChaCha20-Poly1305 with
a 96-bit nonce equal to the direction's sequence number left-padded with
zeros and empty associated data.  Any authentication failure closes the
channel for good; there is no replay window.
"""

from __future__ import annotations

from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .handshake import SessionKeys

MAX_PLAINTEXT = 16384
TAG_SIZE = 16
LENGTH_SIZE = 4
MAX_SEQ = (1 << 64) - 1


class RecordError(Exception):
    pass


class Oversize(RecordError):
    pass


class ChannelClosed(RecordError):
    pass


class AuthFailure(RecordError):
    """Tampered, replayed or reordered record (all look the same here)."""


@dataclass(frozen=True)
class Record:
    ciphertext: bytes

    @property
    def length(self) -> int:
        return len(self.ciphertext)

    def to_bytes(self) -> bytes:
        return len(self.ciphertext).to_bytes(LENGTH_SIZE, "big") + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "Record":
        if len(data) < LENGTH_SIZE:
            raise AuthFailure("short record")
        n = int.from_bytes(data[:LENGTH_SIZE], "big")
        if n != len(data) - LENGTH_SIZE or n > MAX_PLAINTEXT + TAG_SIZE:
            raise AuthFailure("record length field does not match")
        return cls(bytes(data[LENGTH_SIZE:]))


def nonce_for(seq: int) -> bytes:
    return seq.to_bytes(12, "big")


class ChannelState:
    """One peer's view of a tunnel: a sending half and a receiving half.

    Each half may be driven by a different task, but a single half must not
    be used concurrently.
    """

    def __init__(self, send_key: bytes, recv_key: bytes, max_plaintext: int = MAX_PLAINTEXT) -> None:
        if len(send_key) != 32 or len(recv_key) != 32:
            raise ValueError("record keys must be 32 bytes")
        self._send = ChaCha20Poly1305(send_key)
        self._recv = ChaCha20Poly1305(recv_key)
        self.send_seq = 0
        self.recv_seq = 0
        self.max_plaintext = max_plaintext
        self.closed = False

    @classmethod
    def for_client(cls, keys: SessionKeys) -> "ChannelState":
        return cls(keys.client_to_server_key, keys.server_to_client_key)

    @classmethod
    def for_server(cls, keys: SessionKeys) -> "ChannelState":
        return cls(keys.server_to_client_key, keys.client_to_server_key)

    def close(self) -> None:
        self.closed = True

    def seal(self, plaintext: bytes) -> Record:
        if self.closed:
            raise ChannelClosed("channel is closed")
        if len(plaintext) > self.max_plaintext:
            raise Oversize(f"{len(plaintext)} bytes exceeds the {self.max_plaintext}-byte record limit")
        if self.send_seq >= MAX_SEQ:
            self.closed = True
            raise ChannelClosed("send sequence number exhausted")
        ct = self._send.encrypt(nonce_for(self.send_seq), bytes(plaintext), None)
        self.send_seq += 1
        return Record(ct)

    def open(self, record: "Record | bytes") -> bytes:
        if self.closed:
            raise ChannelClosed("channel is closed")
        try:
            if not isinstance(record, Record):
                record = Record.from_bytes(record)
            if self.recv_seq >= MAX_SEQ:
                raise AuthFailure("receive sequence number exhausted")
            if len(record.ciphertext) > self.max_plaintext + TAG_SIZE:
                raise AuthFailure("record too large")
            try:
                plaintext = self._recv.decrypt(nonce_for(self.recv_seq), record.ciphertext, None)
            except InvalidTag:
                raise AuthFailure("record failed authentication") from None
        except AuthFailure:
            self.closed = True
            raise
        self.recv_seq += 1
        return plaintext

    def seal_all(self, data: bytes) -> list[Record]:
        """Split ``data`` into maximum-size records; empty input gives one
        empty record."""
        if not data:
            return [self.seal(b"")]
        step = self.max_plaintext
        return [self.seal(data[i:i + step]) for i in range(0, len(data), step)]
