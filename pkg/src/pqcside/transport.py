"""Asyncio connections: plain TCP, and the secured tunnel built from the
handshake and record modules.

Both connection kinds expose ``send``/``recv`` so the HTTP layer and the
proxy relay code are agnostic to whether bytes are encrypted.  Every
blocking read accepts an :class:`ActiveTimer`; the timer is paused while
waiting on the network so that only local processing is accumulated.
"""

from __future__ import annotations

import asyncio
import logging
from contextlib import contextmanager
from typing import Iterator, Optional, Protocol

from . import handshake as hs
from .provider import busy_clock_ns
from .record import LENGTH_SIZE, MAX_PLAINTEXT, TAG_SIZE, AuthFailure, ChannelState, Record

log = logging.getLogger(__name__)

READ_CHUNK = 65536


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = str(address).rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host.strip("[]") or "127.0.0.1", int(port)


def format_address(sockname) -> str:
    return f"{sockname[0]}:{sockname[1]}"


class ActiveTimer:
    """Accumulates busy time for one unit of work, excluding network waits.

    An *armed* timer is not running yet; it starts the first time a
    :meth:`waiting` block returns, i.e. when the first byte arrives.
    Intervals are read from :func:`busy_clock_ns`, the thread's CPU time.
    """

    def __init__(self, armed: bool = False) -> None:
        self.elapsed_ns = 0
        self.armed = armed
        self.started_ns: Optional[int] = None
        self._since: Optional[int] = None

    @property
    def running(self) -> bool:
        return self._since is not None

    def start(self, at_ns: Optional[int] = None) -> None:
        now = busy_clock_ns() if at_ns is None else at_ns
        self.armed = False
        if self.started_ns is None:
            self.started_ns = now
        self._since = now

    def pause(self) -> None:
        if self._since is not None:
            self.elapsed_ns += busy_clock_ns() - self._since
            self._since = None

    @contextmanager
    def waiting(self) -> Iterator[None]:
        was_running = self.running
        self.pause()
        try:
            yield
        finally:
            if was_running or self.armed:
                self.start()

    def stop(self) -> int:
        self.pause()
        self.armed = False
        return self.elapsed_ns


class _NullTimer(ActiveTimer):
    @contextmanager
    def waiting(self) -> Iterator[None]:
        yield


NULL_TIMER = _NullTimer()


class Counters(Protocol):
    def incr(self, name: str, n: int = 1) -> None: ...


class _NoCounters:
    def incr(self, name: str, n: int = 1) -> None:
        pass


class Connection:
    """Plain TCP byte stream."""

    secure = False

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.reader = reader
        self.writer = writer

    @property
    def peername(self):
        return self.writer.get_extra_info("peername")

    async def send(self, data: bytes, timer: ActiveTimer = NULL_TIMER) -> None:
        self.writer.write(data)
        await self.writer.drain()

    async def recv(self, timer: ActiveTimer = NULL_TIMER) -> bytes:
        with timer.waiting():
            return await self.reader.read(READ_CHUNK)

    def abort(self) -> None:
        """Drop the connection with a reset rather than an orderly close."""
        transport = self.writer.transport
        if transport is not None and not transport.is_closing():
            transport.abort()

    async def close(self) -> None:
        if self.writer.is_closing():
            return
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


PlainConnection = Connection


class SecureConnection(Connection):
    """Record-protected stream after a completed handshake."""

    secure = True

    def __init__(self, reader, writer, channel: ChannelState, state: hs.HandshakeState,
                 counters: Optional[Counters] = None) -> None:
        super().__init__(reader, writer)
        self.channel = channel
        self.handshake = state
        self.counters = counters or _NoCounters()

    async def send(self, data: bytes, timer: ActiveTimer = NULL_TIMER) -> None:
        records = self.channel.seal_all(data)
        self.counters.incr("records_sealed", len(records))
        self.writer.write(b"".join(r.to_bytes() for r in records))
        await self.writer.drain()

    async def recv(self, timer: ActiveTimer = NULL_TIMER) -> bytes:
        """Next record's plaintext; ``b""`` on clean EOF between records.

        Empty records are skipped so that ``b""`` always means EOF.
        """
        while True:
            with timer.waiting():
                try:
                    header = await self.reader.readexactly(LENGTH_SIZE)
                except asyncio.IncompleteReadError as exc:
                    if exc.partial:
                        raise ConnectionError("truncated record header") from None
                    return b""
                n = int.from_bytes(header, "big")
                if n > MAX_PLAINTEXT + TAG_SIZE:
                    self.channel.close()
                    self.counters.incr("auth_failures")
                    raise AuthFailure("oversized record")
                try:
                    body = await self.reader.readexactly(n)
                except asyncio.IncompleteReadError:
                    raise ConnectionError("truncated record") from None
            try:
                plaintext = self.channel.open(Record(body))
            except AuthFailure:
                self.counters.incr("auth_failures")
                raise
            self.counters.incr("records_opened")
            if plaintext:
                return plaintext


# --- handshake drivers ----------------------------------------------------------


async def read_frame(reader: asyncio.StreamReader, timer: ActiveTimer = NULL_TIMER) -> bytes:
    with timer.waiting():
        header = await reader.readexactly(hs.FRAME_HEADER_SIZE)
        body = await reader.readexactly(int.from_bytes(header[1:4], "big"))
    return header + body


async def secure_client(reader, writer, config: hs.HandshakeConfig, *,
                        timer: ActiveTimer = NULL_TIMER,
                        counters: Optional[Counters] = None) -> SecureConnection:
    """Run the client side of the handshake over an open TCP stream."""
    state, ch = hs.client_start(config)
    writer.write(ch)
    await writer.drain()
    try:
        sh = await read_frame(reader, timer)
        state, ck, keys = hs.client_key_exchange(state, sh)
        writer.write(ck)
        await writer.drain()
        sf = await read_frame(reader, timer)
        state = hs.client_complete(state, sf)
    except asyncio.IncompleteReadError:
        raise hs.ProtocolError("peer closed during handshake") from None
    if counters:
        counters.incr("handshakes_performed")
    return SecureConnection(reader, writer, ChannelState.for_client(keys), state, counters)


async def secure_server(reader, writer, config: hs.HandshakeConfig, *,
                        timer: ActiveTimer = NULL_TIMER,
                        counters: Optional[Counters] = None) -> SecureConnection:
    """Run the server side of the handshake over an accepted TCP stream."""
    try:
        ch = await read_frame(reader, timer)
        state, sh = hs.server_respond(config, ch)
        writer.write(sh)
        await writer.drain()
        ck = await read_frame(reader, timer)
        state, sf, keys = hs.server_finish(state, ck)
    except asyncio.IncompleteReadError:
        raise hs.ProtocolError("peer closed during handshake") from None
    writer.write(sf)
    await writer.drain()
    if counters:
        counters.incr("handshakes_performed")
    return SecureConnection(reader, writer, ChannelState.for_server(keys), state, counters)


async def connect(address: str, timer: ActiveTimer = NULL_TIMER) -> Connection:
    host, port = parse_address(address)
    with timer.waiting():
        reader, writer = await asyncio.open_connection(host, port)
    return Connection(reader, writer)


async def connect_secure(address: str, config: hs.HandshakeConfig, *,
                         timer: ActiveTimer = NULL_TIMER,
                         counters: Optional[Counters] = None) -> SecureConnection:
    conn = await connect(address, timer)
    try:
        return await secure_client(conn.reader, conn.writer, config, timer=timer, counters=counters)
    except BaseException:
        conn.abort()
        raise
