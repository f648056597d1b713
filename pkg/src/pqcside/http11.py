"""The HTTP/1.1 subset spoken on the SBI and by the admin/wrapper endpoints.

Supported: a request line or status line, header fields, and a body whose
size is given by ``Content-Length`` (absent means empty).  Chunked transfer
coding, continuation lines and HTTP/2 are rejected.  One request is
followed by exactly one response on a connection; connections are kept
alive until either side closes them.
"""

from __future__ import annotations

import asyncio
import json
import logging
import re
import time
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Optional, Union
from urllib.parse import parse_qs, urlsplit

from .transport import NULL_TIMER, ActiveTimer, Connection

log = logging.getLogger(__name__)

MAX_HEAD = 16384
MAX_BODY = 8 * 1024 * 1024

_TOKEN = re.compile(rb"^[!#$%&'*+.^_`|~0-9A-Za-z-]+$")
_TARGET = re.compile(rb"^/[\x21-\x7e]*$")

REASONS = {
    200: "OK", 201: "Created", 204: "No Content", 400: "Bad Request",
    404: "Not Found", 405: "Method Not Allowed", 500: "Internal Server Error",
    502: "Bad Gateway", 504: "Gateway Timeout",
}


class ProtocolParseError(ValueError):
    pass


@dataclass
class Request:
    method: str
    target: str
    headers: dict[str, str]
    body: bytes
    raw: bytes = field(repr=False)
    first_byte_ns: Optional[int] = None

    @property
    def path(self) -> str:
        return urlsplit(self.target).path

    @property
    def query(self) -> dict[str, list[str]]:
        return parse_qs(urlsplit(self.target).query)

    def json(self):
        return json.loads(self.body.decode("utf-8"))


@dataclass
class Response:
    status: int
    reason: str
    headers: dict[str, str]
    body: bytes
    raw: bytes = field(repr=False)

    def json(self):
        return json.loads(self.body.decode("utf-8")) if self.body else None


def _parse_headers(lines: list[bytes]) -> dict[str, str]:
    headers: dict[str, str] = {}
    for line in lines:
        name, sep, value = line.partition(b":")
        if not sep or not _TOKEN.match(name):
            raise ProtocolParseError(f"malformed header line {line[:60]!r}")
        headers[name.decode("ascii").lower()] = value.strip().decode("latin-1")
    if "transfer-encoding" in headers:
        raise ProtocolParseError("transfer-encoding is not supported")
    return headers


def _content_length(headers: dict[str, str]) -> int:
    value = headers.get("content-length", "0")
    if not value.isdigit():
        raise ProtocolParseError(f"bad Content-Length {value!r}")
    n = int(value)
    if n > MAX_BODY:
        raise ProtocolParseError("body too large")
    return n


def parse_request_head(head: bytes) -> tuple[str, str, dict[str, str]]:
    lines = head.split(b"\r\n")
    parts = lines[0].split(b" ")
    if len(parts) != 3 or not _TOKEN.match(parts[0]) or not _TARGET.match(parts[1]) \
            or parts[2] != b"HTTP/1.1":
        raise ProtocolParseError(f"malformed request line {lines[0][:80]!r}")
    return parts[0].decode("ascii"), parts[1].decode("ascii"), _parse_headers(lines[1:])


def parse_response_head(head: bytes) -> tuple[int, str, dict[str, str]]:
    lines = head.split(b"\r\n")
    version, _, rest = lines[0].partition(b" ")
    code, _, reason = rest.partition(b" ")
    if version != b"HTTP/1.1" or len(code) != 3 or not code.isdigit():
        raise ProtocolParseError(f"malformed status line {lines[0][:80]!r}")
    return int(code), reason.decode("latin-1"), _parse_headers(lines[1:])


class MessageReader:
    """Incrementally pulls whole HTTP messages off a :class:`Connection`."""

    def __init__(self, conn: Connection) -> None:
        self.conn = conn
        self._buf = bytearray()

    async def _fill(self, timer: ActiveTimer) -> bool:
        chunk = await self.conn.recv(timer)
        if not chunk:
            return False
        self._buf += chunk
        return True

    async def _read(self, timer: ActiveTimer):
        """Return ``(head, body_offset, first_byte_ns)``, or ``None`` on EOF
        before any byte of a new message."""
        first_ns = None
        if self._buf:
            first_ns = time.perf_counter_ns()
        while True:
            end = self._buf.find(b"\r\n\r\n")
            if end >= 0:
                break
            if len(self._buf) > MAX_HEAD:
                raise ProtocolParseError("header section too large")
            if not await self._fill(timer):
                if self._buf:
                    raise ProtocolParseError("connection closed mid-message")
                return None
            if first_ns is None:
                first_ns = time.perf_counter_ns()
        head = bytes(self._buf[:end])
        return head, end + 4, first_ns

    async def _body(self, start: int, length: int, timer: ActiveTimer) -> tuple[bytes, bytes]:
        while len(self._buf) < start + length:
            if not await self._fill(timer):
                raise ProtocolParseError("connection closed mid-body")
        raw = bytes(self._buf[:start + length])
        del self._buf[:start + length]
        return raw[start:], raw

    async def read_request(self, timer: ActiveTimer = NULL_TIMER) -> Optional[Request]:
        got = await self._read(timer)
        if got is None:
            return None
        head, start, first_ns = got
        method, target, headers = parse_request_head(head)
        body, raw = await self._body(start, _content_length(headers), timer)
        return Request(method, target, headers, body, raw, first_ns)

    async def read_response(self, timer: ActiveTimer = NULL_TIMER) -> Optional[Response]:
        got = await self._read(timer)
        if got is None:
            return None
        head, start, _ = got
        status, reason, headers = parse_response_head(head)
        length = 0 if status in (204, 304) or 100 <= status < 200 else _content_length(headers)
        body, raw = await self._body(start, length, timer)
        return Response(status, reason, headers, body, raw)


def build_request(method: str, target: str, host: str, body: bytes = b"",
                  content_type: str = "application/json", extra: Optional[dict] = None) -> bytes:
    lines = [f"{method} {target} HTTP/1.1", f"Host: {host}"]
    if body:
        lines.append(f"Content-Type: {content_type}")
    lines.append(f"Content-Length: {len(body)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1") + body


def build_response(status: int, body: bytes = b"", content_type: str = "application/json") -> bytes:
    lines = [f"HTTP/1.1 {status} {REASONS.get(status, 'Unknown')}"]
    if status == 204:
        body = b""
    else:
        if body:
            lines.append(f"Content-Type: {content_type}")
        lines.append(f"Content-Length: {len(body)}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1") + body


def json_response(status: int, obj=None) -> bytes:
    body = b"" if obj is None else json.dumps(obj, separators=(",", ":")).encode("utf-8")
    return build_response(status, body)


Handler = Callable[[Request], Union[bytes, Awaitable[bytes]]]


async def serve_http(conn: Connection, handler: Handler) -> None:
    """Answer requests on ``conn`` until the peer closes it."""
    reader = MessageReader(conn)
    try:
        while True:
            try:
                req = await reader.read_request()
            except ProtocolParseError as exc:
                log.debug("bad request from %s: %s", conn.peername, exc)
                await conn.send(json_response(400, {"error": str(exc)}))
                break
            if req is None:
                break
            try:
                resp = handler(req)
                if asyncio.iscoroutine(resp):
                    resp = await resp
            except Exception as exc:  # keep serving other requests
                log.exception("handler failed for %s %s", req.method, req.target)
                resp = json_response(500, {"error": type(exc).__name__})
            await conn.send(resp)
    except (ConnectionError, asyncio.IncompleteReadError):
        pass
    finally:
        await conn.close()


async def request(conn: Connection, reader: MessageReader, method: str, target: str,
                  body: bytes = b"", host: str = "localhost", extra: Optional[dict] = None) -> Response:
    """One request/response exchange on an existing connection."""
    await conn.send(build_request(method, target, host, body, extra=extra))
    resp = await reader.read_response()
    if resp is None:
        raise ConnectionError("connection closed before response")
    return resp
