"""Test fixtures that run as background services: echo servers and a TCP tap."""

from __future__ import annotations

import asyncio
import http.client
import json
import socket
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from pqcside import handshake as hs
from pqcside.certs import generate_credentials, write_credentials
from pqcside.http11 import build_response, serve_http
from pqcside.provider import DEFAULT_PROVIDER, Alg
from pqcside.proxy import ProxyConfig, Sidecar
from pqcside.service import ServiceHandle, bind
from pqcside.transport import Connection, format_address, parse_address


class EchoServer:
    """Raw TCP echo."""

    def __init__(self) -> None:
        self.address: Optional[str] = None
        self._server = None

    async def start(self) -> None:
        self._server = await bind(self._on_conn, "127.0.0.1:0")
        self.address = format_address(self._server.sockets[0].getsockname())

    async def stop(self) -> None:
        self._server.close()
        await self._server.wait_closed()

    def describe(self) -> dict:
        return {"listen": self.address}

    async def _on_conn(self, reader, writer) -> None:
        try:
            while data := await reader.read(65536):
                writer.write(data)
                await writer.drain()
            writer.write_eof()
        except ConnectionError:
            pass
        finally:
            writer.close()


class HttpEchoServer(EchoServer):
    """Answers every request with 200 and the request body."""

    async def _on_conn(self, reader, writer) -> None:
        await serve_http(Connection(reader, writer),
                         lambda req: build_response(200, req.body, "application/octet-stream"))


class SlowHttpServer(EchoServer):
    """Accepts requests and never answers."""

    async def _on_conn(self, reader, writer) -> None:
        try:
            await reader.read()
        finally:
            writer.close()


class Tap:
    """Man-in-the-middle TCP forwarder that records both directions.

    ``flip_c2s_at`` flips one bit of the client-to-server stream at that
    byte offset (counted over the whole connection), simulating an active
    attacker on the wire.
    """

    def __init__(self, target: str, flip_c2s_at: Optional[int] = None) -> None:
        self.target = target
        self.flip_c2s_at = flip_c2s_at
        self.address: Optional[str] = None
        self.c2s = bytearray()
        self.s2c = bytearray()
        self._server = None
        self._lock = threading.Lock()

    async def start(self) -> None:
        self._server = await bind(self._on_conn, "127.0.0.1:0")
        self.address = format_address(self._server.sockets[0].getsockname())

    async def stop(self) -> None:
        self._server.close()
        await self._server.wait_closed()

    def describe(self) -> dict:
        return {"listen": self.address}

    async def _on_conn(self, c_reader, c_writer) -> None:
        host, port = parse_address(self.target)
        s_reader, s_writer = await asyncio.open_connection(host, port)

        async def pump(src, dst, log: bytearray, flip: bool) -> None:
            try:
                while data := await src.read(65536):
                    with self._lock:
                        start = len(log)
                        if flip and self.flip_c2s_at is not None and start <= self.flip_c2s_at < start + len(data):
                            buf = bytearray(data)
                            buf[self.flip_c2s_at - start] ^= 0x01
                            data = bytes(buf)
                        log += data
                    dst.write(data)
                    await dst.drain()
                # forward the half-close so the far end still gets to answer
                if dst.can_write_eof():
                    dst.write_eof()
            except ConnectionError:
                dst.close()

        try:
            await asyncio.gather(pump(c_reader, s_writer, self.c2s, True), pump(s_reader, c_writer, self.s2c, False))
        finally:
            s_writer.close()
            c_writer.close()


def start(service) -> ServiceHandle:
    return ServiceHandle(service).start()


def make_credentials(out_dir: Path, suite: str, ca_level: str = "65", subjects=("nrf",), **kw) -> Path:
    sig_alg = DEFAULT_PROVIDER.suite(suite).sig_alg
    ca_alg = Alg.parse(f"ML-DSA-{ca_level}") if suite == "pqc" else sig_alg
    write_credentials(generate_credentials(list(subjects), ca_alg=ca_alg, entity_alg=sig_alg, **kw), out_dir)
    return out_dir


def proxy_pair_configs(creds: Optional[Path], suite: Optional[str], upstream: str, *,
                       session_policy: str = "pooled", http_aware: bool = True,
                       subject: str = "nrf") -> tuple[ProxyConfig, ProxyConfig]:
    """Server-side and client-side configs; the client's upstream is filled
    in once the server-side proxy is bound."""
    mode = "secure" if suite else "passthrough"
    common = dict(mode=mode, suite=suite, session_policy=session_policy, http_aware=http_aware)
    server = dict(common, role="server-side", upstream_address=upstream)
    client = dict(common, role="client-side", upstream_address="127.0.0.1:1")
    if suite:
        server.update(chain_file=str(creds / f"{subject}.chain"), key_file=str(creds / f"{subject}.key"))
        client.update(trust_root_file=str(creds / "root.cert"))
    return ProxyConfig.from_dict(server), ProxyConfig.from_dict(client)


def write_config(path: Path, cfg: ProxyConfig) -> Path:
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(1 << 20, n - len(buf)))
        if not chunk:
            raise ConnectionError(f"closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


@dataclass(frozen=True)
class RecordedHandshake:
    """One honest handshake with the intermediate states needed to replay
    each message against the legitimate peer."""

    client_cfg: hs.HandshakeConfig
    server_cfg: hs.HandshakeConfig
    client_hello_state: hs.HandshakeState
    server_hello_state: hs.HandshakeState
    client_key_state: hs.HandshakeState
    frames: tuple[bytes, bytes, bytes, bytes]


def record_handshake(client_cfg: hs.HandshakeConfig, server_cfg: hs.HandshakeConfig) -> RecordedHandshake:
    cs0, ch = hs.client_start(client_cfg)
    ss0, sh = hs.server_respond(server_cfg, ch)
    cs1, ck, _ = hs.client_key_exchange(cs0, sh)
    _, sf, _ = hs.server_finish(ss0, ck)
    hs.client_complete(cs1, sf)
    return RecordedHandshake(client_cfg, server_cfg, cs0, ss0, cs1, (ch, sh, ck, sf))


def flip_bit(data: bytes, bit: int) -> bytes:
    buf = bytearray(data)
    buf[bit // 8] ^= 1 << (bit % 8)
    return bytes(buf)


def tamper_rejected(rec: RecordedHandshake, index: int, bit: int) -> bool:
    """Deliver frame ``index`` with one bit flipped to the honest receiver and
    carry on with the protocol; True if either side aborts."""
    msg = flip_bit(rec.frames[index], bit)
    try:
        if index == 0:
            _, sh = hs.server_respond(rec.server_cfg, msg)
            hs.client_key_exchange(rec.client_hello_state, sh)
        elif index == 1:
            hs.client_key_exchange(rec.client_hello_state, msg)
        elif index == 2:
            hs.server_finish(rec.server_hello_state, msg)
        else:
            hs.client_complete(rec.client_key_state, msg)
    except hs.HandshakeError:
        return True
    return False


def handshake_configs(suite: str, *, ca_level: str = "65", now: Optional[float] = None, **kw):
    """In-memory client and server configs for ``suite`` with fresh credentials."""
    sig_alg = DEFAULT_PROVIDER.suite(suite).sig_alg
    ca_alg = Alg.parse(f"ML-DSA-{ca_level}") if suite == "pqc" else sig_alg
    creds = generate_credentials(["nrf", "amf"], ca_alg=ca_alg, entity_alg=sig_alg)
    skeys, schain = creds.entities["nrf"]
    ckeys, cchain = creds.entities["amf"]
    client = hs.HandshakeConfig(hs.Role.CLIENT, (suite,), creds.root, cchain, ckeys, now=now, **kw)
    server = hs.HandshakeConfig(hs.Role.SERVER, (suite,), creds.root, schain, skeys, now=now, **kw)
    return client, server


class ProxyPair:
    """Upstream service, server-side sidecar, optional tap and client-side
    sidecar, each on its own background loop."""

    def __init__(self, server_cfg: ProxyConfig, client_cfg: ProxyConfig, upstream, *,
                 tap: bool = False, flip_c2s_at: Optional[int] = None) -> None:
        self.upstream = start(upstream)
        self.server = start(Sidecar(replace(server_cfg, upstream_address=self.upstream.address)))
        self.tap = start(Tap(self.server.address, flip_c2s_at)) if tap or flip_c2s_at is not None else None
        target = (self.tap or self.server).address
        self.client = start(Sidecar(replace(client_cfg, upstream_address=target)))

    @property
    def address(self) -> str:
        return self.client.address

    def snapshots(self) -> tuple[dict, dict]:
        """Client and server metrics, read on each proxy's own loop so every
        response already delivered has been recorded."""
        return tuple(h.call_soon(h.service.metrics_snapshot) for h in (self.client, self.server))

    def settled(self, done, timeout: float = 5.0) -> tuple[dict, dict]:
        """Poll :meth:`snapshots` until ``done(client, server)`` holds.

        Failure paths finish asynchronously: a peer can see the tunnel close
        before the far side has booked the failure.  Returns the last
        snapshots either way so the caller's assertion reports them.
        """
        deadline = time.monotonic() + timeout
        while True:
            snaps = self.snapshots()
            if done(*snaps) or time.monotonic() > deadline:
                return snaps
            time.sleep(0.01)

    def close(self) -> None:
        for h in (self.client, self.tap, self.server, self.upstream):
            if h is not None:
                h.close()

    def __enter__(self) -> "ProxyPair":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def raw_round_trip(address: str, payload: bytes, timeout: float = 10.0) -> bytes:
    """Send ``payload``, half-close, and read until the peer closes."""
    host, port = parse_address(address)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(payload)
        sock.shutdown(socket.SHUT_WR)
        chunks = []
        while chunk := sock.recv(1 << 20):
            chunks.append(chunk)
    return b"".join(chunks)


def http_post(conn: http.client.HTTPConnection, body: bytes, tid: Optional[str] = None) -> tuple[int, bytes]:
    headers = {"Content-Type": "application/octet-stream"}
    if tid:
        headers["X-Transaction-Id"] = tid
    conn.request("POST", "/echo", body, headers)
    resp = conn.getresponse()
    return resp.status, resp.read()
