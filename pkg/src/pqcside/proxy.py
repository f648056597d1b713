"""Sidecar proxy.

A client-side sidecar accepts plaintext from its co-located NF and carries
it to the peer (server-side) sidecar, which hands it to the service it
fronts.  In ``secure`` mode the hop between the two sidecars is the
handshake-plus-record tunnel; in ``passthrough`` mode it is plain TCP.

With ``http_aware`` on, each sidecar delimits request/response pairs and
records a :class:`ProxyTimingBreakdown` per transaction.  ``delta_t`` is
the time the sidecar spent working on the transaction, from the first
request byte it received to the last response byte it forwarded, minus
the intervals it spent waiting on its peer or upstream.  Handshake cost
belongs to the transaction that triggered (client side) or first used
(server side) the tunnel.
"""

from __future__ import annotations

import asyncio
import collections
import itertools
import json
import logging
import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from . import handshake as hs
from .certs import read_certificate, read_chain, read_key_file
from .http11 import MessageReader, ProtocolParseError, Request, json_response, serve_http
from .provider import DEFAULT_PROVIDER, CryptoProvider, CryptoTimings, SigKeyPair
from .record import AuthFailure, ChannelClosed
from .service import BindFailure, bind  # noqa: F401  (re-exported)
from .transport import (
    ActiveTimer,
    Connection,
    SecureConnection,
    connect,
    connect_secure,
    format_address,
    parse_address,
    secure_server,
)
from .wire import DecodeError

log = logging.getLogger(__name__)

RING_SIZE = 65536


class ConfigError(ValueError):
    pass


class CredentialError(ConfigError):
    pass


class UpstreamTimeout(TimeoutError):
    pass


@dataclass
class ProxyConfig:
    mode: str = "secure"
    role: str = "client-side"
    listen_address: str = "127.0.0.1:0"
    upstream_address: str = ""
    suite: Optional[str] = "pqc"
    chain_file: Optional[str] = None
    key_file: Optional[str] = None
    trust_root_file: Optional[str] = None
    session_policy: str = "pooled"
    http_aware: bool = True
    admin_address: Optional[str] = "127.0.0.1:0"
    mutual_auth: bool = False
    upstream_timeout_ms: int = 2000

    @classmethod
    def from_dict(cls, data: dict) -> "ProxyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown proxy config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ProxyConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.mode not in ("passthrough", "secure"):
            raise ConfigError(f"mode must be passthrough or secure, got {self.mode!r}")
        if self.role not in ("client-side", "server-side"):
            raise ConfigError(f"role must be client-side or server-side, got {self.role!r}")
        if self.session_policy not in ("per_transaction", "pooled"):
            raise ConfigError(f"session_policy must be per_transaction or pooled, got {self.session_policy!r}")
        if not self.upstream_address:
            raise ConfigError("upstream_address is required")
        for name in ("listen_address", "upstream_address") + (("admin_address",) if self.admin_address else ()):
            try:
                parse_address(getattr(self, name))
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from None
        if self.mode == "secure":
            if not self.suite:
                raise ConfigError("secure mode requires a suite")
            needs_chain = self.role == "server-side" or self.mutual_auth
            needs_root = self.role == "client-side" or self.mutual_auth
            if needs_chain and not (self.chain_file and self.key_file):
                raise ConfigError(f"{self.role} secure proxy requires chain_file and key_file")
            if needs_root and not self.trust_root_file:
                raise ConfigError(f"{self.role} secure proxy requires trust_root_file")

    def handshake_config(self, provider: CryptoProvider = DEFAULT_PROVIDER) -> hs.HandshakeConfig:
        """Load credential files and build the handshake parameters."""

        def load(reader, path):
            if not path:
                return None
            try:
                return reader(path)
            except FileNotFoundError:
                raise CredentialError(f"credential file not found: {path}") from None
            except (DecodeError, OSError) as exc:
                raise CredentialError(f"cannot parse credential file {path}: {exc}") from None

        key = load(read_key_file, self.key_file)
        if key is not None and not isinstance(key, SigKeyPair):
            raise CredentialError(f"{self.key_file} holds a KEM key, expected a signing key")
        try:
            provider.suite(self.suite)
        except KeyError:
            raise ConfigError(f"suite {self.suite!r} is not registered") from None
        return hs.HandshakeConfig(
            role=hs.Role.SERVER if self.role == "server-side" else hs.Role.CLIENT,
            suites=(self.suite,),
            trust_root=load(read_certificate, self.trust_root_file),
            local_chain=load(read_chain, self.chain_file),
            local_key=key,
            mutual_auth=self.mutual_auth,
            provider=provider,
        )


@dataclass
class ProxyTimingBreakdown:
    transaction_id: str
    side: str
    delta_t_us: int
    handshake_us: int = 0
    t_enc_us: int = 0
    t_sig_us: int = 0
    t_ver_us: int = 0

    @property
    def crypto_us(self) -> int:
        return self.t_enc_us + self.t_sig_us + self.t_ver_us


COUNTERS = (
    "tunnels_opened",
    "tunnels_closed",
    "handshakes_performed",
    "handshake_failures",
    "records_sealed",
    "records_opened",
    "auth_failures",
)


class TunnelMetrics:
    """Counters plus a ring buffer of per-transaction breakdowns.

    Updated from the proxy loop and read from the admin endpoint or other
    threads, hence the lock.
    """

    def __init__(self, ring_size: int = RING_SIZE) -> None:
        self._lock = threading.Lock()
        self._counters = dict.fromkeys(COUNTERS, 0)
        self._ring: collections.deque = collections.deque(maxlen=ring_size)
        self._dropped = 0

    def incr(self, name: str, n: int = 1) -> None:
        with self._lock:
            self._counters[name] += n

    def add_transaction(self, breakdown: ProxyTimingBreakdown) -> None:
        with self._lock:
            if len(self._ring) == self._ring.maxlen:
                self._dropped += 1
            self._ring.append(breakdown)

    def __getitem__(self, name: str) -> int:
        with self._lock:
            return self._counters[name]

    def snapshot(self, drain: bool = False) -> dict:
        with self._lock:
            snap = dict(self._counters)
            snap["transactions"] = [asdict(b) for b in self._ring]
            snap["dropped_transactions"] = self._dropped
            snap["drained"] = drain
            if drain:
                self._ring.clear()
        return snap


def _us(ns: int) -> int:
    return ns // 1000


def _breakdown(tid: str, side: str, active_ns: int, hs_state: Optional[hs.HandshakeState]) -> ProxyTimingBreakdown:
    crypto = hs_state.timings if hs_state is not None else CryptoTimings()
    return ProxyTimingBreakdown(
        tid,
        side,
        _us(active_ns),
        _us(hs_state.duration_ns) if hs_state is not None else 0,
        _us(crypto.kem_ns),
        _us(crypto.sign_ns),
        _us(crypto.verify_ns),
    )


@dataclass
class _Tunnel:
    conn: Connection
    reader: MessageReader
    fresh: bool = True

    @property
    def handshake(self) -> Optional[hs.HandshakeState]:
        return self.conn.handshake if isinstance(self.conn, SecureConnection) else None


class Sidecar:
    def __init__(self, config: ProxyConfig, provider: CryptoProvider = DEFAULT_PROVIDER) -> None:
        config.validate()
        self.config = config
        self.metrics = TunnelMetrics()
        self.hs_config = config.handshake_config(provider) if config.mode == "secure" else None
        if self.hs_config is not None:
            try:
                self.hs_config.check()
            except hs.BadConfig as exc:
                raise ConfigError(str(exc)) from None
        self.side = "client" if config.role == "client-side" else "server"
        self.address: Optional[str] = None
        self.admin_address: Optional[str] = None
        self._servers: list = []
        self._idle: list[_Tunnel] = []
        self._ids = itertools.count(1)
        self._tasks: set = set()
        self._timeout = config.upstream_timeout_ms / 1000

    # lifecycle

    async def start(self) -> None:
        handler = self._on_local if self.side == "client" else self._on_tunnel
        self._servers.append(await self._bind(self.config.listen_address, handler))
        self.address = format_address(self._servers[0].sockets[0].getsockname())
        if self.config.admin_address:
            admin = await self._bind(self.config.admin_address, self._on_admin)
            self._servers.append(admin)
            self.admin_address = format_address(admin.sockets[0].getsockname())
        log.info("%s %s proxy on %s -> %s", self.config.role, self.config.mode, self.address,
                 self.config.upstream_address)

    async def _bind(self, address: str, handler):
        return await bind(self._tracked(handler), address)

    def _tracked(self, handler):
        async def run(reader, writer):
            task = asyncio.current_task()
            self._tasks.add(task)
            try:
                await handler(reader, writer)
            except Exception:
                log.exception("connection handler failed")
                writer.transport.abort()
            finally:
                self._tasks.discard(task)

        return run

    async def stop(self) -> None:
        for server in self._servers:
            server.close()
        for tunnel in self._idle:
            tunnel.conn.abort()
        self._idle.clear()
        for task in list(self._tasks):
            task.cancel()
        for server in self._servers:
            await server.wait_closed()

    def describe(self) -> dict:
        return {"listen": self.address, "admin": self.admin_address, "role": self.config.role,
                "mode": self.config.mode}

    def metrics_snapshot(self, drain: bool = False) -> dict:
        return self.metrics.snapshot(drain)

    # admin endpoint

    async def _on_admin(self, reader, writer) -> None:
        def handle(req: Request) -> bytes:
            if req.method != "GET":
                return json_response(405, {"error": "method not allowed"})
            if req.path == "/metrics":
                drain = req.query.get("drain", ["0"])[0] in ("1", "true")
                return json_response(200, self.metrics.snapshot(drain))
            if req.path == "/healthz":
                return json_response(200, {"status": "ok", **self.describe()})
            return json_response(404, {"error": "unknown resource"})

        await serve_http(Connection(reader, writer), handle)

    # tunnels (client side)

    async def _open_tunnel(self, timer: ActiveTimer) -> _Tunnel:
        if self.hs_config is not None:
            try:
                conn = await connect_secure(
                    self.config.upstream_address, self.hs_config, timer=timer, counters=self.metrics
                )
            except hs.HandshakeError as exc:
                self.metrics.incr("handshake_failures")
                log.warning("tunnel handshake to %s failed: %s", self.config.upstream_address, exc)
                raise
        else:
            conn = await connect(self.config.upstream_address, timer)
        self.metrics.incr("tunnels_opened")
        return _Tunnel(conn, MessageReader(conn))

    async def _acquire(self, timer: ActiveTimer) -> _Tunnel:
        if self.config.session_policy == "pooled":
            while self._idle:
                tunnel = self._idle.pop()
                if not tunnel.conn.writer.is_closing() and not tunnel.conn.reader.at_eof():
                    tunnel.fresh = False
                    return tunnel
                await self._close_tunnel(tunnel)
        return await self._open_tunnel(timer)

    async def _release(self, tunnel: _Tunnel) -> None:
        if self.config.session_policy == "pooled":
            self._idle.append(tunnel)
        else:
            await self._close_tunnel(tunnel)

    async def _close_tunnel(self, tunnel: _Tunnel, abort: bool = False) -> None:
        self.metrics.incr("tunnels_closed")
        if abort:
            tunnel.conn.abort()
        else:
            await tunnel.conn.close()

    # client side

    async def _on_local(self, reader, writer) -> None:
        local = Connection(reader, writer)
        if self.config.http_aware:
            await self._client_http(local)
        else:
            await self._client_raw(local)

    async def _client_http(self, local: Connection) -> None:
        lreader = MessageReader(local)
        try:
            while True:
                timer = ActiveTimer(armed=True)
                try:
                    req = await lreader.read_request(timer)
                except ProtocolParseError as exc:
                    log.info("rejecting malformed request from local client: %s", exc)
                    local.abort()
                    return
                if req is None:
                    return
                tid = req.headers.get("x-transaction-id") or f"{self.side}-{next(self._ids)}"
                try:
                    tunnel = await self._acquire(timer)
                except (hs.HandshakeError, OSError):
                    local.abort()
                    return
                try:
                    await tunnel.conn.send(req.raw, timer)
                    resp = await asyncio.wait_for(tunnel.reader.read_response(timer), self._timeout)
                    if resp is None:
                        raise ConnectionError("tunnel closed before the response")
                except asyncio.TimeoutError:
                    log.warning("upstream timeout for %s", tid)
                    await self._close_tunnel(tunnel, abort=True)
                    await local.send(json_response(504, {"error": "upstream timeout"}))
                    continue
                except (AuthFailure, ChannelClosed, ConnectionError, ProtocolParseError,
                        asyncio.IncompleteReadError) as exc:
                    log.warning("tunnel failed during %s: %r", tid, exc)
                    await self._close_tunnel(tunnel, abort=True)
                    local.abort()
                    return
                await local.send(resp.raw)
                active = timer.stop()
                self.metrics.add_transaction(
                    _breakdown(tid, "client", active, tunnel.handshake if tunnel.fresh else None)
                )
                await self._release(tunnel)
        except (ConnectionError, asyncio.IncompleteReadError):
            local.abort()
        finally:
            await local.close()

    async def _client_raw(self, local: Connection) -> None:
        try:
            tunnel = await self._open_tunnel(ActiveTimer())
        except (hs.HandshakeError, OSError):
            local.abort()
            return
        await self._splice(local, tunnel.conn)
        self.metrics.incr("tunnels_closed")

    # server side

    async def _on_tunnel(self, reader, writer) -> None:
        self.metrics.incr("tunnels_opened")
        hs_timer = ActiveTimer(armed=True)
        conn: Connection = Connection(reader, writer)
        if self.hs_config is not None:
            try:
                conn = await secure_server(reader, writer, self.hs_config, timer=hs_timer, counters=self.metrics)
            except (hs.HandshakeError, asyncio.IncompleteReadError, ConnectionError) as exc:
                self.metrics.incr("handshake_failures")
                self.metrics.incr("tunnels_closed")
                log.warning("inbound handshake failed: %r", exc)
                conn.abort()
                return
        try:
            if self.config.http_aware:
                await self._server_http(conn, hs_timer.stop())
            else:
                upstream = await connect(self.config.upstream_address)
                await self._splice(conn, upstream)
        except OSError as exc:
            log.warning("upstream %s unavailable: %s", self.config.upstream_address, exc)
            conn.abort()
        finally:
            self.metrics.incr("tunnels_closed")

    async def _server_http(self, tunnel: Connection, pending_hs_ns: int) -> None:
        treader = MessageReader(tunnel)
        hs_state = tunnel.handshake if isinstance(tunnel, SecureConnection) else None
        upstream: Optional[Connection] = None
        ureader: Optional[MessageReader] = None
        try:
            while True:
                timer = ActiveTimer(armed=True)
                try:
                    req = await treader.read_request(timer)
                except (AuthFailure, ChannelClosed, ProtocolParseError) as exc:
                    log.warning("closing tunnel: %r", exc)
                    tunnel.abort()
                    return
                if req is None:
                    return
                tid = req.headers.get("x-transaction-id") or f"{self.side}-{next(self._ids)}"
                try:
                    if upstream is None:
                        upstream = await connect(self.config.upstream_address, timer)
                        ureader = MessageReader(upstream)
                    await upstream.send(req.raw, timer)
                    resp = await asyncio.wait_for(ureader.read_response(timer), self._timeout)
                    if resp is None:
                        raise ConnectionError("upstream closed before the response")
                    raw = resp.raw
                except asyncio.TimeoutError:
                    raw = json_response(504, {"error": "upstream timeout"})
                    upstream, ureader = None, None
                except (OSError, ConnectionError, ProtocolParseError) as exc:
                    log.warning("upstream failure for %s: %r", tid, exc)
                    raw = json_response(502, {"error": "upstream unavailable"})
                    if upstream is not None:
                        upstream.abort()
                    upstream, ureader = None, None
                await tunnel.send(raw, timer)
                active = timer.stop() + pending_hs_ns
                self.metrics.add_transaction(_breakdown(tid, "server", active, hs_state))
                pending_hs_ns, hs_state = 0, None
        except (ConnectionError, asyncio.IncompleteReadError):
            tunnel.abort()
        finally:
            if upstream is not None:
                await upstream.close()
            await tunnel.close()

    # raw relay

    async def _splice(self, a: Connection, b: Connection) -> None:
        """Relay both directions until both have ended; abort both on error."""

        async def pump(src: Connection, dst: Connection) -> None:
            while True:
                data = await src.recv()
                if not data:
                    break
                await dst.send(data)
            if dst.writer.can_write_eof() and not dst.writer.is_closing():
                dst.writer.write_eof()

        tasks = [asyncio.ensure_future(pump(a, b)), asyncio.ensure_future(pump(b, a))]
        try:
            await asyncio.gather(*tasks)
        except (AuthFailure, ChannelClosed, ConnectionError, OSError, asyncio.IncompleteReadError) as exc:
            log.info("relay ended: %r", exc)
            a.abort()
            b.abort()
        finally:
            for t in tasks:
                t.cancel()
            await a.close()
            await b.close()


def run_proxy(config: ProxyConfig, provider: CryptoProvider = DEFAULT_PROVIDER):
    """Start a sidecar on a background thread and return its handle."""
    from .service import ServiceHandle

    return ServiceHandle(Sidecar(config, provider), f"proxy-{config.role}").start()
