"""Miniature service-based control plane: an NRF and NF client roles.

The NRF keeps NF profiles in memory and answers three procedures:

* Register:  ``PUT /nnrf-nfm/v1/nf-instances/{id}`` with a profile body,
  201 on create, 200 on update.
* Discover:  ``GET /nnrf-disc/v1/nf-instances?target-nf-type=T``, 200 with
  ``{"nfInstances": [...]}`` (possibly empty).
* Heartbeat: ``PATCH /nnrf-nfm/v1/nf-instances/{id}``, 204 for a known id,
  404 otherwise.

Path names follow 3GPP Nnrf naming for readability only.
"""

from __future__ import annotations

import asyncio
import csv
import enum
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from . import handshake as hs
from .http11 import MessageReader, ProtocolParseError, Request, build_request, json_response, serve_http
from .service import bind
from .transport import Connection, connect, connect_secure, format_address, secure_server

log = logging.getLogger(__name__)

NF_TYPES = ("AMF", "AUSF", "UDM", "SMF")
NFM_PREFIX = "/nnrf-nfm/v1/nf-instances/"
DISC_PATH = "/nnrf-disc/v1/nf-instances"
DEFAULT_TIMEOUT_MS = 2000
TXN_HEADER = "X-Transaction-Id"

# which NF type each role looks up during Discover
DISCOVERY_TARGET = {"AMF": "AUSF", "AUSF": "UDM", "UDM": "AMF", "SMF": "AMF"}

_ID_NAMESPACE = uuid.UUID("5f0c3a4e-9d7b-4c61-8a51-3f1b0d6e2a90")


def instance_id(role: str) -> str:
    """Stable NF instance id per role, so re-registration updates in place."""
    return str(uuid.uuid5(_ID_NAMESPACE, role.upper()))


@dataclass
class NfProfile:
    nf_instance_id: str
    nf_type: str
    status: str = "REGISTERED"
    heartbeat_timer_s: int = 10

    def to_json(self) -> dict:
        return {
            "nfInstanceId": self.nf_instance_id,
            "nfType": self.nf_type,
            "nfStatus": self.status,
            "heartBeatTimer": self.heartbeat_timer_s,
        }

    @classmethod
    def from_json(cls, obj) -> "NfProfile":
        if not isinstance(obj, dict):
            raise ValueError("profile must be a JSON object")
        profile = cls(
            str(obj["nfInstanceId"]),
            str(obj["nfType"]),
            str(obj.get("nfStatus", "REGISTERED")),
            int(obj.get("heartBeatTimer", 10)),
        )
        if profile.nf_type not in NF_TYPES:
            raise ValueError(f"unsupported nfType {profile.nf_type!r}")
        if profile.status not in ("REGISTERED", "SUSPENDED"):
            raise ValueError(f"unsupported nfStatus {profile.status!r}")
        uuid.UUID(profile.nf_instance_id)
        return profile


class NrfStore:
    """Profile store; the only shared mutable state in the NRF."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._profiles: dict[str, NfProfile] = {}

    def upsert(self, profile: NfProfile) -> bool:
        """Returns True if the profile was newly created."""
        with self._lock:
            created = profile.nf_instance_id not in self._profiles
            self._profiles[profile.nf_instance_id] = profile
            return created

    def heartbeat(self, nf_id: str, status: Optional[str] = None) -> bool:
        with self._lock:
            profile = self._profiles.get(nf_id)
            if profile is None:
                return False
            if status:
                profile.status = status
            return True

    def discover(self, nf_type: Optional[str]) -> list[NfProfile]:
        with self._lock:
            return [p for p in self._profiles.values() if nf_type is None or p.nf_type == nf_type]

    def ids(self) -> set[str]:
        with self._lock:
            return set(self._profiles)

    def __len__(self) -> int:
        with self._lock:
            return len(self._profiles)


class NrfService:
    """The NRF.  With ``secure`` set, every accepted connection first runs
    the server side of the tunnel handshake (native secure mode)."""

    def __init__(self, bind_address: str = "127.0.0.1:0", secure: Optional[hs.HandshakeConfig] = None) -> None:
        self.bind_address = bind_address
        self.secure = secure
        self.store = NrfStore()
        self.address: Optional[str] = None
        self._server: Optional[asyncio.base_events.Server] = None

    async def start(self) -> None:
        self._server = await bind(self._on_connection, self.bind_address)
        self.address = format_address(self._server.sockets[0].getsockname())
        log.info("NRF listening on %s (%s)", self.address, "secure" if self.secure else "plain")

    async def stop(self) -> None:
        if self._server:
            self._server.close()
            await self._server.wait_closed()

    def describe(self) -> dict:
        return {"listen": self.address}

    async def _on_connection(self, reader, writer) -> None:
        conn = Connection(reader, writer)
        if self.secure is not None:
            try:
                conn = await secure_server(reader, writer, self.secure)
            except (hs.HandshakeError, ConnectionError) as exc:
                log.warning("handshake from %s failed: %s", conn.peername, exc)
                conn.abort()
                return
        await serve_http(conn, self.handle)

    def handle(self, req: Request) -> bytes:
        path = req.path
        if path.startswith(NFM_PREFIX):
            nf_id = path[len(NFM_PREFIX):]
            if req.method == "PUT":
                return self._register(nf_id, req)
            if req.method == "PATCH":
                return self._heartbeat(nf_id, req)
            return json_response(405, {"error": "method not allowed"})
        if path == DISC_PATH:
            if req.method != "GET":
                return json_response(405, {"error": "method not allowed"})
            target = req.query.get("target-nf-type", [None])[0]
            found = self.store.discover(target)
            return json_response(200, {"nfInstances": [p.to_json() for p in found]})
        return json_response(404, {"error": "unknown resource"})

    def _register(self, nf_id: str, req: Request) -> bytes:
        try:
            profile = NfProfile.from_json(req.json())
        except (ValueError, KeyError, TypeError) as exc:
            return json_response(400, {"error": f"invalid profile: {exc}"})
        if profile.nf_instance_id != nf_id:
            return json_response(400, {"error": "nfInstanceId does not match the resource path"})
        created = self.store.upsert(profile)
        return json_response(201 if created else 200, profile.to_json())

    def _heartbeat(self, nf_id: str, req: Request) -> bytes:
        status = None
        if req.body:
            try:
                status = req.json().get("nfStatus")
            except (ValueError, AttributeError):
                return json_response(400, {"error": "invalid heartbeat body"})
        if not self.store.heartbeat(nf_id, status):
            return json_response(404, {"error": "unknown nf instance"})
        return json_response(204)


def run_nrf(bind_address: str = "127.0.0.1:0", secure: Optional[hs.HandshakeConfig] = None):
    """Start an NRF on a background thread and return its handle."""
    from .service import ServiceHandle

    return ServiceHandle(NrfService(bind_address, secure), "nrf").start()


# --- workload ------------------------------------------------------------------


class TransactionKind(str, enum.Enum):
    REGISTER = "Register"
    DISCOVER = "Discover"
    HEARTBEAT = "Heartbeat"


KINDS = tuple(TransactionKind)


@dataclass(frozen=True)
class SbiTransaction:
    kind: TransactionKind
    nf_role: str
    method: str
    path: str
    body: bytes = b""

    @classmethod
    def register(cls, role: str) -> "SbiTransaction":
        profile = NfProfile(instance_id(role), role)
        body = json.dumps(profile.to_json(), separators=(",", ":")).encode()
        return cls(TransactionKind.REGISTER, role, "PUT", NFM_PREFIX + profile.nf_instance_id, body)

    @classmethod
    def heartbeat(cls, role: str) -> "SbiTransaction":
        body = json.dumps({"nfStatus": "REGISTERED"}).encode()
        return cls(TransactionKind.HEARTBEAT, role, "PATCH", NFM_PREFIX + instance_id(role), body)

    @classmethod
    def discover(cls, role: str) -> "SbiTransaction":
        target = DISCOVERY_TARGET.get(role, role)
        path = f"{DISC_PATH}?target-nf-type={target}&requester-nf-type={role}"
        return cls(TransactionKind.DISCOVER, role, "GET", path)

    def to_request(self, host: str, transaction_id: str) -> bytes:
        return build_request(self.method, self.path, host, self.body, extra={TXN_HEADER: transaction_id})


def build_default_plan(role: str, n: int) -> list[SbiTransaction]:
    """One Register, then Heartbeat and Discover alternating, ``n`` in total."""
    if n < 1:
        raise ValueError("plan length must be at least 1")
    plan = [SbiTransaction.register(role)]
    for i in range(1, n):
        plan.append(SbiTransaction.heartbeat(role) if i % 2 else SbiTransaction.discover(role))
    return plan


@dataclass
class TransactionSample:
    transaction_id: str
    nf_role: str
    kind: str
    l_sbi_us: Optional[int]
    success: bool
    status: Optional[int] = None


SAMPLE_FIELDS = ("transaction_id", "nf_role", "kind", "l_sbi_us", "success")


def write_samples_csv(samples: Iterable[TransactionSample], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SAMPLE_FIELDS)
    for s in samples:
        w.writerow([s.transaction_id, s.nf_role, s.kind, "" if s.l_sbi_us is None else s.l_sbi_us, int(s.success)])


class SbiClient:
    """Client-side connection management for the workload.

    ``pooled`` keeps one connection open across transactions;
    ``per_transaction`` opens (and, in secure mode, handshakes) a fresh
    connection for every transaction.
    """

    def __init__(self, address: str, secure: Optional[hs.HandshakeConfig] = None,
                 session_policy: str = "pooled") -> None:
        if session_policy not in ("pooled", "per_transaction"):
            raise ValueError(f"unknown session policy {session_policy!r}")
        self.address = address
        self.secure = secure
        self.session_policy = session_policy
        self._conn: Optional[Connection] = None
        self._reader: Optional[MessageReader] = None

    async def _ensure(self) -> None:
        if self._conn is None:
            if self.secure is not None:
                self._conn = await connect_secure(self.address, self.secure)
            else:
                self._conn = await connect(self.address)
            self._reader = MessageReader(self._conn)

    async def drop(self) -> None:
        if self._conn is not None:
            conn, self._conn, self._reader = self._conn, None, None
            conn.abort()

    async def exchange(self, raw_request: bytes):
        await self._ensure()
        await self._conn.send(raw_request)
        resp = await self._reader.read_response()
        if resp is None:
            raise ConnectionError("connection closed before the response")
        if self.session_policy == "per_transaction":
            conn, self._conn, self._reader = self._conn, None, None
            await conn.close()
        return resp

    async def close(self) -> None:
        if self._conn is not None:
            conn, self._conn, self._reader = self._conn, None, None
            await conn.close()


async def run_plan(client: SbiClient, role: str, plan: Sequence[SbiTransaction],
                   timeout_ms: int = DEFAULT_TIMEOUT_MS, id_prefix: Optional[str] = None) -> list[TransactionSample]:
    """Issue ``plan`` strictly sequentially; failures are recorded, never fatal."""
    prefix = id_prefix if id_prefix is not None else f"{role}-"
    host = client.address
    samples = []
    for i, txn in enumerate(plan):
        tid = f"{prefix}{i:04d}"
        raw = txn.to_request(host, tid)
        t0 = time.perf_counter_ns()
        try:
            resp = await asyncio.wait_for(client.exchange(raw), timeout_ms / 1000)
        except (asyncio.TimeoutError, OSError, ConnectionError, ProtocolParseError,
                hs.HandshakeError, asyncio.IncompleteReadError) as exc:
            log.debug("%s %s failed: %r", tid, txn.kind.value, exc)
            await client.drop()
            samples.append(TransactionSample(tid, role, txn.kind.value, None, False))
            continue
        l_sbi = (time.perf_counter_ns() - t0) // 1000
        samples.append(TransactionSample(tid, role, txn.kind.value, l_sbi, True, resp.status))
    return samples


def run_nf_client(role: str, nrf_address: str, plan: Sequence[SbiTransaction],
                  timeout_ms: int = DEFAULT_TIMEOUT_MS, *,
                  secure: Optional[hs.HandshakeConfig] = None,
                  session_policy: str = "pooled",
                  id_prefix: Optional[str] = None) -> list[TransactionSample]:
    """Run one NF role's plan against ``nrf_address`` (an NRF or a local
    sidecar; the client cannot tell the difference)."""
    if not plan:
        raise ValueError("plan must not be empty")

    async def main():
        client = SbiClient(nrf_address, secure, session_policy)
        try:
            return await run_plan(client, role, plan, timeout_ms, id_prefix)
        finally:
            await client.close()

    return asyncio.run(main())
