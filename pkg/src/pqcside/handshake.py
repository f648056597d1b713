"""Authenticated key establishment for the inter-proxy tunnel.

Four messages, each carried in a frame of ``type (1 byte) | length (3
bytes, big-endian) | body``::

    C -> S  ClientHello     version, client_nonce, offered_suites, mutual_auth
    S -> C  ServerHello     server_nonce, chosen_suite, server_chain,
                            ephemeral KEM public key, server_signature
    C -> S  ClientKey       kem_ciphertext, [client_chain, client_signature],
                            client_finished
    S -> C  ServerFinished  server_finished

The server signs the transcript up to (and excluding) its own signature,
which binds the offered and chosen suites.  Session keys come from the KEM
shared secret salted with the transcript hash through HKDF-SHA256.  Both
finished MACs are mandatory: they are where a corrupted KEM ciphertext,
silently accepted by ML-KEM's implicit rejection, becomes a hard failure.

Every operation here is pure: it takes a state and a frame and returns a new
state and frame.  Nothing does I/O.  On failure the operation raises a
:class:`HandshakeError` whose ``state`` attribute is the ``Failed`` state.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .certs import Certificate, CertificateChain, FailureReason, validate_chain
from .provider import (
    DEFAULT_PROVIDER,
    CryptoProvider,
    CryptoTimings,
    MalformedInput,
    OpClock,
    SigKeyPair,
    SuiteId,
    UnknownAlgorithm,
)
from .wire import DecodeError, Reader, Writer

PROTOCOL_VERSION = 1
NONCE_SIZE = 32
MAC_SIZE = 32

CLIENT_HELLO = 1
SERVER_HELLO = 2
CLIENT_KEY = 3
SERVER_FINISHED = 4

FRAME_HEADER_SIZE = 4
MAX_FRAME_BODY = (1 << 24) - 1

SERVER_SIG_CONTEXT = b"pqcside v1 server signature\x00"
CLIENT_SIG_CONTEXT = b"pqcside v1 client signature\x00"


class HandshakeError(Exception):
    """Base class.  ``state`` is the Failed state the operation ended in."""

    def __init__(self, message: str = "", state: "Optional[HandshakeState]" = None) -> None:
        super().__init__(message or type(self).__name__)
        self.state = state

    @property
    def reason(self) -> str:
        return type(self).__name__


class BadConfig(HandshakeError):
    pass


class ProtocolError(HandshakeError):
    """Malformed frame, unexpected message type or unsupported version."""


class NoCommonSuite(HandshakeError):
    pass


class SuiteMismatch(HandshakeError):
    pass


class ChainInvalid(HandshakeError):
    def __init__(self, failure: "FailureReason | str", state=None) -> None:
        super().__init__(f"certificate chain rejected: {getattr(failure, 'value', failure)}", state)
        self.failure = failure


class BadServerSignature(HandshakeError):
    pass


class BadClientSignature(HandshakeError):
    pass


class BadFinishedMac(HandshakeError):
    pass


class Role(str, enum.Enum):
    CLIENT = "client"
    SERVER = "server"


class Phase(enum.IntEnum):
    START = 0
    SENT_HELLO = 1
    KEY_EXCHANGED = 2
    ESTABLISHED = 3
    FAILED = 4


# --- key schedule -------------------------------------------------------------


@dataclass(frozen=True, repr=False)
class SessionKeys:
    client_to_server_key: bytes
    server_to_client_key: bytes
    client_finished_key: bytes
    server_finished_key: bytes

    def __repr__(self) -> str:
        return "SessionKeys(<redacted>)"


def hkdf_extract(salt: bytes, ikm: bytes) -> bytes:
    return hmac.new(salt, ikm, hashlib.sha256).digest()


def hkdf_expand(prk: bytes, info: bytes, length: int = 32) -> bytes:
    out, block, counter = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return out[:length]


def derive_session_keys(shared_secret: bytes, transcript_hash: bytes) -> SessionKeys:
    if len(shared_secret) != 32 or len(transcript_hash) != 32:
        raise ValueError("shared secret and transcript hash must be 32 bytes")
    prk = hkdf_extract(transcript_hash, shared_secret)
    return SessionKeys(*(hkdf_expand(prk, label) for label in (b"c2s", b"s2c", b"cfin", b"sfin")))


def transcript_hash(messages: Sequence[bytes]) -> bytes:
    """SHA-256 over the messages in order, each prefixed with its u32 length."""
    h = hashlib.sha256()
    for m in messages:
        h.update(len(m).to_bytes(4, "big"))
        h.update(m)
    return h.digest()


# --- messages -------------------------------------------------------------------


def frame(msg_type: int, body: bytes) -> bytes:
    if len(body) > MAX_FRAME_BODY:
        raise ValueError("handshake message too large")
    return bytes([msg_type]) + len(body).to_bytes(3, "big") + body


def unframe(data: bytes, expected_type: int) -> bytes:
    if len(data) < FRAME_HEADER_SIZE:
        raise DecodeError("short frame")
    if data[0] != expected_type:
        raise DecodeError(f"expected message type {expected_type}, got {data[0]}")
    length = int.from_bytes(data[1:4], "big")
    if length != len(data) - FRAME_HEADER_SIZE:
        raise DecodeError("frame length mismatch")
    return bytes(data[FRAME_HEADER_SIZE:])


@dataclass(frozen=True)
class ClientHello:
    client_nonce: bytes
    offered_suites: tuple[str, ...]
    mutual_auth_request: bool
    version: int = PROTOCOL_VERSION

    def encode(self) -> bytes:
        w = Writer().u8(self.version).raw(self.client_nonce).u8(len(self.offered_suites))
        for name in self.offered_suites:
            w.bytes8(name.encode("ascii"))
        return frame(CLIENT_HELLO, w.u8(int(self.mutual_auth_request)).getvalue())

    @classmethod
    def decode(cls, data: bytes) -> "ClientHello":
        r = Reader(unframe(data, CLIENT_HELLO))
        version = r.u8()
        nonce = r.raw(NONCE_SIZE)
        try:
            suites = tuple(r.bytes8().decode("ascii") for _ in range(r.u8()))
        except UnicodeDecodeError as exc:
            raise DecodeError("suite names must be ASCII") from exc
        flag = r.u8()
        r.done()
        if flag > 1:
            raise DecodeError("bad mutual_auth flag")
        return cls(nonce, suites, bool(flag), version)


@dataclass(frozen=True)
class ServerHello:
    server_nonce: bytes
    chosen_suite: str
    server_chain: bytes
    ephemeral_kem_public_key: bytes
    server_signature: bytes = b""

    def encode(self) -> bytes:
        body = (
            Writer()
            .raw(self.server_nonce)
            .bytes8(self.chosen_suite.encode("ascii"))
            .bytes32(self.server_chain)
            .bytes32(self.ephemeral_kem_public_key)
            .bytes32(self.server_signature)
            .getvalue()
        )
        return frame(SERVER_HELLO, body)

    @classmethod
    def decode(cls, data: bytes) -> "ServerHello":
        r = Reader(unframe(data, SERVER_HELLO))
        nonce = r.raw(NONCE_SIZE)
        try:
            suite = r.bytes8().decode("ascii")
        except UnicodeDecodeError as exc:
            raise DecodeError("suite name must be ASCII") from exc
        msg = cls(nonce, suite, r.bytes32(), r.bytes32(), r.bytes32())
        r.done()
        return msg


@dataclass(frozen=True)
class ClientKey:
    kem_ciphertext: bytes
    client_chain: bytes = b""
    client_signature: bytes = b""
    client_finished: bytes = b""

    def encode(self) -> bytes:
        body = (
            Writer()
            .bytes32(self.kem_ciphertext)
            .bytes32(self.client_chain)
            .bytes32(self.client_signature)
            .bytes8(self.client_finished)
            .getvalue()
        )
        return frame(CLIENT_KEY, body)

    @classmethod
    def decode(cls, data: bytes) -> "ClientKey":
        r = Reader(unframe(data, CLIENT_KEY))
        msg = cls(r.bytes32(), r.bytes32(), r.bytes32(), r.bytes8())
        r.done()
        return msg


@dataclass(frozen=True)
class ServerFinished:
    server_finished: bytes

    def encode(self) -> bytes:
        return frame(SERVER_FINISHED, Writer().bytes8(self.server_finished).getvalue())

    @classmethod
    def decode(cls, data: bytes) -> "ServerFinished":
        r = Reader(unframe(data, SERVER_FINISHED))
        msg = cls(r.bytes8())
        r.done()
        return msg


# --- configuration and state ------------------------------------------------------


@dataclass(frozen=True)
class HandshakeConfig:
    """One side's handshake parameters.

    ``suites`` lists suite names in preference order: the client offers all
    of them, the server accepts the first offered one it also lists.
    """

    role: Role
    suites: tuple[str, ...] = ("pqc",)
    trust_root: Optional[Certificate] = None
    local_chain: Optional[CertificateChain] = None
    local_key: Optional[SigKeyPair] = field(default=None, repr=False)
    mutual_auth: bool = False
    provider: CryptoProvider = field(default=DEFAULT_PROVIDER, repr=False)
    now: Optional[float] = None  # fixed validation time for tests

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        if isinstance(self.suites, str):
            object.__setattr__(self, "suites", (self.suites,))
        else:
            object.__setattr__(self, "suites", tuple(self.suites))

    def check(self) -> None:
        if not self.suites:
            raise BadConfig("no suites configured")
        for name in self.suites:
            try:
                self.provider.suite(name)
            except UnknownAlgorithm:
                raise BadConfig(f"suite {name!r} is not registered with provider {self.provider.name}")
        needs_chain = self.role is Role.SERVER or self.mutual_auth
        needs_root = self.role is Role.CLIENT or self.mutual_auth
        if needs_chain and (self.local_chain is None or self.local_key is None):
            raise BadConfig(f"{self.role.value} role requires a certificate chain and signing key")
        if needs_root and self.trust_root is None:
            raise BadConfig(f"{self.role.value} role requires a trust root")
        if needs_chain:
            sig_algs = {self.provider.suite(name).sig_alg for name in self.suites}
            if self.local_key.alg not in sig_algs:
                raise BadConfig(f"signing key is {self.local_key.alg.label}, not usable with suites {list(self.suites)}")
            if self.local_chain.entity.subject_public_key != self.local_key.public_key:
                raise BadConfig("signing key does not match the certificate chain")


@dataclass(frozen=True, repr=False)
class HandshakeState:
    config: HandshakeConfig
    role: Role
    phase: Phase = Phase.START
    failure: Optional[str] = None
    transcript: tuple[bytes, ...] = ()
    suite: Optional[SuiteId] = None
    keys: Optional[SessionKeys] = None
    timings: CryptoTimings = CryptoTimings()
    started_ns: int = 0
    ended_ns: int = 0
    peer_chain: Optional[CertificateChain] = None
    mutual_auth: bool = False
    # server-side ephemeral KEM secret, discarded once keys are derived
    _ephemeral_secret: bytes = b""

    def __repr__(self) -> str:
        return f"HandshakeState({self.role.value}, {self.phase.name}, failure={self.failure})"

    @property
    def transcript_hash(self) -> bytes:
        return transcript_hash(self.transcript)

    @property
    def duration_ns(self) -> int:
        return self.ended_ns - self.started_ns if self.ended_ns else 0

    def advance(self, phase: Phase, **changes) -> "HandshakeState":
        if self.phase is Phase.FAILED or phase <= self.phase:
            raise RuntimeError(f"illegal transition {self.phase.name} -> {phase.name}")
        if phase is Phase.ESTABLISHED:
            changes.setdefault("ended_ns", time.perf_counter_ns())
            changes["_ephemeral_secret"] = b""
        return replace(self, phase=phase, **changes)


def _fail(state: HandshakeState, error: HandshakeError, clock: OpClock) -> HandshakeError:
    if state.phase is not Phase.FAILED:
        state = replace(
            state,
            phase=Phase.FAILED,
            failure=error.reason,
            timings=clock.timings,
            ended_ns=time.perf_counter_ns(),
            keys=None,
            _ephemeral_secret=b"",
        )
    error.state = state
    return error


class _Step:
    """Runs one operation body, turning decode errors into ProtocolError and
    stamping any failure onto the state."""

    def __init__(self, state: HandshakeState) -> None:
        self.state = state
        self.clock = OpClock()
        self.clock.timings = state.timings

    def __enter__(self) -> "_Step":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc is None:
            return False
        if isinstance(exc, HandshakeError):
            raise _fail(self.state, exc, self.clock) from None
        if isinstance(exc, (DecodeError, MalformedInput)):
            raise _fail(self.state, ProtocolError(str(exc)), self.clock) from exc
        return False


def _mac(key: bytes, th: bytes) -> bytes:
    return hmac.new(key, th, hashlib.sha256).digest()


def _validate_peer(state: HandshakeState, clock: OpClock, chain_bytes: bytes, sig_alg) -> CertificateChain:
    cfg = state.config
    if not chain_bytes:
        raise ChainInvalid("missing")
    try:
        chain = CertificateChain.from_bytes(chain_bytes)
    except DecodeError:
        raise ChainInvalid("malformed")
    report = validate_chain(chain, cfg.trust_root, cfg.now, provider=cfg.provider, clock=clock)
    if not report.accepted:
        raise ChainInvalid(report.failure_reason)
    if chain.entity.subject_sig_alg != sig_alg:
        raise SuiteMismatch(
            f"peer key is {chain.entity.subject_sig_alg.label}, suite requires {sig_alg.label}"
        )
    return chain


# --- operations ---------------------------------------------------------------


def client_start(config: HandshakeConfig) -> tuple[HandshakeState, bytes]:
    if config.role is not Role.CLIENT:
        raise BadConfig("client_start needs a client config")
    config.check()
    hello = ClientHello(os.urandom(NONCE_SIZE), config.suites, config.mutual_auth)
    ch = hello.encode()
    state = HandshakeState(config, Role.CLIENT, started_ns=time.perf_counter_ns(), mutual_auth=config.mutual_auth)
    return state.advance(Phase.SENT_HELLO, transcript=(ch,)), ch


def server_respond(config: HandshakeConfig, client_hello: bytes) -> tuple[HandshakeState, bytes]:
    if config.role is not Role.SERVER:
        raise BadConfig("server_respond needs a server config")
    config.check()
    state = HandshakeState(config, Role.SERVER, started_ns=time.perf_counter_ns())
    with _Step(state) as step:
        hello = ClientHello.decode(client_hello)
        if hello.version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported version {hello.version}")
        if config.mutual_auth and not hello.mutual_auth_request:
            raise BadConfig("server requires mutual authentication")
        chosen = next((s for s in hello.offered_suites if s in config.suites), None)
        if chosen is None:
            raise NoCommonSuite(f"offered {list(hello.offered_suites)}, accepted {list(config.suites)}")
        suite = config.provider.suite(chosen)
        with step.clock.measure("kem"):
            eph = config.provider.generate_kem_keypair(suite.kem_alg)
        unsigned = ServerHello(
            os.urandom(NONCE_SIZE), chosen, config.local_chain.to_bytes(), eph.public_key
        )
        th = transcript_hash([client_hello, unsigned.encode()])
        with step.clock.measure("sign"):
            sig = config.provider.sign(config.local_key.secret_key, suite.sig_alg, SERVER_SIG_CONTEXT + th)
        sh = replace(unsigned, server_signature=sig).encode()
        state = state.advance(
            Phase.SENT_HELLO,
            transcript=(client_hello, sh),
            suite=suite,
            timings=step.clock.timings,
            mutual_auth=hello.mutual_auth_request,
            _ephemeral_secret=eph.secret_key,
        )
    return state, sh


def client_key_exchange(state: HandshakeState, server_hello: bytes) -> tuple[HandshakeState, bytes, SessionKeys]:
    if state.role is not Role.CLIENT or state.phase is not Phase.SENT_HELLO:
        raise RuntimeError(f"client_key_exchange called in {state!r}")
    cfg = state.config
    with _Step(state) as step:
        sh = ServerHello.decode(server_hello)
        if sh.chosen_suite not in cfg.suites:
            raise SuiteMismatch(f"server chose {sh.chosen_suite!r}, which was not offered")
        suite = cfg.provider.suite(sh.chosen_suite)
        chain = _validate_peer(state, step.clock, sh.server_chain, suite.sig_alg)
        unsigned = replace(sh, server_signature=b"").encode()
        th = transcript_hash([state.transcript[0], unsigned])
        with step.clock.measure("verify"):
            ok = cfg.provider.verify(
                chain.entity.subject_public_key, suite.sig_alg, SERVER_SIG_CONTEXT + th, sh.server_signature
            )
        if not ok:
            raise BadServerSignature("server signature does not verify over the transcript")
        with step.clock.measure("kem"):
            ct, ss = cfg.provider.encapsulate(sh.ephemeral_kem_public_key, suite.kem_alg)

        prefix = (state.transcript[0], server_hello)
        client_chain = cfg.local_chain.to_bytes() if state.mutual_auth else b""
        core = ClientKey(ct, client_chain).encode()
        keys = derive_session_keys(ss, transcript_hash([*prefix, core]))
        client_sig = b""
        if state.mutual_auth:
            with step.clock.measure("sign"):
                client_sig = cfg.provider.sign(
                    cfg.local_key.secret_key,
                    suite.sig_alg,
                    CLIENT_SIG_CONTEXT + transcript_hash([*prefix, core]),
                )
        pre_finished = ClientKey(ct, client_chain, client_sig).encode()
        finished = _mac(keys.client_finished_key, transcript_hash([*prefix, pre_finished]))
        ck = ClientKey(ct, client_chain, client_sig, finished).encode()
        state = state.advance(
            Phase.KEY_EXCHANGED,
            transcript=(*prefix, ck),
            suite=suite,
            keys=keys,
            peer_chain=chain,
            timings=step.clock.timings,
        )
    return state, ck, keys


def server_finish(state: HandshakeState, client_key: bytes) -> tuple[HandshakeState, bytes, SessionKeys]:
    if state.role is not Role.SERVER or state.phase is not Phase.SENT_HELLO:
        raise RuntimeError(f"server_finish called in {state!r}")
    cfg = state.config
    suite = state.suite
    with _Step(state) as step:
        ck = ClientKey.decode(client_key)
        with step.clock.measure("kem"):
            ss = cfg.provider.decapsulate(state._ephemeral_secret, ck.kem_ciphertext, suite.kem_alg)
        prefix = state.transcript
        core = ClientKey(ck.kem_ciphertext, ck.client_chain).encode()
        keys = derive_session_keys(ss, transcript_hash([*prefix, core]))
        pre_finished = ClientKey(ck.kem_ciphertext, ck.client_chain, ck.client_signature).encode()
        expected = _mac(keys.client_finished_key, transcript_hash([*prefix, pre_finished]))
        if not hmac.compare_digest(expected, ck.client_finished):
            raise BadFinishedMac("client finished MAC mismatch")

        peer_chain = None
        if cfg.mutual_auth:
            peer_chain = _validate_peer(state, step.clock, ck.client_chain, suite.sig_alg)
            with step.clock.measure("verify"):
                ok = cfg.provider.verify(
                    peer_chain.entity.subject_public_key,
                    suite.sig_alg,
                    CLIENT_SIG_CONTEXT + transcript_hash([*prefix, core]),
                    ck.client_signature,
                )
            if not ok:
                raise BadClientSignature("client signature does not verify over the transcript")
        elif ck.client_chain or ck.client_signature:
            raise ProtocolError("unsolicited client credentials")

        transcript = (*prefix, client_key)
        sf = ServerFinished(_mac(keys.server_finished_key, transcript_hash(transcript))).encode()
        state = state.advance(
            Phase.ESTABLISHED,
            transcript=(*transcript, sf),
            keys=keys,
            peer_chain=peer_chain,
            timings=step.clock.timings,
        )
    return state, sf, keys


def client_complete(state: HandshakeState, server_finished: bytes) -> HandshakeState:
    """Verify ServerFinished; the client is Established only after this."""
    if state.role is not Role.CLIENT or state.phase is not Phase.KEY_EXCHANGED:
        raise RuntimeError(f"client_complete called in {state!r}")
    with _Step(state):
        sf = ServerFinished.decode(server_finished)
        expected = _mac(state.keys.server_finished_key, transcript_hash(state.transcript))
        if not hmac.compare_digest(expected, sf.server_finished):
            raise BadFinishedMac("server finished MAC mismatch")
        state = state.advance(Phase.ESTABLISHED, transcript=(*state.transcript, server_finished))
    return state


def run_in_memory(client_cfg: HandshakeConfig, server_cfg: HandshakeConfig):
    """Drive both sides to completion without I/O.

    Returns ``(client_state, server_state, frames)``; handy for tests and for
    the in-process secure channel.
    """
    cs, ch = client_start(client_cfg)
    ss, sh = server_respond(server_cfg, ch)
    cs, ck, _ = client_key_exchange(cs, sh)
    ss, sf, _ = server_finish(ss, ck)
    cs = client_complete(cs, sf)
    return cs, ss, (ch, sh, ck, sf)
