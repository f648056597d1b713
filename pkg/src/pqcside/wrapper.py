"""HTTP wrapper exposing KEM and signature operations with per-call timing.

This is a measurement instrument: responses include secret keys so callers
can chain operations without server-side state.  It is never part of the
tunnel's data path.

Every response carries ``elapsed_us``, measured around the provider call
only (request parsing and JSON encoding are excluded).
"""

from __future__ import annotations

import http.client
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .http11 import Request, json_response, serve_http
from .provider import DEFAULT_PROVIDER, Alg, CryptoProvider, MalformedInput, UnknownAlgorithm
from .service import bind
from .transport import Connection, format_address, parse_address

log = logging.getLogger(__name__)


class BadRequest(ValueError):
    pass


class Unreachable(ConnectionError):
    pass


def _hex(data: bytes) -> str:
    return data.hex()


def _unhex(body: dict, name: str) -> bytes:
    value = body.get(name)
    if not isinstance(value, str):
        raise BadRequest(f"field {name!r} must be a hex string")
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise BadRequest(f"field {name!r} is not valid hex") from None


def _timed(fn: Callable, *args):
    t0 = time.perf_counter_ns()
    out = fn(*args)
    return out, (time.perf_counter_ns() - t0) / 1000


class WrapperService:
    """Route table over a :class:`CryptoProvider`."""

    def __init__(self, bind_address: str = "127.0.0.1:0", provider: CryptoProvider = DEFAULT_PROVIDER) -> None:
        self.bind_address = bind_address
        self.provider = provider
        self.address: Optional[str] = None
        self._server = None
        self._routes = {
            "/kem/keypair": self._kem_keypair,
            "/kem/encapsulate": self._kem_encapsulate,
            "/kem/decapsulate": self._kem_decapsulate,
            "/sign/keypair": self._sign_keypair,
            "/sign": self._sign,
            "/verify": self._verify,
        }

    async def start(self) -> None:
        self._server = await bind(self._on_connection, self.bind_address)
        self.address = format_address(self._server.sockets[0].getsockname())

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    def describe(self) -> dict:
        return {"listen": self.address}

    async def _on_connection(self, reader, writer) -> None:
        await serve_http(Connection(reader, writer), self.handle)

    def handle(self, req: Request) -> bytes:
        route = self._routes.get(req.path)
        if route is None:
            return json_response(404, {"error": f"no route {req.path}"})
        if req.method != "POST":
            return json_response(405, {"error": "use POST"})
        try:
            body = req.json() if req.body else {}
            if not isinstance(body, dict):
                raise BadRequest("body must be a JSON object")
            alg = Alg.parse(body.get("alg", ""))
            return json_response(200, route(alg, body))
        except (BadRequest, MalformedInput, UnknownAlgorithm, ValueError) as exc:
            return json_response(400, {"error": str(exc) or type(exc).__name__})

    def _kem(self, alg: Alg) -> Alg:
        if not alg.is_kem:
            raise BadRequest(f"{alg.label} is not a KEM")
        return alg

    def _sig(self, alg: Alg) -> Alg:
        if alg.is_kem:
            raise BadRequest(f"{alg.label} is not a signature scheme")
        return alg

    def _kem_keypair(self, alg: Alg, body: dict) -> dict:
        kp, us = _timed(self.provider.generate_kem_keypair, self._kem(alg))
        return {"alg": alg.label, "public_key": _hex(kp.public_key), "secret_key": _hex(kp.secret_key),
                "elapsed_us": us}

    def _kem_encapsulate(self, alg: Alg, body: dict) -> dict:
        pk = _unhex(body, "public_key")
        (ct, ss), us = _timed(self.provider.encapsulate, pk, self._kem(alg))
        return {"alg": alg.label, "ciphertext": _hex(ct), "shared_secret": _hex(ss), "elapsed_us": us}

    def _kem_decapsulate(self, alg: Alg, body: dict) -> dict:
        sk, ct = _unhex(body, "secret_key"), _unhex(body, "ciphertext")
        ss, us = _timed(self.provider.decapsulate, sk, ct, self._kem(alg))
        return {"alg": alg.label, "shared_secret": _hex(ss), "elapsed_us": us}

    def _sign_keypair(self, alg: Alg, body: dict) -> dict:
        kp, us = _timed(self.provider.generate_sig_keypair, self._sig(alg))
        return {"alg": alg.label, "public_key": _hex(kp.public_key), "secret_key": _hex(kp.secret_key),
                "elapsed_us": us}

    def _sign(self, alg: Alg, body: dict) -> dict:
        sk, msg = _unhex(body, "secret_key"), _unhex(body, "message")
        sig, us = _timed(self.provider.sign, sk, self._sig(alg), msg)
        return {"alg": alg.label, "signature": _hex(sig), "elapsed_us": us}

    def _verify(self, alg: Alg, body: dict) -> dict:
        pk, msg, sig = _unhex(body, "public_key"), _unhex(body, "message"), _unhex(body, "signature")
        ok, us = _timed(self.provider.verify, pk, self._sig(alg), msg, sig)
        return {"alg": alg.label, "verified": ok, "elapsed_us": us}


def serve_wrapper(bind_address: str = "127.0.0.1:0", provider: CryptoProvider = DEFAULT_PROVIDER):
    """Start the wrapper on a background thread and return its handle."""
    from .service import ServiceHandle

    return ServiceHandle(WrapperService(bind_address, provider), "wrapper").start()


# --- client side -----------------------------------------------------------------


class WrapperClient:
    """Keep-alive JSON client; records the caller-observed round trip."""

    def __init__(self, address: str, timeout: float = 10.0) -> None:
        host, port = parse_address(address)
        self._conn = http.client.HTTPConnection(host, port, timeout=timeout)
        self.last_round_trip_us = 0.0

    def call(self, path: str, **fields) -> dict:
        body = json.dumps(fields)
        t0 = time.perf_counter_ns()
        try:
            self._conn.request("POST", path, body, {"Content-Type": "application/json"})
            resp = self._conn.getresponse()
            data = resp.read()
        except OSError as exc:
            self._conn.close()
            raise Unreachable(f"wrapper unreachable: {exc}") from None
        self.last_round_trip_us = (time.perf_counter_ns() - t0) / 1000
        obj = json.loads(data) if data else {}
        if resp.status != 200:
            raise BadRequest(f"{path} returned {resp.status}: {obj.get('error')}")
        return obj

    def close(self) -> None:
        self._conn.close()


@dataclass
class CryptoCostSamples:
    """Per-operation elapsed times (µs) for one algorithm."""

    alg: str
    samples: dict[str, list[float]] = field(default_factory=dict)
    round_trip_us: dict[str, list[float]] = field(default_factory=dict)

    def add(self, op: str, elapsed_us: float, rtt_us: float) -> None:
        self.samples.setdefault(op, []).append(elapsed_us)
        self.round_trip_us.setdefault(op, []).append(rtt_us)


def sample_crypto_costs(wrapper_address: str, algs: Iterable["Alg | str"], iterations: int,
                        message: bytes = b"pqcside crypto cost sample") -> dict[str, CryptoCostSamples]:
    """Collect ``iterations`` sequential samples per operation per algorithm.

    KEMs yield ``T_enc`` (encapsulate) and ``T_dec`` (decapsulate); signature
    schemes yield ``T_sig`` and ``T_ver``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    client = WrapperClient(wrapper_address)
    out: dict[str, CryptoCostSamples] = {}
    try:
        for a in algs:
            alg = Alg.parse(a)
            rec = out[alg.label] = CryptoCostSamples(alg.label)
            if alg.is_kem:
                kp = client.call("/kem/keypair", alg=alg.label)
                for _ in range(iterations):
                    enc = client.call("/kem/encapsulate", alg=alg.label, public_key=kp["public_key"])
                    rec.add("T_enc", enc["elapsed_us"], client.last_round_trip_us)
                    dec = client.call("/kem/decapsulate", alg=alg.label, secret_key=kp["secret_key"],
                                      ciphertext=enc["ciphertext"])
                    rec.add("T_dec", dec["elapsed_us"], client.last_round_trip_us)
            else:
                kp = client.call("/sign/keypair", alg=alg.label)
                msg = message.hex()
                for _ in range(iterations):
                    sig = client.call("/sign", alg=alg.label, secret_key=kp["secret_key"], message=msg)
                    rec.add("T_sig", sig["elapsed_us"], client.last_round_trip_us)
                    ver = client.call("/verify", alg=alg.label, public_key=kp["public_key"], message=msg,
                                      signature=sig["signature"])
                    rec.add("T_ver", ver["elapsed_us"], client.last_round_trip_us)
    finally:
        client.close()
    return out
