"""Crypto provider: KEM and signature primitives behind a suite registry.

Suites are looked up by name, so swapping ``"classical"`` for ``"pqc"`` in a
config file is the only change needed to move a deployment between them.

Backends:

* ML-KEM-768 comes from ``pqcrypto``, which exposes the expanded FIPS 203
  key formats (1184-byte encapsulation key, 2400-byte decapsulation key).
* ML-DSA-44/65/87, X25519 and Ed25519 come from ``cryptography``.  ML-DSA
  secret keys are the 32-byte seed form.
* :func:`make_test_double` is a seeded stand-in used only by protocol
  tests.  It is not cryptography and is refused by the benchmark harness.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Iterator

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519, mldsa, x25519
from pqcrypto.kem import ml_kem_768

SHARED_SECRET_SIZE = 32


class CryptoError(Exception):
    pass


class UnknownAlgorithm(CryptoError, KeyError):
    def __str__(self) -> str:
        return f"unknown algorithm: {self.args[0]!r}"


class MalformedInput(CryptoError, ValueError):
    pass


class MalformedKey(MalformedInput):
    pass


class Alg(enum.IntEnum):
    """Algorithm identifiers.  The integer value is the on-disk/wire id."""

    ML_KEM_768 = 0x01
    X25519 = 0x02
    ML_DSA_44 = 0x10
    ML_DSA_65 = 0x11
    ML_DSA_87 = 0x12
    ED25519 = 0x13
    TEST_KEM = 0xF0
    TEST_SIG = 0xF1

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def is_kem(self) -> bool:
        return self in (Alg.ML_KEM_768, Alg.X25519, Alg.TEST_KEM)

    @classmethod
    def parse(cls, value: "Alg | str | int") -> "Alg":
        if isinstance(value, Alg):
            return value
        if isinstance(value, int):
            try:
                return cls(value)
            except ValueError:
                raise UnknownAlgorithm(value) from None
        key = str(value).strip().upper().replace("_", "-")
        for alg, label in _LABELS.items():
            if label.upper() == key:
                return alg
        raise UnknownAlgorithm(value)


_LABELS = {
    Alg.ML_KEM_768: "ML-KEM-768",
    Alg.X25519: "X25519",
    Alg.ML_DSA_44: "ML-DSA-44",
    Alg.ML_DSA_65: "ML-DSA-65",
    Alg.ML_DSA_87: "ML-DSA-87",
    Alg.ED25519: "Ed25519",
    Alg.TEST_KEM: "TEST-KEM",
    Alg.TEST_SIG: "TEST-SIG",
}

ML_DSA_LEVELS = {"44": Alg.ML_DSA_44, "65": Alg.ML_DSA_65, "87": Alg.ML_DSA_87}


def parse_ml_dsa_level(value: "str | int | Alg") -> Alg:
    """Accept ``65``, ``"65"`` or ``"ML-DSA-65"``; anything else is unknown."""
    text = str(value.label if isinstance(value, Alg) else value).strip().upper()
    text = text.removeprefix("ML-DSA-")
    try:
        return ML_DSA_LEVELS[text]
    except KeyError:
        raise UnknownAlgorithm(value) from None


@dataclass(frozen=True)
class AlgSizes:
    public_key: int
    secret_key: int
    # ciphertext length for KEMs, signature length for signature schemes
    output: int


@dataclass(frozen=True)
class SuiteId:
    name: str
    kem_alg: Alg
    sig_alg: Alg


@dataclass(frozen=True, repr=False)
class KemKeyPair:
    alg: Alg
    public_key: bytes
    secret_key: bytes

    def __repr__(self) -> str:
        return f"KemKeyPair({self.alg.label}, pk={len(self.public_key)}B)"


@dataclass(frozen=True, repr=False)
class SigKeyPair:
    alg: Alg
    public_key: bytes
    secret_key: bytes

    def __repr__(self) -> str:
        return f"SigKeyPair({self.alg.label}, pk={len(self.public_key)}B)"


@dataclass(frozen=True)
class CryptoTimings:
    """Nanoseconds spent in provider calls, split the way the breakdown
    reports them: KEM work, signing, verification."""

    kem_ns: int = 0
    sign_ns: int = 0
    verify_ns: int = 0

    def __add__(self, other: "CryptoTimings") -> "CryptoTimings":
        return CryptoTimings(
            self.kem_ns + other.kem_ns,
            self.sign_ns + other.sign_ns,
            self.verify_ns + other.verify_ns,
        )

    @property
    def total_ns(self) -> int:
        return self.kem_ns + self.sign_ns + self.verify_ns


def busy_clock_ns() -> int:
    """CPU time of the calling thread.

    Busy time is charged on this clock rather than wall time so that a
    process descheduled in favour of its peer does not accrue the peer's
    work.  This matters when both ends of a tunnel share one core.
    """
    return time.thread_time_ns()


class OpClock:
    """Mutable accumulator handed to code that wants provider calls timed."""

    def __init__(self) -> None:
        self.timings = CryptoTimings()

    @contextmanager
    def measure(self, category: str) -> Iterator[None]:
        t0 = busy_clock_ns()
        try:
            yield
        finally:
            dt = busy_clock_ns() - t0
            key = f"{category}_ns"
            self.timings = replace(self.timings, **{key: getattr(self.timings, key) + dt})


# --- backends -------------------------------------------------------------


class _MlKem768:
    sizes = AlgSizes(
        ml_kem_768.PUBLIC_KEY_SIZE, ml_kem_768.SECRET_KEY_SIZE, ml_kem_768.CIPHERTEXT_SIZE
    )

    def keypair(self) -> tuple[bytes, bytes]:
        pk, sk = ml_kem_768.keygen()
        return bytes(pk), bytes(sk)

    def encapsulate(self, public_key: bytes) -> tuple[bytes, bytes]:
        ct, ss = ml_kem_768.encaps(public_key)
        return bytes(ct), bytes(ss)

    def decapsulate(self, secret_key: bytes, ciphertext: bytes) -> bytes:
        # implicit rejection: a corrupted ciphertext yields an unrelated secret
        return bytes(ml_kem_768.decaps(secret_key, ciphertext))


class _X25519Kem:
    """X25519 used through the KEM interface: the ciphertext is the
    ephemeral public key, the secret binds both public values."""

    sizes = AlgSizes(32, 32, 32)

    def keypair(self) -> tuple[bytes, bytes]:
        sk = x25519.X25519PrivateKey.generate()
        return sk.public_key().public_bytes_raw(), sk.private_bytes_raw()

    @staticmethod
    def _combine(dh: bytes, ct: bytes, pk: bytes) -> bytes:
        return hashlib.sha256(b"x25519-kem" + dh + ct + pk).digest()

    def encapsulate(self, public_key: bytes) -> tuple[bytes, bytes]:
        peer = x25519.X25519PublicKey.from_public_bytes(public_key)
        eph = x25519.X25519PrivateKey.generate()
        ct = eph.public_key().public_bytes_raw()
        try:
            dh = eph.exchange(peer)
        except ValueError as exc:  # low-order point
            raise MalformedKey("X25519 public key is a low-order point") from exc
        return ct, self._combine(dh, ct, public_key)

    def decapsulate(self, secret_key: bytes, ciphertext: bytes) -> bytes:
        sk = x25519.X25519PrivateKey.from_private_bytes(secret_key)
        pk = sk.public_key().public_bytes_raw()
        try:
            dh = sk.exchange(x25519.X25519PublicKey.from_public_bytes(ciphertext))
        except ValueError:
            # mirror ML-KEM implicit rejection instead of raising
            return hashlib.sha256(b"x25519-reject" + secret_key + ciphertext).digest()
        return self._combine(dh, ciphertext, pk)


class _MlDsa:
    def __init__(self, private_cls, public_cls, sizes: AlgSizes) -> None:
        self._private_cls = private_cls
        self._public_cls = public_cls
        self.sizes = sizes

    def keypair(self) -> tuple[bytes, bytes]:
        sk = self._private_cls.generate()
        return sk.public_key().public_bytes_raw(), sk.private_bytes_raw()

    def sign(self, secret_key: bytes, message: bytes) -> bytes:
        return self._private_cls.from_seed_bytes(secret_key).sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            self._public_cls.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


class _Ed25519:
    sizes = AlgSizes(32, 32, 64)

    def keypair(self) -> tuple[bytes, bytes]:
        sk = ed25519.Ed25519PrivateKey.generate()
        return sk.public_key().public_bytes_raw(), sk.private_bytes_raw()

    def sign(self, secret_key: bytes, message: bytes) -> bytes:
        return ed25519.Ed25519PrivateKey.from_private_bytes(secret_key).sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


class _FakeKem:
    """pk = H(sk); ct is random; ss = H(pk || ct).  Shape-compatible only."""

    sizes = AlgSizes(32, 32, 48)

    def __init__(self, rng: random.Random, lock: threading.Lock) -> None:
        self._rng = rng
        self._lock = lock

    def _bytes(self, n: int) -> bytes:
        with self._lock:
            return self._rng.randbytes(n)

    def keypair(self) -> tuple[bytes, bytes]:
        sk = self._bytes(32)
        return hashlib.sha256(b"fake-pk" + sk).digest(), sk

    def encapsulate(self, public_key: bytes) -> tuple[bytes, bytes]:
        ct = self._bytes(48)
        return ct, hashlib.sha256(public_key + ct).digest()

    def decapsulate(self, secret_key: bytes, ciphertext: bytes) -> bytes:
        pk = hashlib.sha256(b"fake-pk" + secret_key).digest()
        return hashlib.sha256(pk + ciphertext).digest()


class _FakeSig:
    """sig = HMAC(pk, msg), widened to 64 bytes.  Anyone holding pk can forge."""

    sizes = AlgSizes(32, 32, 64)

    def __init__(self, rng: random.Random, lock: threading.Lock) -> None:
        self._rng = rng
        self._lock = lock

    def keypair(self) -> tuple[bytes, bytes]:
        with self._lock:
            sk = self._rng.randbytes(32)
        return hashlib.sha256(b"fake-sig-pk" + sk).digest(), sk

    @staticmethod
    def _mac(pk: bytes, message: bytes) -> bytes:
        return hashlib.sha512(pk + hashlib.sha512(message).digest()).digest()

    def sign(self, secret_key: bytes, message: bytes) -> bytes:
        pk = hashlib.sha256(b"fake-sig-pk" + secret_key).digest()
        return self._mac(pk, message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self._mac(public_key, message), signature)


# --- provider ---------------------------------------------------------------


@dataclass
class CryptoProvider:
    """Dispatches KEM and signature calls to per-algorithm backends.

    Operations hold no shared mutable state beyond what the backends need,
    so a single instance can serve many connections at once.
    """

    name: str
    backends: dict = field(repr=False)
    suites: dict = field(default_factory=dict)
    benchmarkable: bool = True

    def _backend(self, alg, *, kem: bool):
        alg = Alg.parse(alg)
        backend = self.backends.get(alg)
        if backend is None or alg.is_kem != kem:
            raise UnknownAlgorithm(alg.label)
        return alg, backend

    def algorithms(self) -> list[Alg]:
        return sorted(self.backends)

    def sizes(self, alg) -> AlgSizes:
        alg = Alg.parse(alg)
        if alg not in self.backends:
            raise UnknownAlgorithm(alg.label)
        return self.backends[alg].sizes

    def suite(self, name: str) -> SuiteId:
        try:
            return self.suites[name]
        except KeyError:
            raise UnknownAlgorithm(f"suite {name}") from None

    # KEM
    def generate_kem_keypair(self, alg) -> KemKeyPair:
        alg, b = self._backend(alg, kem=True)
        pk, sk = b.keypair()
        return KemKeyPair(alg, pk, sk)

    def encapsulate(self, public_key: bytes, alg) -> tuple[bytes, bytes]:
        alg, b = self._backend(alg, kem=True)
        if len(public_key) != b.sizes.public_key:
            raise MalformedKey(
                f"{alg.label} public key must be {b.sizes.public_key} bytes, got {len(public_key)}"
            )
        try:
            return b.encapsulate(bytes(public_key))
        except ValueError as exc:
            raise MalformedKey(str(exc)) from exc

    def decapsulate(self, secret_key: bytes, ciphertext: bytes, alg) -> bytes:
        alg, b = self._backend(alg, kem=True)
        if len(secret_key) != b.sizes.secret_key:
            raise MalformedInput(f"{alg.label} secret key must be {b.sizes.secret_key} bytes")
        if len(ciphertext) != b.sizes.output:
            raise MalformedInput(f"{alg.label} ciphertext must be {b.sizes.output} bytes")
        return b.decapsulate(bytes(secret_key), bytes(ciphertext))

    # signatures
    def generate_sig_keypair(self, alg) -> SigKeyPair:
        alg, b = self._backend(alg, kem=False)
        pk, sk = b.keypair()
        return SigKeyPair(alg, pk, sk)

    def sign(self, secret_key: bytes, alg, message: bytes) -> bytes:
        alg, b = self._backend(alg, kem=False)
        if len(secret_key) != b.sizes.secret_key:
            raise MalformedKey(f"{alg.label} secret key must be {b.sizes.secret_key} bytes")
        return b.sign(bytes(secret_key), bytes(message))

    def verify(self, public_key: bytes, alg, message: bytes, signature: bytes) -> bool:
        """Never raises for bad keys or signatures; rejection is ``False``."""
        alg, b = self._backend(alg, kem=False)
        if len(public_key) != b.sizes.public_key or len(signature) != b.sizes.output:
            return False
        return b.verify(bytes(public_key), bytes(message), bytes(signature))


def _real_backends() -> dict:
    return {
        Alg.ML_KEM_768: _MlKem768(),
        Alg.X25519: _X25519Kem(),
        Alg.ML_DSA_44: _MlDsa(mldsa.MLDSA44PrivateKey, mldsa.MLDSA44PublicKey, AlgSizes(1312, 32, 2420)),
        Alg.ML_DSA_65: _MlDsa(mldsa.MLDSA65PrivateKey, mldsa.MLDSA65PublicKey, AlgSizes(1952, 32, 3309)),
        Alg.ML_DSA_87: _MlDsa(mldsa.MLDSA87PrivateKey, mldsa.MLDSA87PublicKey, AlgSizes(2592, 32, 4627)),
        Alg.ED25519: _Ed25519(),
    }


SUITES = {
    "pqc": SuiteId("pqc", Alg.ML_KEM_768, Alg.ML_DSA_65),
    "classical": SuiteId("classical", Alg.X25519, Alg.ED25519),
}

DEFAULT_PROVIDER = CryptoProvider("default", _real_backends(), dict(SUITES))


def make_test_double(seed: int = 0) -> CryptoProvider:
    """Deterministic fake provider for protocol tests (never benchmarkable)."""
    rng = random.Random(seed)
    lock = threading.Lock()
    return CryptoProvider(
        f"test-double-{seed}",
        {Alg.TEST_KEM: _FakeKem(rng, lock), Alg.TEST_SIG: _FakeSig(rng, lock)},
        {"test-double": SuiteId("test-double", Alg.TEST_KEM, Alg.TEST_SIG)},
        benchmarkable=False,
    )


def get_suite(name: str, provider: CryptoProvider | None = None) -> SuiteId:
    return (provider or DEFAULT_PROVIDER).suite(name)
