"""Compact signed certificates, chain validation, and key/cert files.

Canonical encoding (all integers big-endian)::

    version            u8
    serial             u64
    subject            u16 length + UTF-8
    not_before         u64 epoch seconds
    not_after          u64 epoch seconds
    subject_sig_alg    u8 algorithm id
    subject_public_key u32 length + bytes
    issuer             u16 length + UTF-8
    issuer_sig_alg     u8 algorithm id
    issuer_signature   u32 length + bytes   (over everything above)

A chain file is the entity certificate followed by any intermediates and
the root, concatenated.  Key files are ``b"PQK1"``, one algorithm id byte,
then the u32-prefixed public and secret keys.
"""

from __future__ import annotations

import enum
import os
import secrets
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .provider import (
    DEFAULT_PROVIDER,
    Alg,
    CryptoProvider,
    KemKeyPair,
    OpClock,
    SigKeyPair,
    UnknownAlgorithm,
)
from .wire import DecodeError, Reader, Writer

CERT_VERSION = 1
KEY_MAGIC = b"PQK1"


class InvalidValidityWindow(ValueError):
    pass


class FailureReason(str, enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    NAME_MISMATCH = "NameMismatch"
    EXPIRED = "Expired"
    UNTRUSTED_ROOT = "UntrustedRoot"


@dataclass(frozen=True)
class Certificate:
    version: int
    serial: int
    subject: str
    validity_not_before: int
    validity_not_after: int
    subject_sig_alg: Alg
    subject_public_key: bytes
    issuer: str
    issuer_sig_alg: Alg
    issuer_signature: bytes = field(repr=False)

    def tbs_bytes(self) -> bytes:
        """The signed portion: every field before the signature."""
        return (
            Writer()
            .u8(self.version)
            .u64(self.serial)
            .text16(self.subject)
            .u64(self.validity_not_before)
            .u64(self.validity_not_after)
            .u8(self.subject_sig_alg)
            .bytes32(self.subject_public_key)
            .text16(self.issuer)
            .u8(self.issuer_sig_alg)
            .getvalue()
        )

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + Writer().bytes32(self.issuer_signature).getvalue()

    @classmethod
    def read(cls, reader: Reader) -> "Certificate":
        version = reader.u8()
        serial = reader.u64()
        subject = reader.text16()
        not_before = reader.u64()
        not_after = reader.u64()
        subject_alg = reader.u8()
        subject_pk = reader.bytes32()
        issuer = reader.text16()
        issuer_alg = reader.u8()
        signature = reader.bytes32()
        try:
            subject_alg, issuer_alg = Alg(subject_alg), Alg(issuer_alg)
        except ValueError as exc:
            raise DecodeError("unknown algorithm id in certificate") from exc
        return cls(
            version, serial, subject, not_before, not_after,
            subject_alg, subject_pk, issuer, issuer_alg, signature,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        reader = Reader(data)
        cert = cls.read(reader)
        reader.done()
        return cert

    @property
    def is_self_issued(self) -> bool:
        return self.subject == self.issuer


@dataclass(frozen=True)
class CertificateChain:
    entity: Certificate
    intermediates: tuple[Certificate, ...] = ()
    root: Optional[Certificate] = None

    def __post_init__(self) -> None:
        if self.root is None:
            object.__setattr__(self, "root", self.entity)

    @property
    def certificates(self) -> list[Certificate]:
        certs = [self.entity, *self.intermediates]
        if self.root is not self.entity:
            certs.append(self.root)
        return certs

    def to_bytes(self) -> bytes:
        return b"".join(c.to_bytes() for c in self.certificates)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CertificateChain":
        reader = Reader(data)
        certs = []
        while reader.remaining:
            certs.append(Certificate.read(reader))
        if not certs:
            raise DecodeError("empty certificate chain")
        if len(certs) == 1:
            return cls(certs[0])
        return cls(certs[0], tuple(certs[1:-1]), certs[-1])


@dataclass(frozen=True)
class ValidationReport:
    accepted: bool
    failure_reason: Optional[FailureReason]
    verify_duration: float  # seconds, monotonic clock
    verify_ns: int = 0  # time inside signature verification only


def issue_certificate(
    issuer_keys: SigKeyPair,
    issuer_cert: Optional[Certificate],
    subject: str,
    subject_public_key: bytes,
    subject_sig_alg,
    validity: tuple[int, int],
    *,
    serial: Optional[int] = None,
    provider: CryptoProvider = DEFAULT_PROVIDER,
) -> Certificate:
    """Sign a certificate for ``subject``.

    Passing ``issuer_cert=None`` self-issues: the issuer name is the subject
    name and the signature must verify under the subject's own key.
    """
    not_before, not_after = (int(v) for v in validity)
    if not not_before < not_after:
        raise InvalidValidityWindow(f"not_before {not_before} must precede not_after {not_after}")
    issuer_name = subject if issuer_cert is None else issuer_cert.subject
    unsigned = Certificate(
        CERT_VERSION,
        secrets.randbits(64) if serial is None else serial,
        subject,
        not_before,
        not_after,
        Alg.parse(subject_sig_alg),
        bytes(subject_public_key),
        issuer_name,
        issuer_keys.alg,
        b"",
    )
    signature = provider.sign(issuer_keys.secret_key, issuer_keys.alg, unsigned.tbs_bytes())
    return replace(unsigned, issuer_signature=signature)


def validate_chain(
    chain: CertificateChain,
    trust_root: Certificate,
    now: Optional[float] = None,
    *,
    provider: CryptoProvider = DEFAULT_PROVIDER,
    clock: Optional[OpClock] = None,
) -> ValidationReport:
    """Check a chain against a pinned root.

    The root must equal ``trust_root`` byte for byte.  Each certificate is
    then checked, entity first, for issuer/subject linkage, validity at
    ``now`` and its issuer's signature; the root's self-signature is
    verified too.  The first failure found is reported.
    """
    t0 = time.perf_counter_ns()
    clock = clock or OpClock()
    verify_before = clock.timings.verify_ns
    now = time.time() if now is None else now

    def report(reason: Optional[FailureReason]) -> ValidationReport:
        return ValidationReport(
            reason is None,
            reason,
            (time.perf_counter_ns() - t0) / 1e9,
            clock.timings.verify_ns - verify_before,
        )

    certs = chain.certificates
    if chain.root.to_bytes() != trust_root.to_bytes():
        return report(FailureReason.UNTRUSTED_ROOT)
    for i, cert in enumerate(certs):
        issuer = certs[i + 1] if i + 1 < len(certs) else cert
        if cert.issuer != issuer.subject or cert.issuer_sig_alg != issuer.subject_sig_alg:
            return report(FailureReason.NAME_MISMATCH)
        if not cert.validity_not_before <= now <= cert.validity_not_after:
            return report(FailureReason.EXPIRED)
        with clock.measure("verify"):
            ok = provider.verify(
                issuer.subject_public_key, cert.issuer_sig_alg, cert.tbs_bytes(), cert.issuer_signature
            )
        if not ok:
            return report(FailureReason.BAD_SIGNATURE)
    return report(None)


# --- files -----------------------------------------------------------------


def encode_key(keys: "SigKeyPair | KemKeyPair") -> bytes:
    return (
        Writer().raw(KEY_MAGIC).u8(keys.alg).bytes32(keys.public_key).bytes32(keys.secret_key).getvalue()
    )


def decode_key(data: bytes) -> "SigKeyPair | KemKeyPair":
    reader = Reader(data)
    if reader.raw(4) != KEY_MAGIC:
        raise DecodeError("not a PQK1 key file")
    try:
        alg = Alg.parse(reader.u8())
    except UnknownAlgorithm as exc:
        raise DecodeError(str(exc)) from exc
    pk = reader.bytes32()
    sk = reader.bytes32()
    reader.done()
    return (KemKeyPair if alg.is_kem else SigKeyPair)(alg, pk, sk)


def preserve_existing(path: Path) -> None:
    """Move an existing file aside to ``name.1``, ``name.2``, ... ."""
    if not path.exists():
        return
    n = 1
    while path.with_name(f"{path.name}.{n}").exists():
        n += 1
    path.rename(path.with_name(f"{path.name}.{n}"))


def _write(path, data: bytes, *, private: bool = False) -> Path:
    path = Path(path)
    preserve_existing(path)
    path.write_bytes(data)
    if private:
        os.chmod(path, 0o600)
    return path


def write_key_file(path, keys) -> Path:
    return _write(path, encode_key(keys), private=True)


def read_key_file(path) -> "SigKeyPair | KemKeyPair":
    return decode_key(Path(path).read_bytes())


def write_certificate(path, cert: Certificate) -> Path:
    return _write(path, cert.to_bytes())


def read_certificate(path) -> Certificate:
    return Certificate.from_bytes(Path(path).read_bytes())


def write_chain(path, chain: CertificateChain) -> Path:
    return _write(path, chain.to_bytes())


def read_chain(path) -> CertificateChain:
    return CertificateChain.from_bytes(Path(path).read_bytes())


# --- credential generation ---------------------------------------------------


@dataclass
class Credentials:
    """A root CA plus per-subject entity keys and chains."""

    root_keys: SigKeyPair
    root: Certificate
    entities: dict[str, tuple[SigKeyPair, CertificateChain]]


def generate_credentials(
    subjects,
    *,
    ca_alg=Alg.ML_DSA_65,
    entity_alg=Alg.ML_DSA_65,
    lifetime_s: int = 365 * 24 * 3600,
    now: Optional[int] = None,
    provider: CryptoProvider = DEFAULT_PROVIDER,
) -> Credentials:
    """Root CA self-signed at ``ca_alg``; entities keyed with ``entity_alg``."""
    now = int(time.time()) if now is None else now
    validity = (now - 3600, now + lifetime_s)
    root_keys = provider.generate_sig_keypair(ca_alg)
    root = issue_certificate(
        root_keys, None, "pqcside-root-ca", root_keys.public_key, root_keys.alg, validity, provider=provider
    )
    entities = {}
    for subject in subjects:
        keys = provider.generate_sig_keypair(entity_alg)
        cert = issue_certificate(
            root_keys, root, subject, keys.public_key, keys.alg, validity, provider=provider
        )
        entities[subject] = (keys, CertificateChain(cert, (), root))
    return Credentials(root_keys, root, entities)


def write_credentials(creds: Credentials, out_dir) -> dict[str, Path]:
    """Lay out ``root.cert``/``root.key`` and ``<subject>.{cert,key,chain}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "root.cert": write_certificate(out / "root.cert", creds.root),
        "root.key": write_key_file(out / "root.key", creds.root_keys),
    }
    for subject, (keys, chain) in creds.entities.items():
        paths[f"{subject}.cert"] = write_certificate(out / f"{subject}.cert", chain.entity)
        paths[f"{subject}.key"] = write_key_file(out / f"{subject}.key", keys)
        paths[f"{subject}.chain"] = write_chain(out / f"{subject}.chain", chain)
    return paths
