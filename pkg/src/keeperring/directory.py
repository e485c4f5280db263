"""Directory-backed peer authorization with caching and revocation.

Models the name-service scheme: each ring is a domain, each authorized
peer has one record holding its certificate. Receivers consult a local
cache first; a miss triggers one lookup, and an absent peer earns a
negative entry that suppresses further lookups until it expires.
Revocation removes the record and emits a signed notice for ring-wide
flooding.
"""

from __future__ import annotations

import base64
import enum
import struct
from dataclasses import dataclass, field

from .auth import (
    PROVIDER,
    Certificate,
    RingAuthority,
    decode_certificate,
    encode_certificate,
)
from .keyspace import Key, key_bytes, key_from_hex, key_hex

NEGATIVE_TTL = 60.0  # simulated seconds


class LookupStatus(enum.Enum):
    FOUND = "found"
    ABSENT = "absent"
    UNREACHABLE = "unreachable"


@dataclass(frozen=True)
class LookupResult:
    status: LookupStatus
    certificate: Certificate | None = None


@dataclass(frozen=True)
class DirectoryRecord:
    ring_domain: str
    peer_key: Key
    certificate: Certificate


@dataclass(frozen=True)
class RevocationNotice:
    peer_key: Key
    serial: int
    authority_sig: bytes

    def signed_region(self) -> bytes:
        return b"revoke" + key_bytes(self.peer_key) + struct.pack(">Q", self.serial)


def verify_notice(notice: RevocationNotice, authority_public: bytes) -> bool:
    return PROVIDER.verify(authority_public, notice.signed_region(), notice.authority_sig)


class Directory:
    """Lookup interface; implementations may be remote and may fail."""

    def lookup(self, ring_domain: str, peer_key: Key) -> LookupResult:
        raise NotImplementedError


class InMemoryDirectory(Directory):
    """Authoritative in-memory directory, used by simulation and tests.

    Also plays the authority endpoint: it signs certificates and
    adjudicates excommunication evidence.
    """

    def __init__(self, authority: RingAuthority, witness_threshold: int = 2):
        self.authority = authority
        self.witness_threshold = witness_threshold
        self.records: dict[tuple[str, Key], DirectoryRecord] = {}
        self.reachable = True
        self.lookup_count = 0

    def register(self, ring_domain: str, peer_key: Key, public_key: bytes) -> Certificate:
        cert = self.authority.issue(peer_key, public_key)
        self.records[(ring_domain, peer_key)] = DirectoryRecord(
            ring_domain=ring_domain, peer_key=peer_key, certificate=cert
        )
        return cert

    def lookup(self, ring_domain: str, peer_key: Key) -> LookupResult:
        if not self.reachable:
            return LookupResult(LookupStatus.UNREACHABLE)
        self.lookup_count += 1
        rec = self.records.get((ring_domain, peer_key))
        if rec is None:
            return LookupResult(LookupStatus.ABSENT)
        return LookupResult(LookupStatus.FOUND, rec.certificate)

    def revoke(self, ring_domain: str, peer_key: Key) -> RevocationNotice | None:
        """Remove a peer's record and sign a notice for flooding.

        Returns None when no such record exists (no-op refused).
        """
        rec = self.records.pop((ring_domain, peer_key), None)
        if rec is None:
            return None
        region = b"revoke" + key_bytes(peer_key) + struct.pack(
            ">Q", rec.certificate.serial
        )
        return RevocationNotice(
            peer_key=peer_key,
            serial=rec.certificate.serial,
            authority_sig=PROVIDER.sign(self.authority.keypair, region),
        )

    def report_evidence(
        self, ring_domain: str, peer_key: Key, witnesses: set
    ) -> RevocationNotice | None:
        """Authority concurrence: revoke only on enough distinct witnesses."""
        if not self.reachable:
            return None
        if len(witnesses) < self.witness_threshold:
            return None
        return self.revoke(ring_domain, peer_key)


@dataclass
class AuthCache:
    """Per-node cache of authorization outcomes.

    A key is never simultaneously positive and negative; positives
    survive until a revocation notice, negatives expire after their TTL.
    """

    negative_ttl: float = NEGATIVE_TTL
    positive: dict = field(default_factory=dict)  # key -> (Certificate, fetched_at)
    negative: dict = field(default_factory=dict)  # key -> expires_at

    def insert_positive(self, cert: Certificate, now: float) -> None:
        self.negative.pop(cert.peer_key, None)
        self.positive[cert.peer_key] = (cert, now)

    def insert_negative(self, peer_key: Key, now: float) -> None:
        self.positive.pop(peer_key, None)
        self.negative[peer_key] = now + self.negative_ttl

    def drop(self, peer_key: Key) -> None:
        self.positive.pop(peer_key, None)
        self.negative.pop(peer_key, None)

    def get_certificate(self, peer_key: Key) -> Certificate | None:
        entry = self.positive.get(peer_key)
        return entry[0] if entry else None


class Refused:
    """Sentinel result: sender not authorized right now."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "Refused"


REFUSED = Refused()


def authorize_sender(cache: AuthCache, peer_key: Key, now: float, lookup_fn):
    """Resolve a sender to its certificate, or refuse.

    Cache hits never call lookup_fn. A fresh Absent result populates the
    negative cache; Unreachable refuses without caching so the next
    message retries the lookup.
    """
    hit = cache.positive.get(peer_key)
    if hit is not None:
        return hit[0]
    neg_expiry = cache.negative.get(peer_key)
    if neg_expiry is not None:
        if now < neg_expiry:
            return REFUSED
        del cache.negative[peer_key]
    result = lookup_fn(peer_key)
    if result.status is LookupStatus.FOUND:
        cache.insert_positive(result.certificate, now)
        return result.certificate
    if result.status is LookupStatus.ABSENT:
        cache.insert_negative(peer_key, now)
    return REFUSED


# ---------------------------------------------------------------------------
# seed file: one record per line, "<ring_domain> <hex peer key> <base64 cert>"


def dump_seed_file(directory: InMemoryDirectory) -> str:
    lines = []
    for (domain, peer_key), rec in sorted(directory.records.items()):
        blob = base64.b64encode(encode_certificate(rec.certificate)).decode("ascii")
        lines.append(f"{domain} {key_hex(peer_key)} {blob}")
    return "\n".join(lines) + ("\n" if lines else "")


def load_seed_records(text: str) -> list[DirectoryRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"seed line {lineno}: expected 3 fields")
        domain, hexkey, blob = parts
        cert = decode_certificate(base64.b64decode(blob))
        key = key_from_hex(hexkey)
        if cert.peer_key != key:
            raise ValueError(f"seed line {lineno}: key/certificate mismatch")
        records.append(DirectoryRecord(domain, key, cert))
    return records


class StaticDirectory(Directory):
    """Read-only directory loaded from a seed file.

    Stub for wrapping a real resolver later: same lookup contract, no
    authority operations.
    """

    def __init__(self, records: list[DirectoryRecord]):
        self.records = {(r.ring_domain, r.peer_key): r for r in records}

    def lookup(self, ring_domain: str, peer_key: Key) -> LookupResult:
        rec = self.records.get((ring_domain, peer_key))
        if rec is None:
            return LookupResult(LookupStatus.ABSENT)
        return LookupResult(LookupStatus.FOUND, rec.certificate)
