"""Peer identity, certificates, and two-tier message authentication.

Every peer holds a long-lived keypair whose public half is certified by
the ring authority. First contact between two peers is signed; the pair
then exchanges a shared secret (public-key encrypted) and switches to
HMAC, which is orders of magnitude cheaper per message.

The concrete algorithms live behind CryptoProvider so the rest of the
system never names one: the default provider signs with Ed25519 and
wraps session secrets with X25519 + ChaCha20-Poly1305.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .keyspace import Key, key_bytes, key_from_bytes

SESSION_SECRET_LEN = 32
MAC_TAG_LEN = 32
SESSION_LIFETIME = 300.0  # simulated seconds
SESSION_REGEN_FRACTION = 0.8


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    private: bytes


@dataclass(frozen=True)
class Certificate:
    """Authority-signed binding of a peer key to its public key."""

    peer_key: Key
    public_key: bytes
    serial: int
    authority_sig: bytes

    def signed_region(self) -> bytes:
        return key_bytes(self.peer_key) + self.public_key + struct.pack(">Q", self.serial)


@dataclass
class SessionKey:
    peer: Key
    secret: bytes
    established_at: float
    expires_at: float

    def due_for_regen(self, now: float) -> bool:
        lifetime = self.expires_at - self.established_at
        return now >= self.established_at + SESSION_REGEN_FRACTION * lifetime

    def expired(self, now: float) -> bool:
        return now >= self.expires_at


class CryptoProvider:
    """Deterministic signatures plus public-key secret wrapping.

    Signing keys are Ed25519 (deterministic by construction); secret
    wrapping is X25519 ECDH with a ChaCha20-Poly1305 AEAD. Public and
    private halves are each the concatenation of the two raw 32-byte
    keys, signing key first. All randomness is drawn from the caller's
    RNG so simulations replay exactly.
    """

    PUB_LEN = 64

    def generate_keypair(self, rng) -> KeyPair:
        sig_priv = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        enc_priv = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        pub = _raw_public(sig_priv.public_key()) + _raw_public(enc_priv.public_key())
        priv = _raw_private(sig_priv) + _raw_private(enc_priv)
        return KeyPair(public=pub, private=priv)

    def sign(self, kp: KeyPair, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(kp.private[:32]).sign(message)

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public[:32]).verify(signature, message)
            return True
        except (InvalidSignature, ValueError):
            return False

    def encrypt_to(self, public: bytes, plaintext: bytes, rng) -> bytes:
        """Wrap plaintext for the holder of `public` (ephemeral ECDH)."""
        eph = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        shared = eph.exchange(X25519PublicKey.from_public_bytes(public[32:64]))
        key = hashlib.sha256(shared).digest()
        nonce = rng.randbytes(12)
        ct = ChaCha20Poly1305(key).encrypt(nonce, plaintext, b"")
        return _raw_public(eph.public_key()) + nonce + ct

    def decrypt_from(self, kp: KeyPair, ciphertext: bytes) -> bytes | None:
        if len(ciphertext) < 32 + 12 + 16:
            return None
        eph_pub, nonce, ct = ciphertext[:32], ciphertext[32:44], ciphertext[44:]
        priv = X25519PrivateKey.from_private_bytes(kp.private[32:64])
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        key = hashlib.sha256(shared).digest()
        try:
            return ChaCha20Poly1305(key).decrypt(nonce, ct, b"")
        except InvalidTag:
            return None


def _raw_public(key) -> bytes:
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def _raw_private(key) -> bytes:
    from cryptography.hazmat.primitives.serialization import (
        Encoding,
        NoEncryption,
        PrivateFormat,
    )

    return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())


PROVIDER = CryptoProvider()


def mac(secret: bytes, message: bytes) -> bytes:
    return hmac_mod.new(secret, message, hashlib.sha256).digest()[:MAC_TAG_LEN]


def verify_mac(secret: bytes, message: bytes, tag: bytes) -> bool:
    return hmac_mod.compare_digest(mac(secret, message), tag)


class RingAuthority:
    """Issues and verifies peer certificates; one per ring."""

    def __init__(self, rng):
        self.keypair = PROVIDER.generate_keypair(rng)
        self._next_serial = 1

    @property
    def public_key(self) -> bytes:
        return self.keypair.public

    def issue(self, peer_key: Key, public_key: bytes) -> Certificate:
        serial = self._next_serial
        self._next_serial += 1
        region = key_bytes(peer_key) + public_key + struct.pack(">Q", serial)
        return Certificate(
            peer_key=peer_key,
            public_key=public_key,
            serial=serial,
            authority_sig=PROVIDER.sign(self.keypair, region),
        )


def verify_certificate(cert: Certificate, authority_public: bytes) -> bool:
    return PROVIDER.verify(authority_public, cert.signed_region(), cert.authority_sig)


# ---------------------------------------------------------------------------
# certificate file form: length-prefixed (peer_key, public_key, serial,
# authority_sig), each field preceded by a 2-byte big-endian length.


def encode_certificate(cert: Certificate) -> bytes:
    fields = [
        key_bytes(cert.peer_key),
        cert.public_key,
        struct.pack(">Q", cert.serial),
        cert.authority_sig,
    ]
    out = bytearray()
    for f in fields:
        out += struct.pack(">H", len(f)) + f
    return bytes(out)


def decode_certificate(data: bytes) -> Certificate:
    fields = []
    off = 0
    for _ in range(4):
        if off + 2 > len(data):
            raise ValueError("truncated certificate")
        (flen,) = struct.unpack_from(">H", data, off)
        off += 2
        if off + flen > len(data):
            raise ValueError("truncated certificate field")
        fields.append(data[off : off + flen])
        off += flen
    if off != len(data):
        raise ValueError("trailing bytes after certificate")
    if len(fields[0]) != 20 or len(fields[2]) != 8:
        raise ValueError("bad certificate field size")
    return Certificate(
        peer_key=key_from_bytes(fields[0]),
        public_key=fields[1],
        serial=struct.unpack(">Q", fields[2])[0],
        authority_sig=fields[3],
    )


# ---------------------------------------------------------------------------
# session establishment: 2-message exchange (offer, confirm)


def build_session_offer(
    self_cert: Certificate,
    self_kp: KeyPair,
    peer_cert: Certificate,
    now: float,
    rng,
    lifetime: float = SESSION_LIFETIME,
) -> tuple[SessionKey, bytes]:
    """Draw a fresh secret and wrap it for the peer.

    Returns the initiator's session record and the offer payload; the
    secret travels only under the peer's public key. The enclosing
    envelope is signature-sealed, which authenticates the offer.
    """
    secret = rng.randbytes(SESSION_SECRET_LEN)
    wrapped = PROVIDER.encrypt_to(peer_cert.public_key, secret, rng)
    cert_blob = encode_certificate(self_cert)
    payload = (
        struct.pack(">dd", now, now + lifetime)
        + struct.pack(">H", len(cert_blob))
        + cert_blob
        + struct.pack(">H", len(wrapped))
        + wrapped
    )
    session = SessionKey(
        peer=peer_cert.peer_key,
        secret=secret,
        established_at=now,
        expires_at=now + lifetime,
    )
    return session, payload


def accept_session_offer(
    payload: bytes,
    self_kp: KeyPair,
    authority_public: bytes,
    now: float,
    max_age: float = SESSION_LIFETIME,
) -> tuple[SessionKey, Certificate, bytes] | None:
    """Validate an offer and unwrap its secret.

    Returns (session, initiator certificate, confirm payload), or None
    when the offer is stale, malformed, or fails certificate checks.
    The confirm echoes a digest of the offer, so no third message is
    needed.
    """
    try:
        established_at, expires_at = struct.unpack_from(">dd", payload, 0)
        off = 16
        (clen,) = struct.unpack_from(">H", payload, off)
        off += 2
        cert = decode_certificate(payload[off : off + clen])
        off += clen
        (wlen,) = struct.unpack_from(">H", payload, off)
        off += 2
        wrapped = payload[off : off + wlen]
        if off + wlen != len(payload):
            return None
    except (struct.error, ValueError):
        return None
    if not verify_certificate(cert, authority_public):
        return None
    if established_at > now or now - established_at > max_age or expires_at <= now:
        return None  # stale or clock-skewed offer
    secret = PROVIDER.decrypt_from(self_kp, wrapped)
    if secret is None or len(secret) != SESSION_SECRET_LEN:
        return None
    session = SessionKey(
        peer=cert.peer_key,
        secret=secret,
        established_at=established_at,
        expires_at=expires_at,
    )
    confirm = hashlib.sha256(payload).digest()
    return session, cert, confirm


def check_session_confirm(offer_payload: bytes, confirm_payload: bytes) -> bool:
    return hmac_mod.compare_digest(
        hashlib.sha256(offer_payload).digest(), confirm_payload
    )
