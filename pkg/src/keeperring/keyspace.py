"""160-bit ring key arithmetic and address-derived peer keys.

Peer keys embed the owner's IPv4 address and port in the 6 least
significant bytes; the 14 most significant bytes are the SHA-1 digest of
that 6-byte address string, which spreads peers uniformly around the
ring while keeping every key self-validating and traceable to a network
endpoint.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

KEY_BITS = 160
KEY_BYTES = 20
KEY_MOD = 1 << KEY_BITS

# Keys are plain ints in [0, 2^160), always reduced mod 2^160.
Key = int

_ADDR_RE = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3}):(\d{1,5})$")


class AddressError(ValueError):
    """Raised for malformed or non-IPv4 network addresses."""


@dataclass(frozen=True, order=True)
class NetAddr:
    """IPv4 endpoint; serializes to exactly 6 bytes, address then port."""

    ip: str
    port: int

    def __post_init__(self) -> None:
        _parse_ipv4(self.ip)
        if not 0 <= self.port <= 0xFFFF:
            raise AddressError(f"port out of range: {self.port}")

    def pack(self) -> bytes:
        return _parse_ipv4(self.ip) + self.port.to_bytes(2, "big")

    @classmethod
    def unpack(cls, data: bytes) -> "NetAddr":
        if len(data) != 6:
            raise AddressError(f"need 6 bytes, got {len(data)}")
        ip = ".".join(str(b) for b in data[:4])
        return cls(ip, int.from_bytes(data[4:6], "big"))

    @classmethod
    def parse(cls, text: str) -> "NetAddr":
        m = _ADDR_RE.match(text.strip())
        if m is None:
            if ":" in text and text.count(":") > 1:
                raise AddressError(f"IPv6 addresses are not supported: {text!r}")
            raise AddressError(f"expected ip:port, got {text!r}")
        return cls(".".join(m.group(i) for i in range(1, 5)), int(m.group(5)))

    def __str__(self) -> str:
        return f"{self.ip}:{self.port}"


def _parse_ipv4(ip: str) -> bytes:
    parts = ip.split(".")
    if len(parts) != 4:
        raise AddressError(f"not a dotted-quad IPv4 address: {ip!r}")
    try:
        octets = [int(p) for p in parts]
    except ValueError:
        raise AddressError(f"not a dotted-quad IPv4 address: {ip!r}") from None
    if any(not 0 <= o <= 255 for o in octets):
        raise AddressError(f"octet out of range in {ip!r}")
    return bytes(octets)


def derive_key(addr: NetAddr) -> Key:
    """Assign the ring key for a network address.

    SHA-1 of the 6-byte packed address, with the 6 least significant
    bytes replaced by the address itself. Deterministic, and injective
    because the address is embedded verbatim.
    """
    packed = addr.pack()
    digest = hashlib.sha1(packed).digest()
    return int.from_bytes(digest[:14] + packed, "big")


def validate_key(key: Key) -> bool:
    """Check that a key's high 14 bytes hash-match its embedded address."""
    if not 0 <= key < KEY_MOD:
        return False
    raw = key_bytes(key)
    return hashlib.sha1(raw[14:20]).digest()[:14] == raw[:14]


def addr_of_key(key: Key) -> NetAddr:
    """Extract the embedded network address from a peer key.

    Meaningful only for keys that pass validate_key; the low 6 bytes are
    decoded unconditionally.
    """
    return NetAddr.unpack(key_bytes(key)[14:20])


def key_bytes(key: Key) -> bytes:
    return (key % KEY_MOD).to_bytes(KEY_BYTES, "big")


def key_from_bytes(data: bytes) -> Key:
    if len(data) != KEY_BYTES:
        raise ValueError(f"need {KEY_BYTES} bytes, got {len(data)}")
    return int.from_bytes(data, "big")


def key_hex(key: Key) -> str:
    """Canonical textual form: 40 lowercase hex digits, MSB first."""
    return key_bytes(key).hex()


def key_from_hex(text: str) -> Key:
    text = text.strip().lower()
    if len(text) != 2 * KEY_BYTES or not all(c in "0123456789abcdef" for c in text):
        raise ValueError(f"expected 40 hex digits, got {text!r}")
    return int(text, 16)


def dist_cw(a: Key, b: Key) -> int:
    """Clockwise distance from a to b: (b - a) mod 2^160."""
    return (b - a) % KEY_MOD


def in_range_open_closed(x: Key, a: Key, b: Key) -> bool:
    """True iff x lies in the half-open ring interval (a, b]."""
    d = dist_cw(a, x)
    return d != 0 and d <= dist_cw(a, b)


def finger_target(k: Key, i: int) -> Key:
    """The i-th finger target for key k: (k + 2^i) mod 2^160."""
    if not 0 <= i < KEY_BITS:
        raise ValueError(f"finger index out of range: {i}")
    return (k + (1 << i)) % KEY_MOD
