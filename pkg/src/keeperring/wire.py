"""Canonical wire encoding and the authentication envelope.

One envelope per datagram, big-endian throughout. The authenticated
region covers every field except hop_count and the tag itself, so
intermediate peers can bump the hop counter without re-signing; each
forwarding hop re-seals the envelope for its own link session instead.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .keyspace import Key, KEY_MOD, key_bytes, key_from_bytes

WIRE_VERSION = 1
MAX_DATAGRAM = 1400

# version, msg_type, sender, dest, seq, hop_count, auth_kind, payload_len
_HEADER = struct.Struct(">BB20s20sQBBH")
_HOP_COUNT_OFFSET = 1 + 1 + 20 + 20 + 8  # byte index of hop_count in the header


class MsgType(enum.IntEnum):
    FIND_SUCC = 1
    FIND_SUCC_REPLY = 2
    GROUP_QUERY = 3
    GROUP_REPLY = 4
    HEARTBEAT = 5
    HEARTBEAT_ACK = 6
    HANDSHAKE1 = 7
    HANDSHAKE2 = 8
    REVOCATION = 9
    PING = 10
    PING_ECHO = 11
    THROUGHPUT_REQ = 12
    DATA_PACKET = 13
    POTATO = 14
    POTATO_ACK = 15
    POTATO_ACK2 = 16
    APP_PAYLOAD = 17


class AuthKind(enum.IntEnum):
    SIGNATURE = 0
    MAC = 1
    # Insecure-mode rings carry no tag at all; never accepted by a
    # secure-mode ring.
    NONE = 2


class WireError(ValueError):
    """Base class for malformed-datagram errors."""


class TruncatedError(WireError):
    pass


class LengthError(WireError):
    pass


class VersionError(WireError):
    pass


class UnknownTypeError(WireError):
    pass


class Reject(enum.Enum):
    TAMPER = "tamper"
    UNAUTHORIZED = "unauthorized"
    REPLAY = "replay"


class RejectedError(Exception):
    """An envelope failed authentication on open()."""

    def __init__(self, reason: Reject, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason


@dataclass
class Envelope:
    msg_type: MsgType
    sender: Key
    dest: Key
    seq: int
    payload: bytes
    hop_count: int = 0
    auth_kind: AuthKind = AuthKind.NONE
    auth_tag: bytes = b""
    version: int = WIRE_VERSION

    def authenticated_region(self) -> bytes:
        """Every encoded byte except hop_count and the trailing tag."""
        head = _HEADER.pack(
            self.version,
            int(self.msg_type),
            key_bytes(self.sender),
            key_bytes(self.dest),
            self.seq,
            0,  # hop_count excluded: pinned to zero in the region
            int(self.auth_kind),
            len(self.payload),
        )
        return head + self.payload


def encode(env: Envelope) -> bytes:
    if not 0 <= env.sender < KEY_MOD or not 0 <= env.dest < KEY_MOD:
        raise WireError("key field out of range")
    if not 0 <= env.seq < 1 << 64:
        raise WireError("seq out of range")
    if not 0 <= env.hop_count <= 0xFF:
        raise WireError("hop_count out of range")
    if len(env.payload) > 0xFFFF or len(env.auth_tag) > 0xFFFF:
        raise WireError("field too long")
    head = _HEADER.pack(
        env.version,
        int(env.msg_type),
        key_bytes(env.sender),
        key_bytes(env.dest),
        env.seq,
        env.hop_count,
        int(env.auth_kind),
        len(env.payload),
    )
    return head + env.payload + struct.pack(">H", len(env.auth_tag)) + env.auth_tag


def decode(data: bytes) -> Envelope:
    if len(data) < _HEADER.size:
        raise TruncatedError(f"datagram shorter than fixed header: {len(data)}")
    version, mtype, sender, dest, seq, hops, akind, plen = _HEADER.unpack_from(data)
    if version != WIRE_VERSION:
        raise VersionError(f"unsupported version {version}")
    try:
        msg_type = MsgType(mtype)
    except ValueError:
        raise UnknownTypeError(f"unknown msg_type {mtype}") from None
    try:
        auth_kind = AuthKind(akind)
    except ValueError:
        raise UnknownTypeError(f"unknown auth_kind {akind}") from None
    off = _HEADER.size
    if len(data) < off + plen + 2:
        raise TruncatedError("payload or tag length exceeds datagram")
    payload = data[off : off + plen]
    off += plen
    (tlen,) = struct.unpack_from(">H", data, off)
    off += 2
    if len(data) < off + tlen:
        raise TruncatedError("tag length exceeds datagram")
    if len(data) != off + tlen:
        raise LengthError("trailing bytes after envelope")
    return Envelope(
        msg_type=msg_type,
        sender=key_from_bytes(sender),
        dest=key_from_bytes(dest),
        seq=seq,
        payload=payload,
        hop_count=hops,
        auth_kind=auth_kind,
        auth_tag=data[off : off + tlen],
        version=version,
    )


def bump_hop_count(data: bytes) -> bytes:
    """Increment hop_count in an already-encoded datagram in place.

    Valid because hop_count is outside the authenticated region.
    """
    if len(data) <= _HOP_COUNT_OFFSET:
        raise TruncatedError("datagram shorter than fixed header")
    hops = data[_HOP_COUNT_OFFSET]
    if hops >= 0xFF:
        raise WireError("hop_count overflow")
    return data[:_HOP_COUNT_OFFSET] + bytes([hops + 1]) + data[_HOP_COUNT_OFFSET + 1 :]


# ---------------------------------------------------------------------------
# seal / open


@dataclass
class AuthContext:
    """Everything a node needs to seal and open envelopes.

    secure=False disables authentication entirely (baseline mode).
    sign/verify/mac callables come from the auth module; authorize
    resolves a sender key to a certificate via the directory cache.
    """

    secure: bool
    self_key: Key
    sign: object = None  # Callable[[bytes], bytes]
    verify: object = None  # Callable[[Key, bytes, bytes], bool]
    mac: object = None  # Callable[[Key, bytes], bytes | None]; None if no session
    verify_mac: object = None  # Callable[[Key, bytes, bytes], bool]
    authorize: object = None  # Callable[[Key], bool]
    # Inbound replay watermarks: MAC-epoch resets when the session
    # regenerates, the signature watermark never resets (the signing key
    # does not change, so old signed envelopes must stay dead forever).
    last_seq: dict = field(default_factory=dict)  # sender -> last MAC seq
    sig_last_seq: dict = field(default_factory=dict)  # sender -> last signed seq
    next_seq: dict = field(default_factory=dict)  # receiver -> next seq to use


def seal(env: Envelope, ctx: AuthContext, link_peer: Key,
         force_signature: bool = False) -> bytes:
    """Assign the link seq, authenticate, and encode for transmission.

    Uses the MAC session with link_peer when one exists, falling back to
    the node's signing key for bootstrap traffic. Handshake confirms
    force the signature path so they stay verifiable before the new
    session activates.
    """
    env.seq = ctx.next_seq.get(link_peer, 1)
    ctx.next_seq[link_peer] = env.seq + 1
    if not ctx.secure:
        env.auth_kind = AuthKind.NONE
        env.auth_tag = b""
    else:
        tag = None
        if not force_signature and ctx.mac is not None:
            env.auth_kind = AuthKind.MAC
            tag = ctx.mac(link_peer, env.authenticated_region())
        if tag is not None:
            env.auth_kind = AuthKind.MAC
            env.auth_tag = tag
        else:
            env.auth_kind = AuthKind.SIGNATURE
            env.auth_tag = ctx.sign(env.authenticated_region())
    data = encode(env)
    if len(data) > MAX_DATAGRAM:
        raise WireError(f"datagram exceeds {MAX_DATAGRAM} bytes: {len(data)}")
    return data


def open_envelope(data: bytes, ctx: AuthContext) -> Envelope:
    """Decode, authenticate, authorize, and replay-check a datagram.

    Raises WireError for malformed input and RejectedError when the
    envelope fails tag verification, sender authorization, or sequence
    monotonicity.
    """
    env = decode(data)
    if not ctx.secure:
        # Baseline ring: structural decode only.
        return env
    if env.auth_kind == AuthKind.NONE:
        raise RejectedError(Reject.TAMPER, "unauthenticated envelope on secure ring")
    region = env.authenticated_region()
    if env.auth_kind == AuthKind.MAC:
        # A session implies the sender was authorized when it was set up;
        # the authorize check after the tag still catches revocations.
        if not ctx.verify_mac(env.sender, region, env.auth_tag):
            raise RejectedError(Reject.TAMPER, "bad MAC")
        if not ctx.authorize(env.sender):
            raise RejectedError(Reject.UNAUTHORIZED, "sender not authorized")
        watermarks = ctx.last_seq
    else:
        # Signature verification needs the sender's certificate, so
        # authorization (directory cache) runs first.
        if not ctx.authorize(env.sender):
            raise RejectedError(Reject.UNAUTHORIZED, "sender not authorized")
        if not ctx.verify(env.sender, region, env.auth_tag):
            raise RejectedError(Reject.TAMPER, "bad signature")
        watermarks = ctx.sig_last_seq
    last = watermarks.get(env.sender, 0)
    if env.seq <= last:
        raise RejectedError(Reject.REPLAY, f"seq {env.seq} <= {last}")
    watermarks[env.sender] = env.seq
    return env


def reset_link(ctx: AuthContext, peer: Key) -> None:
    """Restart the MAC-epoch inbound watermark on session (re)establishment.

    The outbound counter keeps rolling so in-flight and pre-activation
    envelopes stay monotonic from the peer's point of view.
    """
    ctx.last_seq.pop(peer, None)


# ---------------------------------------------------------------------------
# transport adapters


class TransportError(OSError):
    pass


class UdpTransport:
    """Thin UDP adapter: one envelope per datagram, at-most-once, lossy."""

    def __init__(self, bind: "NetAddr | None" = None):
        import socket

        from .keyspace import NetAddr

        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        if bind is not None:
            self._sock.bind((bind.ip, bind.port))
        self._netaddr_cls = NetAddr

    @property
    def local_addr(self):
        ip, port = self._sock.getsockname()
        return self._netaddr_cls(ip, port)

    def send(self, addr, data: bytes) -> None:
        if len(data) > MAX_DATAGRAM:
            raise TransportError(f"datagram exceeds {MAX_DATAGRAM} bytes")
        self._sock.sendto(data, (addr.ip, addr.port))

    def recv(self, timeout: float | None = None):
        """Blocking receive; returns (NetAddr, bytes) or None on timeout."""
        import socket

        self._sock.settimeout(timeout)
        try:
            data, (ip, port) = self._sock.recvfrom(65536)
        except socket.timeout:
            return None
        return self._netaddr_cls(ip, port), data

    def close(self) -> None:
        self._sock.close()


class InMemoryTransport:
    """Loopback transport with the same contract as the UDP adapter.

    A shared hub delivers datagrams between endpoints registered on it,
    optionally dropping each with a fixed probability drawn from the
    hub's seeded RNG.
    """

    class Hub:
        def __init__(self, drop_rate: float = 0.0, seed: int = 0):
            import random

            self.endpoints: dict = {}
            self.drop_rate = drop_rate
            self.rng = random.Random(seed)

        def attach(self, addr, transport) -> None:
            self.endpoints[addr] = transport

    def __init__(self, hub: "InMemoryTransport.Hub", addr):
        self.hub = hub
        self.addr = addr
        self.inbox: list = []
        hub.attach(addr, self)

    @property
    def local_addr(self):
        return self.addr

    def send(self, addr, data: bytes) -> None:
        if len(data) > MAX_DATAGRAM:
            raise TransportError(f"datagram exceeds {MAX_DATAGRAM} bytes")
        if self.hub.drop_rate > 0 and self.hub.rng.random() < self.hub.drop_rate:
            return
        target = self.hub.endpoints.get(addr)
        if target is not None:
            target.inbox.append((self.addr, bytes(data)))

    def recv(self, timeout: float | None = None):
        if self.inbox:
            return self.inbox.pop(0)
        return None

    def close(self) -> None:
        self.hub.endpoints.pop(self.addr, None)
