"""Payload codecs for each message type.

The envelope (wire module) frames and authenticates; these are the
type-specific bodies. All integers big-endian, group lists carried as
count byte + leader index byte + 20-byte keys.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .keyspace import Key, key_bytes, key_from_bytes

# FindSucc flag bits
FS_VERIFY = 1  # answer from local view only, do not forward
FS_REFRESH = 2  # query is a finger refresh (reply gets cross-checked)

# FindSuccReply flag bits
FSR_COVERED = 1  # replier's merged view covers the key; leader authoritative
FSR_DEFERRED = 2  # replier's view is immature or cannot adjudicate
FSR_REFUTED = 4  # replier can prove the claimed leader does not own the key

# GroupQuery flag bits
GQ_NOTIFY_JOIN = 1  # sender announces itself as a new ring neighbor


def pack_keys(keys: list[Key]) -> bytes:
    return bytes([len(keys)]) + b"".join(key_bytes(k) for k in keys)


def unpack_keys(data: bytes, off: int) -> tuple[list[Key], int]:
    n = data[off]
    off += 1
    keys = []
    for _ in range(n):
        keys.append(key_from_bytes(data[off : off + 20]))
        off += 20
    return keys, off


def pack_window(members: list[Key], leader_index: int) -> bytes:
    return bytes([len(members), leader_index]) + b"".join(
        key_bytes(k) for k in members
    )


def unpack_window(data: bytes, off: int) -> tuple[list[Key], int, int]:
    n, leader_index = data[off], data[off + 1]
    off += 2
    members = []
    for _ in range(n):
        members.append(key_from_bytes(data[off : off + 20]))
        off += 20
    return members, leader_index, off


@dataclass
class FindSucc:
    flags: int
    request_id: int
    query_key: Key
    origin: Key
    claimed: Key = 0  # leader under verification; present iff FS_VERIFY

    def pack(self) -> bytes:
        out = (
            struct.pack(">BQ", self.flags, self.request_id)
            + key_bytes(self.query_key)
            + key_bytes(self.origin)
        )
        if self.flags & FS_VERIFY:
            out += key_bytes(self.claimed)
        return out

    @classmethod
    def unpack(cls, data: bytes) -> "FindSucc":
        flags, request_id = struct.unpack_from(">BQ", data)
        claimed = 0
        if flags & FS_VERIFY and len(data) >= 69:
            claimed = key_from_bytes(data[49:69])
        return cls(
            flags=flags,
            request_id=request_id,
            query_key=key_from_bytes(data[9:29]),
            origin=key_from_bytes(data[29:49]),
            claimed=claimed,
        )


@dataclass
class FindSuccReply:
    flags: int
    request_id: int
    query_key: Key
    members: list[Key]
    leader_index: int

    @property
    def leader(self) -> Key | None:
        if not self.members:
            return None
        return self.members[self.leader_index]

    def pack(self) -> bytes:
        return (
            struct.pack(">BQ", self.flags, self.request_id)
            + key_bytes(self.query_key)
            + pack_window(self.members, self.leader_index)
        )

    @classmethod
    def unpack(cls, data: bytes) -> "FindSuccReply":
        flags, request_id = struct.unpack_from(">BQ", data)
        query_key = key_from_bytes(data[9:29])
        members, leader_index, _ = unpack_window(data, 29)
        return cls(flags, request_id, query_key, members, leader_index)


@dataclass
class GroupQuery:
    flags: int
    request_id: int
    members: list[Key] = field(default_factory=list)
    leader_index: int = 0

    def pack(self) -> bytes:
        return struct.pack(">BQ", self.flags, self.request_id) + pack_window(
            self.members, self.leader_index
        )

    @classmethod
    def unpack(cls, data: bytes) -> "GroupQuery":
        flags, request_id = struct.unpack_from(">BQ", data)
        members, leader_index, _ = unpack_window(data, 9)
        return cls(flags, request_id, members, leader_index)


@dataclass
class GroupReply:
    request_id: int
    members: list[Key]
    leader_index: int

    def pack(self) -> bytes:
        return struct.pack(">Q", self.request_id) + pack_window(
            self.members, self.leader_index
        )

    @classmethod
    def unpack(cls, data: bytes) -> "GroupReply":
        (request_id,) = struct.unpack_from(">Q", data)
        members, leader_index, _ = unpack_window(data, 8)
        return cls(request_id, members, leader_index)


@dataclass
class Heartbeat:
    probe_id: int

    def pack(self) -> bytes:
        return struct.pack(">Q", self.probe_id)

    @classmethod
    def unpack(cls, data: bytes) -> "Heartbeat":
        return cls(struct.unpack(">Q", data[:8])[0])


@dataclass
class Revocation:
    peer_key: Key
    serial: int
    authority_sig: bytes

    def pack(self) -> bytes:
        return (
            key_bytes(self.peer_key)
            + struct.pack(">Q", self.serial)
            + struct.pack(">H", len(self.authority_sig))
            + self.authority_sig
        )

    @classmethod
    def unpack(cls, data: bytes) -> "Revocation":
        peer_key = key_from_bytes(data[:20])
        serial, slen = struct.unpack_from(">QH", data, 20)
        return cls(peer_key, serial, data[30 : 30 + slen])


@dataclass
class Ping:
    token: int
    origin: Key

    def pack(self) -> bytes:
        return struct.pack(">Q", self.token) + key_bytes(self.origin)

    @classmethod
    def unpack(cls, data: bytes) -> "Ping":
        return cls(struct.unpack(">Q", data[:8])[0], key_from_bytes(data[8:28]))


@dataclass
class PingEcho:
    token: int

    def pack(self) -> bytes:
        return struct.pack(">Q", self.token)

    @classmethod
    def unpack(cls, data: bytes) -> "PingEcho":
        return cls(struct.unpack(">Q", data[:8])[0])


@dataclass
class ThroughputReq:
    token: int
    origin: Key
    n_packets: int

    def pack(self) -> bytes:
        return (
            struct.pack(">Q", self.token)
            + key_bytes(self.origin)
            + struct.pack(">I", self.n_packets)
        )

    @classmethod
    def unpack(cls, data: bytes) -> "ThroughputReq":
        token = struct.unpack(">Q", data[:8])[0]
        origin = key_from_bytes(data[8:28])
        n = struct.unpack(">I", data[28:32])[0]
        return cls(token, origin, n)


@dataclass
class DataPacket:
    token: int
    index: int

    def pack(self) -> bytes:
        return struct.pack(">QI", self.token, self.index)

    @classmethod
    def unpack(cls, data: bytes) -> "DataPacket":
        token, index = struct.unpack(">QI", data[:12])
        return cls(token, index)


@dataclass
class Potato:
    potato_id: int
    originator: Key
    passer: Key
    pass_count: int
    pass_seq: int
    injected_at: float
    min_residency: float
    ttl: int

    def pack(self) -> bytes:
        return (
            struct.pack(">Q", self.potato_id)
            + key_bytes(self.originator)
            + key_bytes(self.passer)
            + struct.pack(
                ">IIddH",
                self.pass_count,
                self.pass_seq,
                self.injected_at,
                self.min_residency,
                self.ttl,
            )
        )

    @classmethod
    def unpack(cls, data: bytes) -> "Potato":
        potato_id = struct.unpack(">Q", data[:8])[0]
        originator = key_from_bytes(data[8:28])
        passer = key_from_bytes(data[28:48])
        pass_count, pass_seq, injected_at, min_residency, ttl = struct.unpack_from(
            ">IIddH", data, 48
        )
        return cls(
            potato_id, originator, passer, pass_count, pass_seq,
            injected_at, min_residency, ttl,
        )


@dataclass
class PotatoAck:
    potato_id: int
    pass_seq: int

    def pack(self) -> bytes:
        return struct.pack(">QI", self.potato_id, self.pass_seq)

    @classmethod
    def unpack(cls, data: bytes) -> "PotatoAck":
        potato_id, pass_seq = struct.unpack(">QI", data[:12])
        return cls(potato_id, pass_seq)


@dataclass
class AppPayload:
    token: int
    hops: list[Key]
    body: bytes = b""

    def pack(self) -> bytes:
        return struct.pack(">Q", self.token) + pack_keys(self.hops) + self.body

    @classmethod
    def unpack(cls, data: bytes) -> "AppPayload":
        token = struct.unpack(">Q", data[:8])[0]
        hops, off = unpack_keys(data, 8)
        return cls(token, hops, data[off:])
