"""Per-peer overlay state machine.

Each Node is a single-threaded event consumer: the host (simulator or
UDP daemon) feeds it datagrams and periodic ticks, and every handler
returns the datagrams to transmit. Nothing here touches a wall clock or
global RNG; time and randomness come from the host and the node's own
seeded stream, so simulations replay bit-for-bit.

Beyond plain ring maintenance (join, stabilization, heartbeats, finger
refresh) the node polices its neighborhood: group membership lists are
cross-checked against its own view and cached views of other members,
and every finger-refresh answer can be re-asked of a second peer from
the answering group. Conflicting observations accumulate per suspect
peer; two distinct witnesses make it malicious and trigger
excommunication through the ring authority.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import messages as msg
from .auth import (
    PROVIDER,
    Certificate,
    KeyPair,
    SessionKey,
    accept_session_offer,
    build_session_offer,
    check_session_confirm,
    mac as hmac_tag,
    verify_mac as hmac_check,
)
from .directory import (
    REFUSED,
    AuthCache,
    RevocationNotice,
    authorize_sender,
    verify_notice,
)
from .keyspace import (
    KEY_BITS,
    KEY_MOD,
    Key,
    NetAddr,
    addr_of_key,
    derive_key,
    dist_cw,
    finger_target,
    in_range_open_closed,
    key_hex,
)
from .routing import (
    RouteClass,
    RouteKind,
    RoutingMode,
    classify,
    next_hop,
    window_owner,
)
from .wire import (
    AuthContext,
    Envelope,
    MsgType,
    RejectedError,
    WireError,
    open_envelope,
    reset_link,
    seal,
)

HALF_RING = KEY_MOD // 2


class Meter:
    """Counts chargeable work done inside one handler invocation."""

    __slots__ = ("sign", "verify", "mac", "lookups")

    def __init__(self):
        self.sign = self.verify = self.mac = self.lookups = 0

    def reset(self):
        self.sign = self.verify = self.mac = self.lookups = 0


@dataclass
class NodeConfig:
    ring_domain: str = "ring.local"
    group_size: int = 5
    secure: bool = True
    routing_mode: RoutingMode = RoutingMode.DETERMINISTIC
    tick_interval: float = 0.5
    hop_limit: int = 32
    heartbeat_miss_limit: int = 3
    join_max_attempts: int = 5
    verify_sample_rate: float = 1.0
    session_lifetime: float = 300.0
    negative_ttl: float = 60.0

    def __post_init__(self):
        if self.group_size < 3 or self.group_size % 2 == 0:
            raise ValueError("group_size must be odd and >= 3")


@dataclass
class GroupList:
    """Ordered ring-contiguous window of peers centered on its leader."""

    members: list
    leader_index: int

    @property
    def leader(self) -> Key:
        return self.members[self.leader_index]

    def copy(self) -> "GroupList":
        return GroupList(list(self.members), self.leader_index)


@dataclass
class FingerEntry:
    index: int
    target: Key
    group: GroupList
    refreshed_at: float


class Verdict(enum.Enum):
    CONSISTENT = "consistent"
    SUSPECT = "suspect"
    MALICIOUS = "malicious"


@dataclass
class SuspicionRecord:
    witnesses: dict = field(default_factory=dict)  # witness -> last seen time
    evidence: list = field(default_factory=list)
    malicious: bool = False

    def live_witnesses(self, now: float, ttl: float) -> set:
        self.witnesses = {
            w: t for w, t in self.witnesses.items() if now - t <= ttl
        }
        return set(self.witnesses)


class Behavior:
    """Adversary hook points; the default is honest at every one."""

    name = "honest"

    def on_forward(self, node: "Node", env: Envelope, hop: Key, transit: bool):
        """Return the hop to use, or None to silently drop.

        transit is False for traffic the node itself originated.
        """
        return hop

    def fake_findsucc_reply(self, node: "Node", fs: msg.FindSucc):
        """Return a (members, leader_index) fabrication, or None for honest."""
        return None

    def mutate_group_reply(self, node: "Node", members: list, leader_index: int):
        return members, leader_index

    def on_tick(self, node: "Node", now: float) -> None:
        pass


HONEST = Behavior()

# Pending-request kinds
_P_JOIN = "join"
_P_FINGER = "finger"
_P_VERIFY = "verify"
_P_EXCHANGE = "exchange"
_P_CONFIRM = "confirm"
_P_AUDIT = "audit"


class Node:
    def __init__(
        self,
        addr: NetAddr,
        self_key: Key,
        keypair: KeyPair,
        certificate: Certificate | None,
        authority_public: bytes,
        config: NodeConfig,
        rng,
        lookup_fn=None,
        report_fn=None,
    ):
        self.addr = addr
        self.self_key = self_key
        self.keypair = keypair
        self.certificate = certificate
        self.authority_public = authority_public
        self.config = config
        self.rng = rng
        self.lookup_fn = lookup_fn or (lambda key: None)
        self.report_fn = report_fn or (lambda key, witnesses: None)
        self.behavior: Behavior = HONEST
        self.app_cb = None
        self.meter = Meter()

        # Ring state
        self.predecessor: Key | None = None
        self.successor: Key | None = None
        self.group = GroupList([self_key], 0)
        self.fingers: list = [None] * KEY_BITS
        self.joined = False
        self.join_failed = False
        self.join_complete = False
        self.dirty = False  # any table change since last cleared (quiescence)

        # Knowledge of the neighborhood
        self.confirmed: dict = {}  # peer key -> last confirmed time
        self.member_windows: dict = {}  # peer key -> (GroupList, cached_at)
        self.cache_ttl = (2 * (config.group_size - 1) + 2) * config.tick_interval

        # Policing
        self.suspicion: dict = {}  # peer key -> SuspicionRecord
        self.blacklist: set = set()
        self.revocations_seen: set = set()
        self.pending_reports: dict = {}  # peer key -> witness set, retried

        # Authentication
        self.cache = AuthCache(negative_ttl=config.negative_ttl)
        self.sessions: dict = {}  # peer key -> SessionKey
        self.pending_offers: dict = {}  # peer key -> (SessionKey, payload, sent_at)
        self.session_roles: dict = {}  # peer key -> True if we initiated
        if config.secure:
            # Loopback session: self-addressed traffic (e.g. a potato pass
            # landing in our own arc) rides the network like any other
            # message and still has to pass open().
            self.sessions[self_key] = SessionKey(
                peer=self_key,
                secret=rng.randbytes(32),
                established_at=0.0,
                expires_at=float("inf"),
            )
        self.auth = AuthContext(
            secure=config.secure,
            self_key=self_key,
            sign=self._sign,
            verify=self._verify_sig,
            mac=self._mac_for,
            verify_mac=self._verify_mac,
            authorize=self._is_authorized,
        )

        # Liveness tracking
        self.probe_misses: dict = {}  # peer key -> consecutive misses
        self.outstanding_probes: dict = {}  # probe id -> (peer, sent_at)

        # Request bookkeeping
        self.pending: dict = {}  # request id -> dict
        self.request_timeout = 3.0 * config.tick_interval
        self.strike_ttl = 120.0 * config.tick_interval

        # Schedules
        self._refresh_cursor = 0
        self._exchange_cursor = 0
        self._join_bootstrap: NetAddr | None = None
        self._join_attempts = 0
        self._join_next_retry = 0.0
        self._fill_cursor: int | None = None

        # Hot-potato app state
        self.potato_pending: dict = {}  # id -> pass in flight we sent
        self.potato_held: dict = {}  # id -> potato waiting for our ack2
        self.potato_last_seen: dict = {}  # id -> last pass_seq handled
        self.potato_lost = 0  # passes given up after retries (flagged)

        self._out: list = []
        self._now = 0.0

    # ------------------------------------------------------------------
    # crypto closures wired into the auth context

    def _sign(self, region: bytes) -> bytes:
        self.meter.sign += 1
        return PROVIDER.sign(self.keypair, region)

    def _verify_sig(self, sender: Key, region: bytes, tag: bytes) -> bool:
        cert = self.cache.get_certificate(sender)
        if cert is None:
            return False
        self.meter.verify += 1
        return PROVIDER.verify(cert.public_key, region, tag)

    def _mac_for(self, peer: Key, region: bytes):
        session = self.sessions.get(peer)
        if session is None or session.expired(self._now):
            return None
        self.meter.mac += 1
        return hmac_tag(session.secret, region)

    def _verify_mac(self, sender: Key, region: bytes, tag: bytes) -> bool:
        session = self.sessions.get(sender)
        if session is None or session.expired(self._now):
            return False
        self.meter.mac += 1
        return hmac_check(session.secret, region, tag)

    def _is_authorized(self, peer: Key) -> bool:
        if peer in self.blacklist:
            return False
        if peer == self.self_key:
            return True
        return self._certificate_for(peer) is not None

    def _certificate_for(self, peer: Key) -> Certificate | None:
        def lookup(key):
            self.meter.lookups += 1
            return self.lookup_fn(key)

        result = authorize_sender(self.cache, peer, self._now, lookup)
        return None if result is REFUSED else result

    # ------------------------------------------------------------------
    # sending

    def _emit(self, addr: NetAddr, data: bytes) -> None:
        self._out.append((addr, data))

    def _send(
        self,
        peer: Key,
        msg_type: MsgType,
        payload: bytes,
        dest: Key | None = None,
        hop_count: int = 0,
    ) -> None:
        """Seal and queue one datagram for a directly-addressed peer."""
        env = Envelope(
            msg_type=msg_type,
            sender=self.self_key,
            dest=dest if dest is not None else peer,
            seq=0,
            payload=payload,
            hop_count=hop_count,
        )
        if self.config.secure and peer not in self.sessions:
            self._maybe_offer_session(peer)
        data = seal(env, self.auth, peer)
        self._emit(addr_of_key(peer), data)

    def _maybe_offer_session(self, peer: Key) -> None:
        """Queue a handshake so later traffic can switch from signatures.

        Only the lower-keyed side of a pair ever offers; the higher side
        keeps signing until the offer arrives. That makes session setup
        race-free: offers never cross.
        """
        if not self.config.secure or peer in self.pending_offers:
            return
        if self.self_key > peer or self.certificate is None:
            return
        peer_cert = self._certificate_for(peer)
        if peer_cert is None:
            return
        session, payload = build_session_offer(
            self.certificate,
            self.keypair,
            peer_cert,
            self._now,
            self.rng,
            lifetime=self.config.session_lifetime,
        )
        self.meter.sign += 1  # secret wrapping, charged like a signature
        self.pending_offers[peer] = (session, payload, self._now)
        env = Envelope(
            msg_type=MsgType.HANDSHAKE1,
            sender=self.self_key,
            dest=peer,
            seq=0,
            payload=payload,
        )
        self._emit(addr_of_key(peer), seal(env, self.auth, peer))

    # ------------------------------------------------------------------
    # host entry points

    def handle_datagram(self, data: bytes, now: float):
        """Process one received datagram.

        Returns (outcome, sends): outcome is one of "delivered",
        "rejected:<reason>", "drop_hoplimit", or "malformed"; sends is a
        list of (NetAddr, bytes) to transmit.
        """
        self._now = now
        self._out = []
        try:
            env = open_envelope(data, self.auth)
        except RejectedError as e:
            return f"rejected:{e.reason.value}", self._take_out()
        except WireError:
            return "malformed", self._take_out()
        if env.sender in self.blacklist:
            return "rejected:unauthorized", self._take_out()
        self.probe_misses.pop(env.sender, None)  # any traffic proves liveness
        if (
            self.config.secure
            and self.self_key < env.sender
            and env.sender not in self.sessions
        ):
            # Signed traffic from a higher-keyed peer: we are the one who
            # must set up the MAC session.
            self._maybe_offer_session(env.sender)
        outcome = self._dispatch(env) or "delivered"
        return outcome, self._take_out()

    def on_tick(self, now: float):
        self._now = now
        self._out = []
        self.behavior.on_tick(self, now)
        if not self.joined:
            self._join_tick()
            return self._take_out()
        self._probe_neighbors()
        self._refresh_one_finger()
        self._exchange_with_one_member()
        self._regenerate_sessions()
        self._expire_pending()
        self._retry_reports()
        self._retry_potatoes()
        return self._take_out()

    def _take_out(self) -> list:
        out, self._out = self._out, []
        return out

    # ------------------------------------------------------------------
    # join

    def start_join(self, bootstrap: NetAddr, now: float):
        """Contact the well-known peer and locate our ring position."""
        self._now = now
        self._out = []
        self._join_bootstrap = bootstrap
        self._join_attempts = 0
        self._send_join_query()
        return self._take_out()

    def start_alone(self) -> None:
        """Become the first node of a fresh ring."""
        self.predecessor = self.self_key
        self.successor = self.self_key
        self.joined = True
        self.join_complete = True
        self.group = GroupList([self.self_key], 0)
        self.dirty = True

    def _send_join_query(self) -> None:
        self._join_attempts += 1
        boot_key = derive_key(self._join_bootstrap)
        rid = self.rng.getrandbits(63)
        fs = msg.FindSucc(
            flags=0, request_id=rid, query_key=self.self_key, origin=self.self_key
        )
        self.pending[rid] = {
            "kind": _P_JOIN,
            "sent_at": self._now,
            "peer": boot_key,
        }
        self._send(boot_key, MsgType.FIND_SUCC, fs.pack(), dest=self.self_key)

    def _join_tick(self) -> None:
        if self.join_failed or self._join_bootstrap is None:
            return
        stale = [
            rid
            for rid, p in self.pending.items()
            if p["kind"] == _P_JOIN and self._now - p["sent_at"] > self.request_timeout
        ]
        if not stale:
            return
        for rid in stale:
            del self.pending[rid]
        if self._join_attempts >= self.config.join_max_attempts:
            self.join_failed = True
            return
        # Exponential backoff between attempts.
        delay = self.config.tick_interval * (2 ** (self._join_attempts - 1))
        if self._now >= self._join_next_retry:
            self._join_next_retry = self._now + delay
            self._send_join_query()

    def _complete_join(self, reply: msg.FindSuccReply) -> None:
        window = reply.members
        succ = reply.members[reply.leader_index]
        if reply.leader_index > 0:
            pred = window[reply.leader_index - 1]
        elif len(window) > 1:
            pred = window[-1]
        else:
            pred = succ
        self.successor = succ
        self.predecessor = pred
        self.joined = True
        self.dirty = True
        for k in dict.fromkeys([pred, succ]):
            self._confirm_peer(k)
        self._cache_window(succ, GroupList(list(window), reply.leader_index))
        self._rebuild_group()
        # Announce ourselves to both neighbors; their replies carry their
        # group views. The other claimed members are confirmed by direct
        # queries before they enter our own window.
        for neighbor in dict.fromkeys([pred, succ]):
            if neighbor == self.self_key:
                continue
            self._send_group_query(neighbor, flags=msg.GQ_NOTIFY_JOIN)
        for k in window:
            if k not in (self.self_key, pred, succ):
                self._send_group_query(k, kind=_P_CONFIRM)
        self._fill_cursor = 0
        self._finger_fill_step()

    # ------------------------------------------------------------------
    # group membership

    def _confirm_peer(self, peer: Key) -> None:
        if peer == self.self_key or peer in self.blacklist:
            return
        self.confirmed[peer] = self._now

    def _forget_peer(self, peer: Key) -> None:
        self.confirmed.pop(peer, None)
        self.member_windows.pop(peer, None)
        self.probe_misses.pop(peer, None)

    def _rebuild_group(self) -> None:
        """Recompute the centered window from confirmed neighbors.

        With fewer than group_size live peers known, the group
        degenerates to everyone we have confirmed.
        """
        half = (self.config.group_size - 1) // 2
        peers = [k for k in self.confirmed if k not in self.blacklist]
        if not peers:
            new = GroupList([self.self_key], 0)
        else:
            succs = sorted(peers, key=lambda k: dist_cw(self.self_key, k))
            preds = sorted(peers, key=lambda k: dist_cw(k, self.self_key))
            taken: list = []
            pred_side: list = []
            succ_side: list = []
            pi = si = 0
            # Alternate nearest successor / nearest predecessor until both
            # sides are filled or peers run out; each peer used once.
            while len(taken) < 2 * half and (pi < len(preds) or si < len(succs)):
                if len(succ_side) < half:
                    while si < len(succs) and succs[si] in taken:
                        si += 1
                    if si < len(succs):
                        succ_side.append(succs[si])
                        taken.append(succs[si])
                        si += 1
                        continue
                if len(pred_side) < half:
                    while pi < len(preds) and preds[pi] in taken:
                        pi += 1
                    if pi < len(preds):
                        pred_side.append(preds[pi])
                        taken.append(preds[pi])
                        pi += 1
                        continue
                break
            members = list(reversed(pred_side)) + [self.self_key] + succ_side
            new = GroupList(members, len(pred_side))
        old = self.group
        if new.members != old.members or new.leader_index != old.leader_index:
            self.group = new
            self.dirty = True
        # successor/predecessor follow the nearest confirmed peers
        peers = [k for k in self.confirmed if k not in self.blacklist]
        if peers:
            succ = min(peers, key=lambda k: dist_cw(self.self_key, k))
            pred = min(peers, key=lambda k: dist_cw(k, self.self_key))
            if succ != self.successor:
                self.successor = succ
                self.dirty = True
            if pred != self.predecessor:
                self.predecessor = pred
                self.dirty = True
        elif self.joined:
            if self.successor != self.self_key or self.predecessor != self.self_key:
                self.successor = self.self_key
                self.predecessor = self.self_key
                self.dirty = True

    def _send_group_query(self, peer: Key, flags: int = 0, kind: str = _P_EXCHANGE,
                          extra: dict | None = None) -> None:
        rid = self.rng.getrandbits(63)
        q = msg.GroupQuery(
            flags=flags,
            request_id=rid,
            members=list(self.group.members),
            leader_index=self.group.leader_index,
        )
        record = {"kind": kind, "sent_at": self._now, "peer": peer}
        if extra:
            record.update(extra)
        self.pending[rid] = record
        self._send(peer, MsgType.GROUP_QUERY, q.pack())

    def _exchange_with_one_member(self) -> None:
        others = [k for k in self.group.members if k != self.self_key]
        if not others:
            return
        self._exchange_cursor = (self._exchange_cursor + 1) % len(others)
        self._send_group_query(others[self._exchange_cursor], kind=_P_EXCHANGE)

    # ------------------------------------------------------------------
    # consistency policing

    def check_group_consistency(
        self, claimant: Key, claimed: GroupList
    ) -> Verdict:
        """Judge a peer's claimed group list against what we know.

        Structural violations are malicious outright. A claimed member
        that the directory does not know is a conflict with us as
        witness; a second distinct witness (another member whose view
        covers the fabricated slot) upgrades the claimant to malicious.
        Members we simply have not heard of yet are news, not fraud.
        """
        g = self.config.group_size
        members = claimed.members
        if not members:
            return self._structural_fraud(claimant, claimed, "empty list")
        if len(set(members)) != len(members):
            return self._structural_fraud(claimant, claimed, "duplicates")
        if claimant not in members:
            return self._structural_fraud(claimant, claimed, "claimant missing")
        base = members[0]
        dists = [dist_cw(base, m) for m in members]
        if any(b <= a for a, b in zip(dists, dists[1:])):
            return self._structural_fraud(claimant, claimed, "not ring-ordered")
        if len(members) >= g:
            # Full-size window: exact shape required. Shorter lists can be
            # legitimate while the ring (or the claimant's view of it) is
            # still small, so they only get the member scan.
            if len(members) != g or len(members) % 2 == 0:
                return self._structural_fraud(claimant, claimed, "bad size")
            if claimed.leader_index != (g - 1) // 2:
                return self._structural_fraud(claimant, claimed, "leader not central")
            if members[claimed.leader_index] != claimant:
                return self._structural_fraud(claimant, claimed, "claimant not leader")
        return self._member_scan(claimant, claimed)

    def _structural_fraud(self, claimant: Key, claimed: GroupList, why: str) -> Verdict:
        self._record_conflict(
            claimant, self.self_key, f"structural:{why}", force_malicious=True
        )
        return Verdict.MALICIOUS

    def _member_scan(self, claimant: Key, claimed: GroupList) -> Verdict:
        verdict = Verdict.CONSISTENT
        for m in claimed.members:
            if m == self.self_key or m in self.confirmed:
                continue
            if m in self.blacklist:
                # Probably a stale list from before the revocation flood
                # reached the claimant; the member is filtered on caching.
                continue
            if self.config.secure and self._certificate_for(m) is None:
                # Unregistered member: strike with us as first witness and
                # ask another group member to look at the same slot.
                self._record_conflict(
                    claimant, self.self_key, f"unauthorized member {key_hex(m)[:12]}"
                )
                verdict = Verdict.SUSPECT
                self._audit_claim(claimant, claimed, m)
        if self.suspicion.get(claimant) and self.suspicion[claimant].malicious:
            return Verdict.MALICIOUS
        return verdict

    def _audit_claim(self, claimant: Key, claimed: GroupList, fabricated: Key) -> None:
        candidates = [
            k
            for k in self.group.members
            if k not in (self.self_key, claimant) and k not in self.blacklist
        ]
        if not candidates:
            return
        witness_peer = self.rng.choice(candidates)
        self._send_group_query(
            witness_peer,
            kind=_P_AUDIT,
            extra={"claimant": claimant, "fabricated": fabricated},
        )

    def _finish_audit(self, record: dict, reply: msg.GroupReply) -> None:
        fabricated = record["fabricated"]
        claimant = record["claimant"]
        witness_peer = record["peer"]
        window = reply.members
        if len(window) < 2 or fabricated in window:
            return
        if in_range_open_closed(fabricated, window[0], window[-1]):
            # The witness's window covers that ring slot and does not
            # contain the claimed member: independent confirmation.
            self._record_conflict(
                claimant, witness_peer, f"audit miss {key_hex(fabricated)[:12]}"
            )

    def _record_conflict(
        self, suspect: Key, witness: Key | str, evidence: str,
        force_malicious: bool = False,
    ) -> None:
        if suspect == self.self_key:
            return
        rec = self.suspicion.setdefault(suspect, SuspicionRecord())
        rec.witnesses[witness] = self._now
        rec.evidence.append(evidence)
        live = rec.live_witnesses(self._now, self.strike_ttl)
        if force_malicious or len(live) >= 2:
            if not rec.malicious:
                rec.malicious = True
                self.excommunicate(suspect)

    def excommunicate(self, peer: Key) -> None:
        """Blacklist locally and ask the authority to revoke ring-wide."""
        if peer == self.self_key:
            return
        self.blacklist.add(peer)
        self.cache.drop(peer)
        self.sessions.pop(peer, None)
        self.pending_offers.pop(peer, None)
        self._forget_peer(peer)
        self._purge_from_tables(peer)
        self._rebuild_group()
        self.dirty = True
        rec = self.suspicion.get(peer)
        witnesses = set(rec.witnesses) if rec else {self.self_key}
        notice = self.report_fn(peer, witnesses)
        if notice is None:
            self.pending_reports[peer] = witnesses
        else:
            self._flood_revocation(notice)

    def _retry_reports(self) -> None:
        for peer, witnesses in list(self.pending_reports.items()):
            notice = self.report_fn(peer, witnesses)
            if notice is not None:
                del self.pending_reports[peer]
                self._flood_revocation(notice)

    def _purge_from_tables(self, peer: Key) -> None:
        for i, entry in enumerate(self.fingers):
            if entry is None:
                continue
            if peer in entry.group.members:
                members = [m for m in entry.group.members if m != peer]
                if not members or entry.group.leader == peer:
                    self.fingers[i] = None
                else:
                    li = members.index(entry.group.leader)
                    entry.group = GroupList(members, li)
        # Scrub cached views too, or a later refresh would re-introduce
        # the evicted key from a stale window.
        for owner, (window, cached_at) in list(self.member_windows.items()):
            if peer not in window.members:
                continue
            if window.leader == peer:
                del self.member_windows[owner]
                continue
            leader = window.leader
            members = [m for m in window.members if m != peer]
            self.member_windows[owner] = (
                GroupList(members, members.index(leader)),
                cached_at,
            )
        self.outstanding_probes = {
            pid: rec
            for pid, rec in self.outstanding_probes.items()
            if rec[0] != peer
        }

    def _flood_targets(self) -> list:
        targets = set(self.group.members)
        if self.successor is not None:
            targets.add(self.successor)
        if self.predecessor is not None:
            targets.add(self.predecessor)
        for entry in self.fingers:
            if entry is not None:
                targets.add(entry.group.leader)
        targets.discard(self.self_key)
        return sorted(targets - self.blacklist)

    def _flood_revocation(self, notice: RevocationNotice) -> None:
        self.revocations_seen.add((notice.peer_key, notice.serial))
        body = msg.Revocation(notice.peer_key, notice.serial, notice.authority_sig)
        for t in self._flood_targets():
            self._send(t, MsgType.REVOCATION, body.pack())

    def _handle_revocation(self, env: Envelope) -> None:
        rev = msg.Revocation.unpack(env.payload)
        notice = RevocationNotice(rev.peer_key, rev.serial, rev.authority_sig)
        if (rev.peer_key, rev.serial) in self.revocations_seen:
            return
        self.meter.verify += 1
        if not verify_notice(notice, self.authority_public):
            return  # forged notice: ignore
        self.revocations_seen.add((rev.peer_key, rev.serial))
        self.blacklist.add(rev.peer_key)
        self.cache.drop(rev.peer_key)
        self.sessions.pop(rev.peer_key, None)
        self._forget_peer(rev.peer_key)
        self._purge_from_tables(rev.peer_key)
        self._rebuild_group()
        self.dirty = True
        self._flood_revocation(notice)

    # ------------------------------------------------------------------
    # heartbeats

    def _probe_neighbors(self) -> None:
        # A probe unanswered by the next tick counts as a miss, so a dead
        # neighbor is gone after heartbeat_miss_limit ticks.
        probe_timeout = 0.9 * self.config.tick_interval
        expired = [
            pid
            for pid, (peer, sent_at) in self.outstanding_probes.items()
            if self._now - sent_at > probe_timeout
        ]
        for pid in expired:
            peer, _ = self.outstanding_probes.pop(pid)
            self._count_miss(peer)
        for peer in dict.fromkeys([self.successor, self.predecessor]):
            if peer is None or peer == self.self_key or peer in self.blacklist:
                continue
            pid = self.rng.getrandbits(63)
            self.outstanding_probes[pid] = (peer, self._now)
            self._send(peer, MsgType.HEARTBEAT, msg.Heartbeat(pid).pack())

    def _count_miss(self, peer: Key) -> None:
        misses = self.probe_misses.get(peer, 0) + 1
        self.probe_misses[peer] = misses
        if misses >= self.config.heartbeat_miss_limit:
            self.handle_heartbeat_timeout(peer)

    def handle_heartbeat_timeout(self, peer: Key) -> None:
        """Drop a peer that missed too many probes from every table."""
        self._forget_peer(peer)
        self._purge_from_tables(peer)
        self._rebuild_group()
        self.dirty = True

    # ------------------------------------------------------------------
    # finger table

    def _cache_window(self, peer: Key, window: GroupList) -> None:
        if self.blacklist and any(m in self.blacklist for m in window.members):
            # A stale list naming an evicted peer: keep the rest, never
            # re-introduce the evicted key.
            if window.leader in self.blacklist:
                return
            leader = window.leader
            members = [m for m in window.members if m not in self.blacklist]
            window = GroupList(members, members.index(leader))
        self.member_windows[peer] = (window, self._now)

    def _cached_window(self, peer: Key, fresh_only: bool = False) -> GroupList | None:
        entry = self.member_windows.get(peer)
        if entry is None:
            return None
        window, cached_at = entry
        if fresh_only and self._now - cached_at > self.cache_ttl:
            return None
        return window

    def _known_segment(self) -> list:
        """Ring-ordered contiguous peers around us.

        Our own window is authoritative; beyond its edges we extend one
        window outward using the edge members' fresh cached views,
        aligned on the edge member so a re-centered or stale view can
        never fabricate coverage of an arc we do not actually know.
        """
        w = self.group.members
        if self.self_key not in w:
            return list(w)
        center = w.index(self.self_key)
        left = list(w[:center])  # ring order, farthest first
        right = list(w[center + 1 :])
        if right:
            edge = right[-1]
            cw = self._cached_window(edge, fresh_only=True)
            if cw is not None and edge in cw.members:
                seen = set(left) | set(right) | {self.self_key}
                for k in cw.members[cw.members.index(edge) + 1 :]:
                    if k not in seen and k not in self.blacklist:
                        right.append(k)
                        seen.add(k)
        if left:
            edge = left[0]
            cw = self._cached_window(edge, fresh_only=True)
            if cw is not None and edge in cw.members:
                seen = set(left) | set(right) | {self.self_key}
                prefix = []
                for k in cw.members[: cw.members.index(edge)]:
                    if k not in seen and k not in self.blacklist:
                        prefix.append(k)
                        seen.add(k)
                left = prefix + left
        return left + [self.self_key] + right

    def _local_owner(self, target: Key) -> Key | None:
        """Resolve the owner of target from local knowledge only."""
        if self.predecessor is not None and in_range_open_closed(
            target, self.predecessor, self.self_key
        ):
            return self.self_key
        if self.successor == self.self_key:
            return self.self_key
        segment = self._known_segment()
        return window_owner(segment, target)

    def _window_for(self, owner: Key) -> GroupList:
        if owner == self.self_key:
            return self.group.copy()
        cached = self._cached_window(owner)
        if cached is not None:
            return cached.copy()
        # Synthesize a window from the known segment around the owner.
        segment = self._known_segment()
        if owner in segment:
            idx = segment.index(owner)
            half = (self.config.group_size - 1) // 2
            lo = max(0, idx - half)
            hi = min(len(segment), idx + half + 1)
            return GroupList(segment[lo:hi], idx - lo)
        return GroupList([owner], 0)

    def _set_finger_run(self, start: int, group: GroupList) -> int:
        """Fill fingers[start] and every following index owned by the
        same leader (the dedup rule); returns the next uncovered index."""
        leader = group.leader
        i = start
        t_start = finger_target(self.self_key, start)
        while i < KEY_BITS:
            t = finger_target(self.self_key, i)
            if i != start and not in_range_open_closed(t, t_start, leader):
                break
            self.fingers[i] = FingerEntry(i, t, group, self._now)
            i += 1
        return i

    def _finger_fill_step(self) -> None:
        """Advance the post-join bulk fill; one routed query at a time."""
        if self._fill_cursor is None:
            return
        i = self._fill_cursor
        while i < KEY_BITS:
            target = finger_target(self.self_key, i)
            owner = self._local_owner(target)
            if owner is not None:
                i = self._set_finger_run(i, self._window_for(owner))
                continue
            self._fill_cursor = i
            self._send_finger_query(i, target, kind=_P_JOIN)
            return
        self._fill_cursor = None
        self.join_complete = True

    def _send_finger_query(self, index: int, target: Key, kind: str = _P_FINGER) -> None:
        rid = self.rng.getrandbits(63)
        fs = msg.FindSucc(
            flags=msg.FS_REFRESH, request_id=rid, query_key=target, origin=self.self_key
        )
        env = Envelope(
            msg_type=MsgType.FIND_SUCC,
            sender=self.self_key,
            dest=target,
            seq=0,
            payload=fs.pack(),
        )
        hop = next_hop(
            self.self_key,
            target,
            self._distinct_finger_entries(),
            self.successor,
            self.blacklist,
            self.config.routing_mode,
            self.rng,
        )
        record = {"kind": kind, "sent_at": self._now, "index": index, "target": target}
        self.pending[rid] = record
        if hop is None or hop == self.self_key:
            # Nothing to route through yet; treat ourselves as owner.
            del self.pending[rid]
            self._set_finger_run(index, self.group.copy())
            if kind == _P_JOIN:
                self._fill_cursor = index + 1
                self._finger_fill_step()
            return
        if self.config.secure and hop not in self.sessions:
            self._maybe_offer_session(hop)
        self._emit(addr_of_key(hop), seal(env, self.auth, hop))

    def _distinct_finger_entries(self) -> list:
        entries = []
        seen = set()
        for entry in self.fingers:
            if entry is None:
                continue
            gid = id(entry.group)
            if gid in seen:
                continue
            seen.add(gid)
            entries.append((entry.group.leader, entry.group.members))
        # The group window always participates in next-hop choice.
        entries.append((self.group.leader, self.group.members))
        return entries

    def _refresh_one_finger(self) -> None:
        if self._fill_cursor is not None:
            self._finger_fill_step()
            return
        start = self._refresh_cursor
        i = start
        steps = 0
        while steps < KEY_BITS:
            target = finger_target(self.self_key, i)
            owner = self._local_owner(target)
            if owner is None:
                # One routed query per tick; the cursor moves on so a lost
                # reply cannot stall the cycle.
                self._send_finger_query(i, target)
                self._refresh_cursor = (i + 1) % KEY_BITS
                return
            nxt = self._set_finger_run(i, self._window_for(owner))
            steps += nxt - i
            i = nxt % KEY_BITS
            if i == start:
                break
        self._refresh_cursor = i

    def _handle_finger_reply(self, record: dict, reply: msg.FindSuccReply, env: Envelope) -> None:
        if not reply.members:
            return
        if self.config.secure:
            # A reply window stuffed with unregistered keys is fraud on
            # its own, whoever the claimed leader is.
            for m in reply.members:
                if (
                    m != self.self_key
                    and m not in self.confirmed
                    and m not in self.blacklist
                    and self._certificate_for(m) is None
                ):
                    self._record_conflict(
                        env.sender,
                        self.self_key,
                        f"unauthorized finger member {key_hex(m)[:12]}",
                    )
                    return
        group = GroupList(list(reply.members), reply.leader_index)
        index = record["index"]
        target = record["target"]
        changed = (
            self.fingers[index] is None
            or self.fingers[index].group.members != group.members
        )
        self._set_finger_run(index, group)
        if changed:
            self.dirty = True
        if record["kind"] == _P_JOIN:
            self._fill_cursor = index
            while (
                self._fill_cursor < KEY_BITS
                and self.fingers[self._fill_cursor] is not None
            ):
                self._fill_cursor += 1
            if self._fill_cursor >= KEY_BITS:
                self._fill_cursor = None
                self.join_complete = True
            else:
                self._finger_fill_step()
        self._maybe_verify_reply(env.sender, reply, target)

    # ------------------------------------------------------------------
    # find-successor cross-verification

    def _maybe_verify_reply(self, responder: Key, reply: msg.FindSuccReply, target: Key) -> None:
        if self.rng.random() >= self.config.verify_sample_rate:
            return
        self._start_verification(responder, reply, target, tried=set())

    def _start_verification(self, responder, reply, target, tried) -> None:
        rec = self.suspicion.get(responder)
        witnesses = rec.witnesses if rec else set()
        candidates = [
            m
            for m in reply.members
            if m not in (responder, self.self_key)
            and m not in self.blacklist
            and m not in tried
        ]
        fresh = [m for m in candidates if m not in witnesses]
        pool = fresh or candidates
        if not pool:
            return  # nobody to ask: verdict deferred
        verifier = self.rng.choice(pool)
        rid = self.rng.getrandbits(63)
        fs = msg.FindSucc(
            flags=msg.FS_VERIFY,
            request_id=rid,
            query_key=target,
            origin=self.self_key,
            claimed=reply.leader if reply.leader is not None else 0,
        )
        self.pending[rid] = {
            "kind": _P_VERIFY,
            "sent_at": self._now,
            "peer": verifier,
            "responder": responder,
            "claimed_members": list(reply.members),
            "claimed_leader": reply.leader,
            "target": target,
            "tried": tried | {verifier},
        }
        self._send(verifier, MsgType.FIND_SUCC, fs.pack())

    def _answer_verify_query(self, env: Envelope, fs: msg.FindSucc) -> None:
        """Adjudicate a cross-check from local knowledge only; never forward.

        Three possible answers: COVERED (our merged neighborhood view
        contains the key, leader authoritative), REFUTED (the claimed
        leader is strictly inside our view, so we can see its whole
        ownership interval, and the key is not in it), or DEFERRED (we
        cannot judge, e.g. our view is still immature).
        """
        flags = msg.FSR_DEFERRED
        members = list(self.group.members)
        leader_index = self.group.leader_index
        if self.joined and len(self.group.members) >= self.config.group_size:
            segment = self._known_segment()
            owner = window_owner(segment, fs.query_key)
            if owner is not None:
                win = self._window_for(owner)
                flags = msg.FSR_COVERED
                members = win.members
                leader_index = (
                    win.members.index(owner) if owner in win.members else 0
                )
            elif fs.claimed in segment and segment.index(fs.claimed) >= 1:
                # We know the claimed leader's full ownership interval and
                # the key lies entirely outside our contiguous view.
                flags = msg.FSR_REFUTED
        reply = msg.FindSuccReply(
            flags=flags,
            request_id=fs.request_id,
            query_key=fs.query_key,
            members=members,
            leader_index=leader_index,
        )
        self._send(env.sender, MsgType.FIND_SUCC_REPLY, reply.pack())

    def _finish_verification(self, record: dict, reply: msg.FindSuccReply) -> None:
        """Judge the responder on the verifier's answer.

        Strikes need a strong geometric contradiction: a refutation, or a
        covered answer whose owner is several ring positions away from
        the claimed leader. A merely shifted window (peers joined or
        left in that arc between the reply and the check) stays quiet.
        """
        responder = record["responder"]
        claimed_members = record["claimed_members"]
        claimed_leader = record["claimed_leader"]
        verifier = record["peer"]
        g = self.config.group_size
        if reply.flags & msg.FSR_DEFERRED:
            return
        if reply.flags & msg.FSR_REFUTED:
            self._record_conflict(responder, verifier, "ownership refuted")
            return
        if not reply.flags & msg.FSR_COVERED:
            return  # nothing adjudicable
        owner = reply.leader
        near = claimed_leader == owner or _ring_positions_apart(
            claimed_leader, owner, set(claimed_members) | set(reply.members)
        ) <= 2
        if near:
            # Same or adjacent responsible peer: consistent. Membership
            # drift around a matching leader is churn, not fraud;
            # fabricated filler members are caught by the directory scan
            # on the original reply instead.
            return
        self._record_conflict(responder, verifier, "cross-check mismatch")

    def _expire_pending(self) -> None:
        now = self._now
        expired = [
            (rid, rec)
            for rid, rec in self.pending.items()
            if now - rec["sent_at"] > self.request_timeout and rec["kind"] != _P_JOIN
        ]
        for rid, rec in expired:
            del self.pending[rid]
            kind = rec["kind"]
            if kind in (_P_EXCHANGE, _P_CONFIRM):
                self._count_miss(rec["peer"])
            elif kind == _P_VERIFY:
                tried = rec["tried"]
                if len(tried) < 2:
                    fake_reply = msg.FindSuccReply(
                        flags=0,
                        request_id=0,
                        query_key=rec["target"],
                        members=rec["claimed_members"],
                        leader_index=rec["claimed_members"].index(rec["claimed_leader"])
                        if rec["claimed_leader"] in rec["claimed_members"]
                        else 0,
                    )
                    self._start_verification(
                        rec["responder"], fake_reply, rec["target"], tried
                    )
                # else: verdict deferred, no strike
            elif kind == _P_FINGER:
                pass  # next refresh cycle retries naturally
        if self.joined and not self.join_complete and self._fill_cursor is not None:
            # Restart a stalled join fill if its query got lost.
            live = any(p["kind"] == _P_JOIN for p in self.pending.values())
            if not live:
                self._finger_fill_step()

    # ------------------------------------------------------------------
    # sessions

    def _regenerate_sessions(self) -> None:
        if not self.config.secure:
            return
        for peer, session in list(self.sessions.items()):
            if session.expired(self._now):
                del self.sessions[peer]
                continue
            if self.session_roles.get(peer) and session.due_for_regen(self._now):
                if peer not in self.pending_offers:
                    self._maybe_offer_session(peer)
        for peer, (session, payload, sent_at) in list(self.pending_offers.items()):
            if self._now - sent_at > self.request_timeout * 2:
                del self.pending_offers[peer]

    def _handle_handshake1(self, env: Envelope) -> None:
        if not self.config.secure:
            return
        result = accept_session_offer(
            env.payload,
            self.keypair,
            self.authority_public,
            self._now,
            max_age=self.config.session_lifetime,
        )
        if result is None:
            return
        session, cert, confirm = result
        if cert.peer_key != env.sender:
            return
        if env.sender > self.self_key:
            return  # only the lower-keyed side may initiate
        self.meter.verify += 2  # certificate check + secret unwrap
        self.cache.insert_positive(cert, self._now)
        self.sessions[env.sender] = session
        self.session_roles.setdefault(env.sender, False)
        reset_link(self.auth, env.sender)
        env_reply = Envelope(
            msg_type=MsgType.HANDSHAKE2,
            sender=self.self_key,
            dest=env.sender,
            seq=0,
            payload=confirm,
        )
        # The confirm must stay verifiable before the peer activates the
        # new session, so it is always signature-sealed.
        self._emit(
            addr_of_key(env.sender),
            seal(env_reply, self.auth, env.sender, force_signature=True),
        )

    def _handle_handshake2(self, env: Envelope) -> None:
        pending = self.pending_offers.get(env.sender)
        if pending is None:
            return
        session, payload, _ = pending
        if not check_session_confirm(payload, env.payload):
            return
        del self.pending_offers[env.sender]
        self.sessions[env.sender] = session
        self.session_roles[env.sender] = True
        reset_link(self.auth, env.sender)

    # ------------------------------------------------------------------
    # routed traffic

    def route_class(self, dest: Key) -> RouteClass:
        return classify(self.self_key, self.predecessor, self.group.members, dest)

    def _forward(
        self, env: Envelope, explicit_hop: Key | None = None, transit: bool = True
    ) -> str:
        if env.hop_count >= self.config.hop_limit:
            return "drop_hoplimit"
        hop = explicit_hop
        if hop is None:
            hop = next_hop(
                self.self_key,
                env.dest,
                self._distinct_finger_entries(),
                self.successor,
                self.blacklist,
                self.config.routing_mode,
                self.rng,
            )
        if hop is None or hop == self.self_key:
            return "delivered"  # nowhere to go; consumed
        hop = self.behavior.on_forward(self, env, hop, transit)
        if hop is None:
            return "delivered"  # adversarial silent drop
        payload = env.payload
        if transit and env.msg_type == MsgType.APP_PAYLOAD:
            ap = msg.AppPayload.unpack(payload)
            ap.hops.append(self.self_key)
            payload = ap.pack()
        # hop_count counts transmissions, so a delivered envelope carries
        # the total number of hops it took.
        fwd = Envelope(
            msg_type=env.msg_type,
            sender=self.self_key,
            dest=env.dest,
            seq=0,
            payload=payload,
            hop_count=env.hop_count + 1,
        )
        if self.config.secure and hop not in self.sessions:
            self._maybe_offer_session(hop)
        self._emit(addr_of_key(hop), seal(fwd, self.auth, hop))
        return "delivered"

    def _route(self, env: Envelope, local_handler, transit: bool = True) -> str:
        rc = self.route_class(env.dest)
        if rc.kind is RouteKind.LOCAL:
            local_handler(env)
            return "delivered"
        if rc.kind is RouteKind.NEAR:
            return self._forward(env, explicit_hop=rc.responsible, transit=transit)
        return self._forward(env, transit=transit)

    # ------------------------------------------------------------------
    # dispatch

    def _dispatch(self, env: Envelope) -> str | None:
        mt = env.msg_type
        if mt == MsgType.FIND_SUCC:
            return self._handle_find_succ(env)
        if mt == MsgType.FIND_SUCC_REPLY:
            return self._handle_find_succ_reply(env)
        if mt == MsgType.GROUP_QUERY:
            return self._handle_group_query(env)
        if mt == MsgType.GROUP_REPLY:
            return self._handle_group_reply(env)
        if mt == MsgType.HEARTBEAT:
            hb = msg.Heartbeat.unpack(env.payload)
            self._send(env.sender, MsgType.HEARTBEAT_ACK, hb.pack())
            return None
        if mt == MsgType.HEARTBEAT_ACK:
            hb = msg.Heartbeat.unpack(env.payload)
            rec = self.outstanding_probes.pop(hb.probe_id, None)
            if rec is not None:
                self.probe_misses[rec[0]] = 0
            return None
        if mt == MsgType.HANDSHAKE1:
            self._handle_handshake1(env)
            return None
        if mt == MsgType.HANDSHAKE2:
            self._handle_handshake2(env)
            return None
        if mt == MsgType.REVOCATION:
            self._handle_revocation(env)
            return None
        if mt == MsgType.PING:
            return self._route(env, self._deliver_ping)
        if mt == MsgType.PING_ECHO:
            return self._route(env, self._deliver_ping_echo)
        if mt == MsgType.THROUGHPUT_REQ:
            return self._route(env, self._deliver_throughput_req)
        if mt == MsgType.DATA_PACKET:
            return self._route(env, self._deliver_data_packet)
        if mt == MsgType.POTATO:
            return self._route(env, self._deliver_potato)
        if mt == MsgType.POTATO_ACK:
            self._deliver_potato_ack(env)
            return None
        if mt == MsgType.POTATO_ACK2:
            self._deliver_potato_ack2(env)
            return None
        if mt == MsgType.APP_PAYLOAD:
            return self._route(env, self._deliver_app)
        return None

    # ------------------------------------------------------------------
    # find-successor handling

    def handle_find_successor(self, query_key: Key):
        """Local responsibility test, exposed for direct use and tests.

        Returns ("reply", GroupList) when we can answer authoritatively
        (we own the key, or its owner is in our group and its window is
        known), or ("forward", hop_key) otherwise.
        """
        rc = self.route_class(query_key)
        if rc.kind is RouteKind.LOCAL:
            return "reply", self.group.copy()
        if rc.kind is RouteKind.NEAR:
            cached = self._cached_window(rc.responsible)
            if cached is not None and rc.responsible == cached.leader:
                return "reply", cached.copy()
            return "forward", rc.responsible
        hop = next_hop(
            self.self_key,
            query_key,
            self._distinct_finger_entries(),
            self.successor,
            self.blacklist,
            self.config.routing_mode,
            self.rng,
        )
        return "forward", hop

    def _handle_find_succ(self, env: Envelope) -> str | None:
        fs = msg.FindSucc.unpack(env.payload)
        if fs.flags & msg.FS_VERIFY:
            self._answer_verify_query(env, fs)
            return None
        fake = self.behavior.fake_findsucc_reply(self, fs)
        if fake is not None:
            members, leader_index = fake
            reply = msg.FindSuccReply(
                flags=msg.FSR_COVERED,
                request_id=fs.request_id,
                query_key=fs.query_key,
                members=members,
                leader_index=leader_index,
            )
            self._send(fs.origin, MsgType.FIND_SUCC_REPLY, reply.pack())
            return None
        action, result = self.handle_find_successor(fs.query_key)
        if action == "reply":
            window: GroupList = result
            reply = msg.FindSuccReply(
                flags=msg.FSR_COVERED,
                request_id=fs.request_id,
                query_key=fs.query_key,
                members=window.members,
                leader_index=window.leader_index,
            )
            self._send(fs.origin, MsgType.FIND_SUCC_REPLY, reply.pack())
            return None
        return self._forward(env, explicit_hop=result)

    def _handle_find_succ_reply(self, env: Envelope) -> str | None:
        reply = msg.FindSuccReply.unpack(env.payload)
        record = self.pending.pop(reply.request_id, None)
        if record is None:
            return None
        kind = record["kind"]
        if kind == _P_JOIN and "index" not in record:
            if not self.joined:
                self._complete_join(reply)
            return None
        if kind in (_P_JOIN, _P_FINGER):
            self._handle_finger_reply(record, reply, env)
            return None
        if kind == _P_VERIFY:
            self._finish_verification(record, reply)
            return None
        return None

    # ------------------------------------------------------------------
    # group messages

    def _handle_group_query(self, env: Envelope) -> None:
        q = msg.GroupQuery.unpack(env.payload)
        sender = env.sender
        self._confirm_peer(sender)
        if q.members:
            claimed = GroupList(list(q.members), q.leader_index)
            self.check_group_consistency(sender, claimed)
            if sender not in self.blacklist:
                self._cache_window(sender, claimed)
        if q.flags & msg.GQ_NOTIFY_JOIN and sender not in self.blacklist:
            self._absorb_neighbor(sender)
        self._rebuild_group()
        members, leader_index = self.behavior.mutate_group_reply(
            self, list(self.group.members), self.group.leader_index
        )
        reply = msg.GroupReply(
            request_id=q.request_id, members=members, leader_index=leader_index
        )
        self._send(sender, MsgType.GROUP_REPLY, reply.pack())

    def _absorb_neighbor(self, sender: Key) -> None:
        """A peer announced itself as our new ring neighbor."""
        if self.successor is None or self.successor == self.self_key:
            self.successor = sender
            self.predecessor = sender
            self.dirty = True
        self._confirm_peer(sender)

    def _handle_group_reply(self, env: Envelope) -> None:
        reply = msg.GroupReply.unpack(env.payload)
        record = self.pending.pop(reply.request_id, None)
        sender = env.sender
        self._confirm_peer(sender)
        self.probe_misses[sender] = 0
        claimed = GroupList(list(reply.members), reply.leader_index)
        verdict = self.check_group_consistency(sender, claimed)
        if sender in self.blacklist:
            return
        if verdict is not Verdict.MALICIOUS:
            self._cache_window(sender, claimed)
            # Confirm any new members we just learned about, one pending
            # confirmation per peer at a time.
            pending_confirms = {
                p["peer"] for p in self.pending.values() if p["kind"] == _P_CONFIRM
            }
            for m in claimed.members:
                if (
                    m != self.self_key
                    and m not in self.confirmed
                    and m not in self.blacklist
                    and m not in pending_confirms
                    and self._near_me(m)
                ):
                    if self.config.secure and self._certificate_for(m) is None:
                        continue
                    self._send_group_query(m, kind=_P_CONFIRM)
                    pending_confirms.add(m)
        if record is not None and record["kind"] == _P_AUDIT:
            self._finish_audit(record, reply)
        self._rebuild_group()

    def _near_me(self, key: Key) -> bool:
        """Is this key plausibly within our group span (either side)?"""
        window = self.group.members
        if len(window) < self.config.group_size:
            return True
        span_before = dist_cw(window[0], self.self_key)
        span_after = dist_cw(self.self_key, window[-1])
        return (
            dist_cw(key, self.self_key) <= 2 * span_before
            or dist_cw(self.self_key, key) <= 2 * span_after
        )

    # ------------------------------------------------------------------
    # application traffic (bench protocols)

    def send_ping(self, dest: Key, token: int, now: float):
        self._now = now
        self._out = []
        body = msg.Ping(token, self.self_key)
        self._route_new(MsgType.PING, dest, body.pack())
        return self._take_out()

    def send_app(self, dest: Key, token: int, now: float, body: bytes = b""):
        self._now = now
        self._out = []
        payload = msg.AppPayload(token, [], body)
        self._route_new(MsgType.APP_PAYLOAD, dest, payload.pack())
        return self._take_out()

    def send_throughput_req(self, responder: Key, token: int, n_packets: int, now: float):
        self._now = now
        self._out = []
        body = msg.ThroughputReq(token, self.self_key, n_packets)
        self._route_new(MsgType.THROUGHPUT_REQ, responder, body.pack())
        return self._take_out()

    def inject_potato(self, potato_id: int, min_residency: float, ttl: int, now: float):
        self._now = now
        self._out = []
        p = msg.Potato(
            potato_id=potato_id,
            originator=self.self_key,
            passer=self.self_key,
            pass_count=0,
            pass_seq=1,
            injected_at=now,
            min_residency=min_residency,
            ttl=ttl,
        )
        self._launch_pass(p)
        return self._take_out()

    def _route_new(self, msg_type: MsgType, dest: Key, payload: bytes) -> None:
        env = Envelope(
            msg_type=msg_type,
            sender=self.self_key,
            dest=dest,
            seq=0,
            payload=payload,
            hop_count=0,
        )
        # Self-owned destinations still transit the network (one loopback
        # hop) so every pass of every message costs the same exchange.
        def to_self(e: Envelope) -> None:
            self._send(self.self_key, e.msg_type, e.payload, dest=e.dest, hop_count=1)

        self._route(env, to_self, transit=False)

    def _deliver_ping(self, env: Envelope) -> None:
        p = msg.Ping.unpack(env.payload)
        echo = msg.PingEcho(p.token)
        self._route_new(MsgType.PING_ECHO, p.origin, echo.pack())

    def _deliver_ping_echo(self, env: Envelope) -> None:
        p = msg.PingEcho.unpack(env.payload)
        self._notify_app({"kind": "ping_echo", "token": p.token, "time": self._now})

    def _deliver_throughput_req(self, env: Envelope) -> None:
        req = msg.ThroughputReq.unpack(env.payload)
        for i in range(req.n_packets):
            pkt = msg.DataPacket(req.token, i)
            self._route_new(MsgType.DATA_PACKET, req.origin, pkt.pack())

    def _deliver_data_packet(self, env: Envelope) -> None:
        pkt = msg.DataPacket.unpack(env.payload)
        self._notify_app(
            {"kind": "data_packet", "token": pkt.token, "index": pkt.index,
             "time": self._now}
        )

    def _deliver_app(self, env: Envelope) -> None:
        ap = msg.AppPayload.unpack(env.payload)
        self._notify_app(
            {
                "kind": "app_delivered",
                "token": ap.token,
                "hops": ap.hops,
                "hop_count": env.hop_count,
                "responsible": self.self_key,
                "time": self._now,
            }
        )

    def _notify_app(self, event: dict) -> None:
        if self.app_cb is not None:
            self.app_cb(self, event)

    # hot potato -------------------------------------------------------

    def _launch_pass(self, p: msg.Potato) -> None:
        """Draw a random key and send the potato to its responsible peer."""
        dest = self.rng.getrandbits(KEY_BITS)
        body = msg.Potato(
            potato_id=p.potato_id,
            originator=p.originator,
            passer=self.self_key,
            pass_count=p.pass_count,
            pass_seq=p.pass_count + 1,
            injected_at=p.injected_at,
            min_residency=p.min_residency,
            ttl=p.ttl,
        )
        self.potato_pending[p.potato_id] = {
            "body": body,
            "dest": dest,
            "sent_at": self._now,
            "retries": 0,
        }
        self._route_new(MsgType.POTATO, dest, body.pack())

    def _deliver_potato(self, env: Envelope) -> None:
        p = msg.Potato.unpack(env.payload)
        last = self.potato_last_seen.get(p.potato_id, 0)
        ack = msg.PotatoAck(p.potato_id, p.pass_seq)
        if p.pass_seq <= last:
            # Duplicate pass (retransmit): re-ack, do not re-count.
            self._send(p.passer, MsgType.POTATO_ACK, ack.pack())
            return
        self.potato_last_seen[p.potato_id] = p.pass_seq
        p.pass_count += 1
        self.potato_held[p.potato_id] = {
            "potato": p,
            "received_at": self._now,
            "last_nag": self._now,
        }
        self._send(p.passer, MsgType.POTATO_ACK, ack.pack())

    def _deliver_potato_ack(self, env: Envelope) -> None:
        ack = msg.PotatoAck.unpack(env.payload)
        pending = self.potato_pending.get(ack.potato_id)
        if pending is not None and pending["body"].pass_seq == ack.pass_seq:
            del self.potato_pending[ack.potato_id]
        # Always acknowledge the acknowledgment, even for duplicates: the
        # receiver may not commence its pass until it hears this.
        ack2 = msg.PotatoAck(ack.potato_id, ack.pass_seq)
        self._send(env.sender, MsgType.POTATO_ACK2, ack2.pack())

    def _deliver_potato_ack2(self, env: Envelope) -> None:
        ack2 = msg.PotatoAck.unpack(env.payload)
        held = self.potato_held.get(ack2.potato_id)
        if held is None or held["potato"].pass_seq != ack2.pass_seq:
            return
        del self.potato_held[ack2.potato_id]
        p = held["potato"]
        received_at = held["received_at"]
        if p.originator == self.self_key:
            residency = received_at - p.injected_at
            if residency >= p.min_residency:
                passes_per_sec = p.pass_count / residency if residency > 0 else 0.0
                self._notify_app(
                    {
                        "kind": "potato_ejected",
                        "potato_id": p.potato_id,
                        "passes_per_sec": passes_per_sec,
                        "pass_count": p.pass_count,
                        "residency": residency,
                        "ttl": p.ttl - 1,
                        "time": self._now,
                    }
                )
                if p.ttl <= 1:
                    return  # potato leaves the system
                p.ttl -= 1
                p.pass_count = 0
                p.injected_at = self._now
        self._launch_pass(p)

    def _retry_potatoes(self) -> None:
        for pid, rec in list(self.potato_pending.items()):
            if self._now - rec["sent_at"] > self.request_timeout:
                if rec["retries"] >= 8:
                    # Should be impossible under the ack protocol; count it.
                    del self.potato_pending[pid]
                    self.potato_lost += 1
                    self._notify_app({"kind": "potato_lost", "potato_id": pid})
                    continue
                rec["sent_at"] = self._now
                rec["retries"] += 1
                self._route_new(MsgType.POTATO, rec["dest"], rec["body"].pack())
        for pid, held in list(self.potato_held.items()):
            # Our ack (or their ack2) was lost: nag the passer again.
            if self._now - held["last_nag"] > self.request_timeout:
                held["last_nag"] = self._now
                p = held["potato"]
                ack = msg.PotatoAck(p.potato_id, p.pass_seq)
                self._send(p.passer, MsgType.POTATO_ACK, ack.pack())

    # ------------------------------------------------------------------
    # snapshot

    def snapshot(self) -> str:
        """Canonical structured-text dump of the node's tables."""
        lines = [f"node {key_hex(self.self_key)} addr {self.addr}"]
        lines.append(f"joined {str(self.joined).lower()}")
        lines.append(
            "predecessor "
            + (key_hex(self.predecessor) if self.predecessor is not None else "-")
        )
        lines.append(
            "successor "
            + (key_hex(self.successor) if self.successor is not None else "-")
        )
        lines.append(
            "group " + " ".join(key_hex(m) for m in self.group.members)
            + f" leader_index {self.group.leader_index}"
        )
        runs: list = []
        for i, entry in enumerate(self.fingers):
            if entry is None:
                continue
            leader = entry.group.leader
            if runs and runs[-1][2] == leader and runs[-1][1] == i - 1:
                runs[-1] = (runs[-1][0], i, leader, runs[-1][3])
            else:
                runs.append((i, i, leader, entry.group.members))
        for lo, hi, leader, members in runs:
            lines.append(
                f"finger {lo}..{hi} leader {key_hex(leader)} "
                + " ".join(key_hex(m) for m in members)
            )
        lines.append(
            "blacklist " + " ".join(key_hex(k) for k in sorted(self.blacklist))
        )
        return "\n".join(lines) + "\n"


def _ring_positions_apart(a: Key, b: Key, reference: set) -> int:
    """Peer positions separating two keys within a reference member set.

    Counts members of the set strictly between a and b along the shorter
    arc, plus one. Returns a large number when either key is unknown to
    the reference set.
    """
    if a is None or b is None:
        return 1 << 30
    if a == b:
        return 0
    if a not in reference or b not in reference:
        return 1 << 30
    lo, hi = (a, b) if dist_cw(a, b) <= dist_cw(b, a) else (b, a)
    between = sum(
        1 for m in reference if m not in (lo, hi) and in_range_open_closed(m, lo, hi)
    )
    return between + 1
