"""Deterministic discrete-event network simulator.

Hosts many overlay nodes in one process with a latency/drop model and a
per-host CPU service queue (several peers share one host, as on the
evaluation cluster, which is what makes throughput and capacity
saturate). A Scenario fully determines the run: same scenario, same
seed, same event trace, byte for byte.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field, replace

from . import messages as msg
from .auth import PROVIDER, RingAuthority
from .directory import InMemoryDirectory, LookupResult, LookupStatus
from .keyspace import (
    KEY_BITS,
    Key,
    NetAddr,
    derive_key,
    key_from_hex,
    key_hex,
)
from .protocol import Behavior, GroupList, Node, NodeConfig
from .routing import RoutingMode
from .wire import AuthKind, Envelope, MsgType, encode

DEFAULT_LATENCY = 0.0005  # paper cluster: 0.5 ms mean
DEFAULT_JITTER = 0.0001

# Fixed default CPU charges (seconds). Deterministic across hosts; the
# CLI can recalibrate them from a local microbenchmark when absolute
# numbers matter more than reproducibility.
DEFAULT_PROC_COST = 20e-6
DEFAULT_SEND_COST = 10e-6
DEFAULT_SIGN_COST = 80e-6
DEFAULT_VERIFY_COST = 120e-6
DEFAULT_MAC_COST = 1.5e-6


@dataclass
class Scenario:
    n_peers: int
    group_size: int = 5
    seed: int = 1
    latency_base: float = DEFAULT_LATENCY
    latency_jitter: float = DEFAULT_JITTER
    drop_rate: float = 0.0
    duration: float = 10.0
    routing_mode: RoutingMode = RoutingMode.DETERMINISTIC
    secure_mode: bool = True
    hosts: int | None = None  # default: one host per 10 peers
    tick_interval: float = 0.5
    proc_cost: float = DEFAULT_PROC_COST
    send_cost: float = DEFAULT_SEND_COST
    sign_cost: float = DEFAULT_SIGN_COST
    verify_cost: float = DEFAULT_VERIFY_COST
    mac_cost: float = DEFAULT_MAC_COST
    lookup_cost: float | None = None  # default: 2x latency_base
    hop_limit: int = 32
    verify_sample_rate: float = 1.0
    ring_domain: str = "ring.local"
    adversaries: dict = field(default_factory=dict)  # Key or index -> spec str

    def __post_init__(self):
        if self.n_peers < 1:
            raise ValueError("n_peers must be >= 1")

    @property
    def n_hosts(self) -> int:
        return self.hosts if self.hosts else max(1, math.ceil(self.n_peers / 10))

    @property
    def effective_lookup_cost(self) -> float:
        return (
            self.lookup_cost
            if self.lookup_cost is not None
            else 2.0 * self.latency_base
        )


def synth_addr(i: int) -> NetAddr:
    """Deterministic distinct IPv4 endpoints for simulated peers."""
    if not 0 <= i < (1 << 24):
        raise ValueError("too many peers")
    ip = f"10.{(i >> 16) & 0xFF}.{(i >> 8) & 0xFF}.{i & 0xFF}"
    return NetAddr(ip, 7000 + (i % 1000))


# ---------------------------------------------------------------------------
# adversary behaviors


class DropAllBehavior(Behavior):
    name = "drop_all"

    def on_forward(self, node, env, hop, transit):
        return None if transit else hop


class MisrouteBehavior(Behavior):
    name = "misroute"

    def on_forward(self, node, env, hop, transit):
        if not transit:
            return hop
        candidates = [
            m
            for _, members in node._distinct_finger_entries()
            for m in members
            if m != node.self_key
        ]
        if not candidates:
            return hop
        return node.rng.choice(candidates)


class FraudulentFindSuccBehavior(Behavior):
    """Claims its own group is responsible for every queried key."""

    name = "fraudulent_findsucc"

    def fake_findsucc_reply(self, node, fs):
        return list(node.group.members), node.group.leader_index


class InconsistentGroupListBehavior(Behavior):
    """Replaces one true group member with a fabricated in-range key."""

    name = "inconsistent_grouplist"

    def mutate_group_reply(self, node, members, leader_index):
        if len(members) < 3:
            return members, leader_index
        victim = len(members) - 1 if leader_index != len(members) - 1 else 0
        prev = members[victim - 1] if victim > 0 else members[victim]
        # Midpoint of the preceding gap: sorts correctly, exists nowhere.
        from .keyspace import KEY_MOD, dist_cw

        gap = dist_cw(prev, members[victim])
        fabricated = (prev + max(1, gap // 2)) % KEY_MOD
        mutated = list(members)
        mutated[victim] = fabricated
        return mutated, leader_index


class SpoofBehavior(Behavior):
    """Emits forged envelopes carrying a victim's sender key."""

    name = "spoof"

    def __init__(self, victim: Key, per_tick: int = 50):
        self.victim = victim
        self.per_tick = per_tick
        self.attempts = 0

    def on_tick(self, node, now):
        targets = sorted(
            {m for _, members in node._distinct_finger_entries() for m in members}
            - {node.self_key}
        )
        if not targets:
            return
        for _ in range(self.per_tick):
            target = node.rng.choice(targets)
            env = Envelope(
                msg_type=MsgType.APP_PAYLOAD,
                sender=self.victim,
                dest=target,
                seq=node.rng.getrandbits(32) + 1,
                payload=msg.AppPayload(node.rng.getrandbits(63), [], b"forged").pack(),
                hop_count=1,
                auth_kind=AuthKind.MAC if node.config.secure else AuthKind.NONE,
                auth_tag=node.rng.randbytes(32) if node.config.secure else b"",
            )
            from .keyspace import addr_of_key

            node._emit(addr_of_key(target), encode(env))
            self.attempts += 1


def build_behavior(spec: str, resolve_key=None) -> Behavior:
    spec = spec.strip()
    if spec == "honest":
        return Behavior()
    if spec == "drop_all":
        return DropAllBehavior()
    if spec == "misroute":
        return MisrouteBehavior()
    if spec == "fraudulent_findsucc":
        return FraudulentFindSuccBehavior()
    if spec == "inconsistent_grouplist":
        return InconsistentGroupListBehavior()
    if spec.startswith("spoof:"):
        ref = spec.split(":", 1)[1]
        victim = resolve_key(ref) if resolve_key else key_from_hex(ref)
        return SpoofBehavior(victim)
    raise ValueError(f"unknown behavior: {spec!r}")


# ---------------------------------------------------------------------------
# counters and trace


@dataclass
class Counters:
    sent: int = 0
    delivered: int = 0
    dropped_model: int = 0
    dropped_hoplimit: int = 0
    rejected_auth: int = 0

    def as_dict(self) -> dict:
        return {
            "sent": self.sent,
            "delivered": self.delivered,
            "dropped_model": self.dropped_model,
            "dropped_hoplimit": self.dropped_hoplimit,
            "rejected_auth": self.rejected_auth,
        }


class _Host:
    """Single-CPU FIFO service queue shared by the peers placed on it."""

    __slots__ = ("queue", "busy", "free_at")

    def __init__(self):
        self.queue = deque()
        self.busy = False
        self.free_at = 0.0


class Simulation:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.now = 0.0
        self._heap: list = []
        self._event_seq = 0
        self.net_rng = random.Random(f"net:{scenario.seed}")
        self.authority = RingAuthority(random.Random(f"authority:{scenario.seed}"))
        self.directory = InMemoryDirectory(self.authority)
        self._evidence: dict = {}  # suspect -> set of witnesses (authority side)
        self.counters = Counters()
        self.app_events: list = []
        self.trace_hash = hashlib.sha256()
        self.trace_lines: list | None = None  # set to [] to retain lines
        self.potato_passes_completed = 0

        self.nodes: dict[Key, Node] = {}
        self.addr_to_key: dict[NetAddr, Key] = {}
        self.hosts = [_Host() for _ in range(scenario.n_hosts)]
        self.host_of: dict[Key, _Host] = {}
        self._tick_queued: set = set()
        self._in_flight_arrivals = 0
        # Per-directed-link last arrival time: the network jitters timing
        # but, like a switched LAN, never reorders one flow.
        self._link_last: dict = {}
        self._build_nodes()

    # ------------------------------------------------------------------
    # construction

    def _node_config(self) -> NodeConfig:
        s = self.scenario
        return NodeConfig(
            ring_domain=s.ring_domain,
            group_size=s.group_size,
            secure=s.secure_mode,
            routing_mode=s.routing_mode,
            tick_interval=s.tick_interval,
            hop_limit=s.hop_limit,
            verify_sample_rate=s.verify_sample_rate,
        )

    def _build_nodes(self) -> None:
        s = self.scenario
        config = self._node_config()
        for i in range(s.n_peers):
            addr = synth_addr(i)
            key = derive_key(addr)
            rng = random.Random(f"{s.seed}:{key_hex(key)}")
            keypair = PROVIDER.generate_keypair(rng)
            cert = self.directory.register(s.ring_domain, key, keypair.public)
            node = Node(
                addr=addr,
                self_key=key,
                keypair=keypair,
                certificate=cert,
                authority_public=self.authority.public_key,
                config=config,
                rng=rng,
                lookup_fn=self._make_lookup(),
                report_fn=self._report_evidence,
            )
            node.app_cb = self._on_app_event
            self.nodes[key] = node
            self.addr_to_key[addr] = key
            self.host_of[key] = self.hosts[i % s.n_hosts]

    def _make_lookup(self):
        domain = self.scenario.ring_domain

        def lookup(peer_key: Key) -> LookupResult:
            return self.directory.lookup(domain, peer_key)

        return lookup

    def _report_evidence(self, peer_key: Key, witnesses: set):
        """Authority endpoint: aggregate witnesses across reports."""
        if not self.directory.reachable:
            return None
        pool = self._evidence.setdefault(peer_key, set())
        pool.update(witnesses)
        return self.directory.report_evidence(
            self.scenario.ring_domain, peer_key, pool
        )

    def _on_app_event(self, node: Node, event: dict) -> None:
        event["node"] = node.self_key
        self.app_events.append(event)

    # ------------------------------------------------------------------
    # event machinery

    def _push(self, t: float, kind: str, payload) -> None:
        self._event_seq += 1
        heapq.heappush(self._heap, (t, self._event_seq, kind, payload))

    def _trace(self, t: float, kind: str, src: str, dst: str, mtype: str,
               outcome: str) -> None:
        line = f"{t:.9f}\t{kind}\t{src}\t{dst}\t{mtype}\t{outcome}\n"
        self.trace_hash.update(line.encode())
        if self.trace_lines is not None:
            self.trace_lines.append(line)

    def _enqueue_work(self, t: float, host: _Host, work: tuple) -> None:
        host.queue.append(work)
        if not host.busy:
            host.busy = True
            self._push(max(t, host.free_at), "service", host)

    def schedule_tick(self, key: Key, t: float) -> None:
        self._push(t, "tick", key)

    def start(self) -> None:
        """Schedule the first tick for every node, phase-staggered."""
        s = self.scenario
        for i, key in enumerate(self.nodes):
            phase = s.tick_interval * (i + 1) / (s.n_peers + 1)
            self.schedule_tick(key, self.now + phase)

    def invoke(self, key: Key, fn) -> None:
        """Run fn(node, now) on the node's host at the current time.

        fn must return the node's outgoing sends, e.g. a bound call to
        one of the node.send_* helpers.
        """
        self._push(self.now, "call", (key, fn))

    # main loop --------------------------------------------------------

    def run_until(self, t: float):
        """Process every event with timestamp <= t; idempotent."""
        while self._heap and self._heap[0][0] <= t:
            when, _, kind, payload = heapq.heappop(self._heap)
            self.now = when
            self._handle_event(when, kind, payload)
        self.now = max(self.now, t)
        return self

    def run_while(self, pred, max_time: float):
        """Step events until pred() is false or time runs out."""
        while self._heap and self._heap[0][0] <= max_time and pred():
            when, _, kind, payload = heapq.heappop(self._heap)
            self.now = when
            self._handle_event(when, kind, payload)
        if not pred():
            return self
        self.now = max(self.now, max_time)
        return self

    def _handle_event(self, t: float, kind: str, payload) -> None:
        if kind == "arrive":
            key, src_addr, data = payload
            self._in_flight_arrivals -= 1
            node = self.nodes.get(key)
            if node is None:
                self.counters.dropped_model += 1
                return
            self._enqueue_work(t, self.host_of[key], ("deliver", key, src_addr, data))
        elif kind == "tick":
            key = payload
            self.schedule_tick(key, t + self.scenario.tick_interval)
            if key not in self._tick_queued:
                self._tick_queued.add(key)
                self._enqueue_work(t, self.host_of[key], ("tick", key))
        elif kind == "call":
            key, fn = payload
            self._enqueue_work(t, self.host_of[key], ("call", key, fn))
        elif kind == "service":
            self._service(t, payload)

    def _service(self, t: float, host: _Host) -> None:
        work = host.queue.popleft()
        node = self.nodes[work[1]]
        node.meter.reset()
        kind = work[0]
        if kind == "deliver":
            _, key, src_addr, data = work
            outcome, sends = node.handle_datagram(data, now=t)
            src = self.addr_to_key.get(src_addr)
            self._trace(
                t,
                "recv",
                key_hex(src)[:12] if src is not None else str(src_addr),
                key_hex(key)[:12],
                _peek_type(data),
                outcome,
            )
            self._count_outcome(outcome)
            if _peek_type(data) == "POTATO_ACK2" and outcome == "delivered":
                self.potato_passes_completed += 1
        elif kind == "tick":
            _, key = work
            self._tick_queued.discard(key)
            sends = node.on_tick(t)
        else:  # call
            _, key, fn = work
            sends = fn(node, t)
        s = self.scenario
        m = node.meter
        cost = (
            s.proc_cost
            + m.sign * s.sign_cost
            + m.verify * s.verify_cost
            + m.mac * s.mac_cost
            + m.lookups * s.effective_lookup_cost
        )
        depart = t + cost
        for addr, data in sends:
            depart += s.send_cost
            self._transmit(depart, node, addr, data)
        host.free_at = depart
        if host.queue:
            self._push(depart, "service", host)
        else:
            host.busy = False

    def _transmit(self, depart: float, node: Node, addr: NetAddr, data: bytes) -> None:
        s = self.scenario
        self.counters.sent += 1
        target = self.addr_to_key.get(addr)
        mtype = _peek_type(data)
        if target is None:
            # Datagram to a host that does not exist: the network ate it.
            self.counters.dropped_model += 1
            self._trace(depart, "send", key_hex(node.self_key)[:12], str(addr),
                        mtype, "drop_model")
            return
        if s.drop_rate > 0 and self.net_rng.random() < s.drop_rate:
            self.counters.dropped_model += 1
            self._trace(depart, "send", key_hex(node.self_key)[:12],
                        key_hex(target)[:12], mtype, "drop_model")
            return
        latency = s.latency_base
        if s.latency_jitter > 0:
            latency += self.net_rng.uniform(-s.latency_jitter, s.latency_jitter)
        latency = max(latency, 1e-9)
        self._trace(depart, "send", key_hex(node.self_key)[:12],
                    key_hex(target)[:12], mtype, "sent")
        link = (node.self_key, target)
        arrival = max(depart + latency, self._link_last.get(link, 0.0) + 1e-9)
        self._link_last[link] = arrival
        self._in_flight_arrivals += 1
        self._push(arrival, "arrive", (target, node.addr, data))

    def _count_outcome(self, outcome: str) -> None:
        c = self.counters
        if outcome == "delivered":
            c.delivered += 1
        elif outcome == "drop_hoplimit":
            c.dropped_hoplimit += 1
        else:  # rejected:* and malformed both count against auth
            c.rejected_auth += 1

    # ------------------------------------------------------------------
    # invariants

    def in_flight(self) -> int:
        queued = sum(
            1 for h in self.hosts for w in h.queue if w[0] == "deliver"
        )
        return self._in_flight_arrivals + queued

    def conservation_ok(self) -> bool:
        c = self.counters
        return c.sent == (
            c.delivered
            + c.dropped_model
            + c.dropped_hoplimit
            + c.rejected_auth
            + self.in_flight()
        )

    def trace_digest(self) -> str:
        return self.trace_hash.hexdigest()

    # ------------------------------------------------------------------
    # ring construction

    def build_ring(self, max_build_time: float = 3600.0):
        """Join all peers sequentially, then stabilize to quiescence."""
        keys = list(self.nodes)
        first = self.nodes[keys[0]]
        first.start_alone()
        self.start()
        bootstrap_addr = first.addr
        for key in keys[1:]:
            node = self.nodes[key]
            self.invoke(key, lambda n, t, b=bootstrap_addr: n.start_join(b, t))
            deadline = self.now + 120.0
            self.run_while(
                lambda n=node: not (n.joined and n.join_complete), deadline
            )
            if not (node.joined and node.join_complete):
                raise RuntimeError(
                    f"join of {key_hex(key)[:12]} did not complete by t={deadline}"
                )
        self.stabilize_to_quiescence(max_build_time)
        self._apply_scenario_adversaries()
        return self

    def stabilize_to_quiescence(
        self, max_time: float = 3600.0, quiet_windows: int = 5
    ) -> None:
        for node in self.nodes.values():
            node.dirty = False
        quiet = 0
        windows = 0
        while quiet < quiet_windows:
            self.run_until(self.now + self.scenario.tick_interval)
            windows += 1
            if any(n.dirty for n in self.nodes.values()):
                for n in self.nodes.values():
                    n.dirty = False
                quiet = 0
            else:
                quiet += 1
            if self.now > max_time:
                raise RuntimeError(f"no quiescence after {windows} windows")

    def _apply_scenario_adversaries(self) -> None:
        for ref, spec in self.scenario.adversaries.items():
            key = self.resolve_peer(ref)
            self.inject_adversary(key, build_behavior(spec, self.resolve_peer))

    def resolve_peer(self, ref) -> Key:
        """Resolve '#<index>', a 40-hex string, or an int key to a peer."""
        if isinstance(ref, int):
            return ref
        if ref.startswith("#"):
            return derive_key(synth_addr(int(ref[1:])))
        return key_from_hex(ref)

    def inject_adversary(self, peer: Key, behavior: Behavior):
        self.nodes[peer].behavior = behavior
        return self

    # ------------------------------------------------------------------
    # oracle and snapshots

    def sorted_keys(self) -> list:
        return sorted(self.nodes)

    def oracle_successor(self, key: Key) -> Key:
        """Brute-force owner of a key over the sorted live-peer list."""
        ring = [k for k in self.sorted_keys() if k not in self._dead_keys()]
        for k in ring:
            if k >= key:
                return k
        return ring[0]

    def _dead_keys(self) -> set:
        return set()

    def snapshot_all(self) -> str:
        return "".join(self.nodes[k].snapshot() for k in self.sorted_keys())


def _peek_type(data: bytes) -> str:
    if len(data) < 2:
        return "?"
    try:
        return MsgType(data[1]).name
    except ValueError:
        return f"unknown({data[1]})"


# ---------------------------------------------------------------------------
# scenario file form


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def parse_scenario(text: str) -> Scenario:
    """Line-oriented `key = value` scenario description."""
    fields: dict = {}
    adversaries: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"scenario line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith("adversary."):
            adversaries[key[len("adversary."):]] = value
            continue
        fields[key] = value
    kwargs: dict = {}
    int_keys = {"n_peers", "group_size", "seed", "hosts", "hop_limit"}
    float_keys = {
        "drop_rate", "duration", "tick_interval", "verify_sample_rate",
    }
    us_keys = {
        "proc_cost_us": "proc_cost",
        "send_cost_us": "send_cost",
        "sign_cost_us": "sign_cost",
        "verify_cost_us": "verify_cost",
        "mac_cost_us": "mac_cost",
        "lookup_cost_us": "lookup_cost",
    }
    for key, value in fields.items():
        if key in int_keys:
            kwargs[key] = int(value)
        elif key in float_keys:
            kwargs[key] = float(value)
        elif key == "latency_base_ms":
            kwargs["latency_base"] = float(value) / 1000.0
        elif key == "latency_jitter_ms":
            kwargs["latency_jitter"] = float(value) / 1000.0
        elif key in us_keys:
            kwargs[us_keys[key]] = float(value) / 1e6
        elif key == "secure_mode":
            kwargs["secure_mode"] = _BOOL[value.lower()]
        elif key == "routing_mode":
            kwargs["routing_mode"] = RoutingMode(value)
        elif key == "ring_domain":
            kwargs["ring_domain"] = value
        else:
            raise ValueError(f"unknown scenario key: {key!r}")
    if "n_peers" not in kwargs:
        raise ValueError("scenario missing n_peers")
    scenario = Scenario(**kwargs)
    scenario.adversaries = adversaries
    return scenario


def scenario_with(scenario: Scenario, **overrides) -> Scenario:
    return replace(scenario, **overrides)
