"""Benchmark harness: latency, throughput, and hot-potato capacity.

Each experiment drives a Simulation through its application hooks and
aggregates results the same way the original evaluation did: latency
takes the mean over series of per-series minima, throughput divides the
packet count by the first-to-last arrival spread, and capacity is the
mean per-potato pass rate times the number of potatoes in flight.
Reports are emitted as TSV plus a human-readable summary table.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

from .keyspace import Key, key_hex
from .simnet import Scenario, Simulation, scenario_with


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    median: float
    stddev: float  # population
    maximum: float
    minimum: float


def summarize(values) -> SummaryStats:
    vals = list(values)
    if not vals:
        raise ValueError("summarize needs at least one value")
    return SummaryStats(
        mean=statistics.fmean(vals),
        median=statistics.median(vals),
        stddev=statistics.pstdev(vals),
        maximum=max(vals),
        minimum=min(vals),
    )


@dataclass
class LatencyPlan:
    series: int = 4
    runs_per_series: int = 4
    pings_per_test: int = 10
    responders: list = field(default_factory=list)


class _Events:
    """Cursor over a simulation's app-event stream."""

    def __init__(self, sim: Simulation):
        self.sim = sim
        self.pos = len(sim.app_events)

    def drain(self):
        events = self.sim.app_events[self.pos :]
        self.pos = len(self.sim.app_events)
        return events

    def wait_for(self, pred, max_time: float):
        """Run the sim until an event matching pred appears; returns it."""
        found: list = []

        def scan() -> bool:
            for ev in self.drain():
                if pred(ev):
                    found.append(ev)
            return not found

        self.sim.run_while(scan, max_time)
        # One more drain: the final event may have landed on the last step.
        if not found:
            for ev in self.drain():
                if pred(ev):
                    found.append(ev)
                    break
        return found[0] if found else None


# ---------------------------------------------------------------------------
# latency


def run_latency(sim: Simulation, initiator: Key, plan: LatencyPlan):
    """Ping every responder through the overlay and aggregate RTTs.

    Returns (per_responder_rtt, SummaryStats, absent) where
    per_responder_rtt maps responder key -> mean over series of the
    per-series minimum run RTT. Unreachable responders land in absent.
    """
    events = _Events(sim)
    results: dict = {}
    absent: list = []
    token_base = 1 << 32
    for responder in plan.responders:
        if responder == initiator:
            continue
        # One unmeasured warm-up ping establishes sessions on the path.
        ok = _ping_once(sim, events, initiator, responder, token_base)
        token_base += 1
        if not ok:
            absent.append(responder)
            continue
        series_minima = []
        failed = False
        for s in range(plan.series):
            run_rtts = []
            for r in range(plan.runs_per_series):
                t0 = sim.now
                for p in range(plan.pings_per_test):
                    if not _ping_once(sim, events, initiator, responder, token_base):
                        failed = True
                        break
                    token_base += 1
                if failed:
                    break
                run_rtts.append((sim.now - t0) / plan.pings_per_test)
            if failed or not run_rtts:
                failed = True
                break
            series_minima.append(min(run_rtts))
        if failed:
            absent.append(responder)
        else:
            results[responder] = statistics.fmean(series_minima)
    stats = summarize(results.values()) if results else None
    return results, stats, absent


def _ping_once(sim, events, initiator, responder, token) -> bool:
    sim.invoke(
        initiator, lambda node, now, d=responder, tk=token: node.send_ping(d, tk, now)
    )
    ev = events.wait_for(
        lambda e, tk=token: e["kind"] == "ping_echo" and e["token"] == tk,
        max_time=sim.now + 30.0,
    )
    return ev is not None


def measure_hops(sim: Simulation, initiator: Key, dest: Key, token: int) -> int | None:
    """One-way hop count of a routed probe to dest's responsible peer."""
    events = _Events(sim)
    sim.invoke(
        initiator, lambda node, now, d=dest, tk=token: node.send_app(d, tk, now)
    )
    ev = events.wait_for(
        lambda e, tk=token: e["kind"] == "app_delivered" and e["token"] == tk,
        max_time=sim.now + 30.0,
    )
    return None if ev is None else ev["hop_count"]


# ---------------------------------------------------------------------------
# throughput


def run_throughput(
    sim: Simulation, initiator: Key, responder: Key, n_packets: int = 1000
):
    """Packets per second from responder to initiator through the overlay.

    The initiator requests n_packets; the responder streams them back as
    fast as it can, and the measurement is (received - 1) / (t_last -
    t_first). Returns None when fewer than 2 packets arrive even after
    one retry.
    """
    if n_packets < 2:
        raise ValueError("n_packets must be >= 2")
    for _ in range(2):  # one retry on a failed measurement
        events = _Events(sim)
        token = sim.net_rng.getrandbits(31) | (1 << 40)
        sim.invoke(
            initiator,
            lambda node, now, r=responder, tk=token, n=n_packets: (
                node.send_throughput_req(r, tk, n, now)
            ),
        )
        arrivals: list = []

        def scan() -> bool:
            for ev in events.drain():
                if ev["kind"] == "data_packet" and ev["token"] == token:
                    arrivals.append(ev["time"])
            return len(arrivals) < n_packets

        deadline = sim.now + 60.0
        sim.run_while(scan, deadline)
        for ev in events.drain():
            if ev["kind"] == "data_packet" and ev["token"] == token:
                arrivals.append(ev["time"])
        if len(arrivals) >= 2:
            return (len(arrivals) - 1) / (arrivals[-1] - arrivals[0])
    return None


# ---------------------------------------------------------------------------
# hot potato


def run_hot_potato(
    sim: Simulation,
    n_potatoes: int,
    min_residency: float = 1.0,
    ttl: int = 3,
    max_measurements: int = 75,
    max_time: float = 600.0,
):
    """Inject n_potatoes and collect each potato's first ejection rate.

    Returns (per-potato passes/sec list, capacity, lost_count). Capacity
    is the mean pass rate times the load, the system-wide passes/sec.
    """
    events = _Events(sim)
    keys = sim.sorted_keys()
    rng = sim.net_rng
    first_measurement: dict = {}
    target = min(n_potatoes, max_measurements)
    for pid in range(1, n_potatoes + 1):
        originator = keys[rng.randrange(len(keys))]
        sim.invoke(
            originator,
            lambda node, now, p=pid, r=min_residency, t=ttl: (
                node.inject_potato(p, r, t, now)
            ),
        )

    def scan() -> bool:
        for ev in events.drain():
            if ev["kind"] == "potato_ejected":
                first_measurement.setdefault(ev["potato_id"], ev["passes_per_sec"])
        return len(first_measurement) < target

    deadline = sim.now + max_time
    sim.run_while(scan, deadline)
    for ev in events.drain():
        if ev["kind"] == "potato_ejected":
            first_measurement.setdefault(ev["potato_id"], ev["passes_per_sec"])
    lost = sum(node.potato_lost for node in sim.nodes.values())
    rates = list(first_measurement.values())
    capacity = statistics.fmean(rates) * n_potatoes if rates else 0.0
    return rates, capacity, lost


def capacity_sweep(
    scenario: Scenario,
    loads,
    min_residency: float = 1.0,
    ttl: int = 3,
    max_measurements: int = 75,
):
    """Capacity at each load level, one fresh ring per level.

    Returns list of (load, SummaryStats, capacity).
    """
    results = []
    for load in loads:
        sim = Simulation(scenario)
        sim.build_ring()
        rates, capacity, lost = run_hot_potato(
            sim, load, min_residency=min_residency, ttl=ttl,
            max_measurements=max_measurements,
        )
        if not rates:
            raise RuntimeError(f"no potato measurements at load {load}")
        results.append((load, summarize(rates), capacity))
    return results


# ---------------------------------------------------------------------------
# report rendering


def relative_diff_latency(insecure: float, secure: float) -> float:
    return (secure - insecure) / insecure


def relative_diff_throughput(insecure: float, secure: float) -> float:
    return (insecure - secure) / insecure


def format_percent(x: float) -> str:
    """Truncate to one decimal, the way the published table rounds."""
    return f"{math.floor(x * 1000) / 10:.1f}%"


_ROW_ORDER = ["Mean", "Median", "Maximum", "Minimum", "Std. Dev."]


def _stat_row(stats: SummaryStats) -> dict:
    return {
        "Mean": stats.mean,
        "Median": stats.median,
        "Maximum": stats.maximum,
        "Minimum": stats.minimum,
        "Std. Dev.": stats.stddev,
    }


def render_comparison_table(
    latency_insec: SummaryStats,
    latency_sec: SummaryStats,
    thr_insec: SummaryStats | None = None,
    thr_sec: SummaryStats | None = None,
) -> str:
    """Summary table in the shape of the published one: latency and
    throughput side by side with relative differences."""
    li, ls = _stat_row(latency_insec), _stat_row(latency_sec)
    ti = _stat_row(thr_insec) if thr_insec else None
    ts = _stat_row(thr_sec) if thr_sec else None
    lines = []
    header = (
        f"{'':<10} {'Insecure Op.':>12} {'Secure Op.':>12} {'Relative':>10}"
    )
    if ti:
        header += f" {'Insecure Op.':>13} {'Secure Op.':>12} {'Relative':>10}"
    lines.append(header)
    sub = f"{'':<10} {'RTT (sec)':>12} {'RTT (sec)':>12} {'Difference':>10}"
    if ti:
        sub += f" {'Pkts / sec':>13} {'Pkts / sec':>12} {'Difference':>10}"
    lines.append(sub)
    for row in _ROW_ORDER:
        rel = (
            "N/A"
            if row == "Std. Dev."
            else format_percent(relative_diff_latency(li[row], ls[row]))
        )
        line = f"{row:<10} {li[row]:>12.6f} {ls[row]:>12.6f} {rel:>10}"
        if ti:
            relt = (
                "N/A"
                if row == "Std. Dev."
                else format_percent(relative_diff_throughput(ti[row], ts[row]))
            )
            line += f" {ti[row]:>13.0f} {ts[row]:>12.0f} {relt:>10}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def latency_tsv(insec: SummaryStats, sec: SummaryStats) -> str:
    lines = ["stat\tinsecure_rtt_sec\tsecure_rtt_sec\trelative_difference"]
    li, ls = _stat_row(insec), _stat_row(sec)
    for row in _ROW_ORDER:
        rel = (
            "N/A"
            if row == "Std. Dev."
            else format_percent(relative_diff_latency(li[row], ls[row]))
        )
        lines.append(f"{row}\t{li[row]:.6f}\t{ls[row]:.6f}\t{rel}")
    return "\n".join(lines) + "\n"


def throughput_tsv(insec: SummaryStats, sec: SummaryStats) -> str:
    lines = ["stat\tinsecure_pkts_per_sec\tsecure_pkts_per_sec\trelative_difference"]
    li, ls = _stat_row(insec), _stat_row(sec)
    for row in _ROW_ORDER:
        rel = (
            "N/A"
            if row == "Std. Dev."
            else format_percent(relative_diff_throughput(li[row], ls[row]))
        )
        lines.append(f"{row}\t{li[row]:.2f}\t{ls[row]:.2f}\t{rel}")
    return "\n".join(lines) + "\n"


_CAP_ROWS = ["Mean", "Median", "Std. Dev.", "Maximum", "Minimum"]


def capacity_tsv(results_by_mode: dict) -> str:
    """results_by_mode: mode name -> list of (load, SummaryStats, capacity)."""
    lines = []
    for mode, results in results_by_mode.items():
        loads = [str(load) for load, _, _ in results]
        lines.append(f"# {mode} mode")
        lines.append("stat\t" + "\t".join(loads))
        rows = {name: [] for name in _CAP_ROWS}
        for _, stats, _ in results:
            sr = _stat_row(stats)
            for name in _CAP_ROWS:
                rows[name].append(f"{sr[name]:.1f}")
        for name in _CAP_ROWS:
            lines.append(f"{name}\t" + "\t".join(rows[name]))
        lines.append(
            "capacity\t" + "\t".join(f"{cap:.1f}" for _, _, cap in results)
        )
    return "\n".join(lines) + "\n"


def per_peer_tsv(results_insec: dict, results_sec: dict) -> str:
    """Sorted-order per-responder table (the staircase plots)."""
    lines = ["responder\tinsecure\tsecure"]
    order = sorted(results_insec, key=results_insec.get)
    for r in order:
        sec = results_sec.get(r)
        lines.append(
            f"{key_hex(r)}\t{results_insec[r]:.6f}\t"
            + (f"{sec:.6f}" if sec is not None else "absent")
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# paired experiment drivers (secure vs insecure on identical topology)


def build_mode_pair(scenario: Scenario):
    """Build two identical rings, one secure and one insecure."""
    sims = {}
    for mode in (False, True):
        sim = Simulation(scenario_with(scenario, secure_mode=mode))
        sim.build_ring()
        sims["secure" if mode else "insecure"] = sim
    return sims["insecure"], sims["secure"]


def latency_experiment(scenario: Scenario, plan: LatencyPlan | None = None,
                       n_responders: int = 16):
    """Paired latency run; returns per-mode results plus the summary table.

    The embedded property check: secure per-hop overhead must stay
    constant (within 10% relative spread) across hop-count buckets.
    """
    insec, sec = build_mode_pair(scenario)
    keys = insec.sorted_keys()
    initiator = keys[0]
    responders = [k for k in keys[1:]][:: max(1, (len(keys) - 1) // n_responders)]
    responders = responders[:n_responders]
    if plan is None:
        plan = LatencyPlan(responders=responders)
    else:
        plan.responders = responders
    res_i, stats_i, absent_i = run_latency(insec, initiator, plan)
    res_s, stats_s, absent_s = run_latency(sec, initiator, plan)
    hops = {}
    for j, r in enumerate(responders):
        h = measure_hops(insec, initiator, r, token=(1 << 50) + j)
        if h is not None:
            hops[r] = h
    ok, spread = per_hop_overhead_constant(res_i, res_s, hops)
    return {
        "insecure": (res_i, stats_i, absent_i),
        "secure": (res_s, stats_s, absent_s),
        "hops": hops,
        "per_hop_ok": ok,
        "per_hop_spread": spread,
    }


def per_hop_overhead_constant(res_i: dict, res_s: dict, hops: dict,
                              tolerance: float = 0.10):
    """Is the secure-mode RTT overhead per hop constant across distances?"""
    buckets: dict = {}
    for r, h in hops.items():
        if r in res_i and r in res_s and h > 0:
            buckets.setdefault(h, []).append((res_s[r] - res_i[r]) / (2 * h))
    per_hop = {h: statistics.fmean(v) for h, v in buckets.items() if v}
    if len(per_hop) < 2:
        return True, 0.0
    values = list(per_hop.values())
    mean = statistics.fmean(values)
    if mean <= 0:
        return False, float("inf")
    spread = (max(values) - min(values)) / mean
    return spread <= tolerance, spread


def throughput_experiment(scenario: Scenario, n_packets: int = 200,
                          n_responders: int = 12):
    """Paired throughput run; checks secure < insecure for every responder."""
    insec, sec = build_mode_pair(scenario)
    keys = insec.sorted_keys()
    initiator = keys[0]
    responders = [k for k in keys[1:]][:: max(1, (len(keys) - 1) // n_responders)]
    responders = responders[:n_responders]
    res_i, res_s = {}, {}
    for r in responders:
        ti = run_throughput(insec, initiator, r, n_packets)
        ts = run_throughput(sec, initiator, r, n_packets)
        if ti is not None:
            res_i[r] = ti
        if ts is not None:
            res_s[r] = ts
    common = [r for r in responders if r in res_i and r in res_s]
    ok = bool(common) and all(res_s[r] < res_i[r] for r in common)
    return {
        "insecure": (res_i, summarize(res_i.values()) if res_i else None),
        "secure": (res_s, summarize(res_s.values()) if res_s else None),
        "secure_below_insecure": ok,
    }


def find_saturation(results) -> tuple:
    """Locate the plateau: the first load whose capacity is within 5% of
    the peak. Returns (saturation_load, peak_capacity)."""
    peak = max(cap for _, _, cap in results)
    for load, _, cap in results:
        if cap >= 0.95 * peak:
            return load, peak
    return results[-1][0], peak
