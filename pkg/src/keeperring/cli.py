"""Operator entry point.

    keeperring keytool derive <ip:port>
    keeperring keytool validate <hex-key>
    keeperring sim run <scenario-file> [--seed N] [--trace FILE] [--snapshots FILE]
    keeperring bench latency|throughput|capacity <scenario-file> [options]
    keeperring inspect <snapshot-file>
    keeperring node run --addr <ip:port> [--bootstrap <ip:port>] --ring <domain>
                        --cert <file> --key <file> --directory <seed-file>

Scenario files are the single source of experiment truth; flags only
override scalar fields so every run stays reproducible from one
artifact. KEEPERRING_SEED is honored as a last-resort seed override.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import bench
from .keyspace import (
    AddressError,
    NetAddr,
    derive_key,
    key_from_hex,
    key_hex,
    validate_key,
)
from .simnet import Scenario, Simulation, parse_scenario, scenario_with


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    if not hasattr(args, "func"):
        parser.print_usage()
        return 2
    try:
        return args.func(args)
    except (ValueError, AddressError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keeperring")
    sub = parser.add_subparsers(dest="command")

    kt = sub.add_parser("keytool", help="derive and validate ring keys")
    kt_sub = kt.add_subparsers(dest="kt_command")
    kd = kt_sub.add_parser("derive")
    kd.add_argument("address", help="ip:port")
    kd.set_defaults(func=cmd_keytool_derive)
    kv = kt_sub.add_parser("validate")
    kv.add_argument("key", help="40 hex digits")
    kv.set_defaults(func=cmd_keytool_validate)

    sim = sub.add_parser("sim", help="run simulated scenarios")
    sim_sub = sim.add_subparsers(dest="sim_command")
    sr = sim_sub.add_parser("run")
    sr.add_argument("scenario", type=Path)
    sr.add_argument("--seed", type=int, default=None)
    sr.add_argument("--trace", type=Path, default=None)
    sr.add_argument("--snapshots", type=Path, default=None)
    sr.set_defaults(func=cmd_sim_run)

    be = sub.add_parser("bench", help="run the benchmark experiments")
    be_sub = be.add_subparsers(dest="bench_command")
    for name in ("latency", "throughput", "capacity"):
        bp = be_sub.add_parser(name)
        bp.add_argument("scenario", type=Path)
        bp.add_argument("--seed", type=int, default=None)
        bp.add_argument("--out", type=Path, default=Path("reports"))
        mode = bp.add_mutually_exclusive_group()
        mode.add_argument("--secure", action="store_true")
        mode.add_argument("--insecure", action="store_true")
        if name == "capacity":
            bp.add_argument("--loads", default="2,4,8,12,16,20,24,28,32")
            bp.add_argument("--residency", type=float, default=1.0)
        bp.set_defaults(func=cmd_bench, experiment=name)

    ins = sub.add_parser("inspect", help="validate and print a snapshot dump")
    ins.add_argument("snapshot", type=Path)
    ins.set_defaults(func=cmd_inspect)

    nd = sub.add_parser("node", help="run a real UDP peer (demo grade)")
    nd_sub = nd.add_subparsers(dest="node_command")
    nr = nd_sub.add_parser("run")
    nr.add_argument("--addr", required=True)
    nr.add_argument("--bootstrap", default=None)
    nr.add_argument("--ring", required=True)
    nr.add_argument("--cert", type=Path, required=True)
    nr.add_argument("--key", type=Path, required=True)
    nr.add_argument("--directory", type=Path, required=True)
    nr.add_argument("--authority-pub", type=Path, required=True)
    nr.add_argument("--insecure", action="store_true")
    nr.add_argument("--max-seconds", type=float, default=None)
    nr.set_defaults(func=cmd_node_run)

    return parser


def _load_scenario(path: Path, seed_override) -> Scenario:
    scenario = parse_scenario(path.read_text())
    if seed_override is not None:
        scenario = scenario_with(scenario, seed=seed_override)
    elif "KEEPERRING_SEED" in os.environ and "seed" not in path.read_text():
        scenario = scenario_with(scenario, seed=int(os.environ["KEEPERRING_SEED"]))
    return scenario


def cmd_keytool_derive(args) -> int:
    addr = NetAddr.parse(args.address)
    print(key_hex(derive_key(addr)))
    return 0


def cmd_keytool_validate(args) -> int:
    try:
        key = key_from_hex(args.key)
    except ValueError as e:
        print(f"invalid: {e}")
        return 1
    if validate_key(key):
        print("valid")
        return 0
    print("invalid")
    return 1


def cmd_sim_run(args) -> int:
    scenario = _load_scenario(args.scenario, args.seed)
    sim = Simulation(scenario)
    if args.trace is not None:
        sim.trace_lines = []
    sim.build_ring()
    sim.run_until(sim.now + scenario.duration)
    if not sim.conservation_ok():
        raise RuntimeError("message conservation counters do not balance")
    print(f"trace_hash\t{sim.trace_digest()}")
    for name, value in sim.counters.as_dict().items():
        print(f"{name}\t{value}")
    print(f"sim_time\t{sim.now:.6f}")
    if args.trace is not None:
        args.trace.write_text("".join(sim.trace_lines))
        print(f"trace_file\t{args.trace}")
    if args.snapshots is not None:
        args.snapshots.write_text(sim.snapshot_all())
        print(f"snapshot_file\t{args.snapshots}")
    return 0


def cmd_bench(args) -> int:
    scenario = _load_scenario(args.scenario, args.seed)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    failed = False
    if args.experiment == "latency":
        result = bench.latency_experiment(scenario)
        _, stats_i, _ = result["insecure"]
        _, stats_s, _ = result["secure"]
        if stats_i is None or stats_s is None:
            raise RuntimeError("latency run produced no measurements")
        (out / "latency.tsv").write_text(bench.latency_tsv(stats_i, stats_s))
        (out / "latency_peers.tsv").write_text(
            bench.per_peer_tsv(result["insecure"][0], result["secure"][0])
        )
        print(bench.render_comparison_table(stats_i, stats_s))
        print(f"per_hop_overhead_spread\t{result['per_hop_spread']:.4f}")
        if not result["per_hop_ok"]:
            print("FAIL: per-hop overhead not constant", file=sys.stderr)
            failed = True
    elif args.experiment == "throughput":
        result = bench.throughput_experiment(scenario)
        res_i, stats_i = result["insecure"]
        res_s, stats_s = result["secure"]
        if stats_i is None or stats_s is None:
            raise RuntimeError("throughput run produced no measurements")
        (out / "throughput.tsv").write_text(bench.throughput_tsv(stats_i, stats_s))
        (out / "throughput_peers.tsv").write_text(bench.per_peer_tsv(res_i, res_s))
        print(f"insecure mean {stats_i.mean:.0f} pkts/s, "
              f"secure mean {stats_s.mean:.0f} pkts/s")
        if not result["secure_below_insecure"]:
            print("FAIL: secure throughput not below insecure", file=sys.stderr)
            failed = True
    else:  # capacity
        loads = [int(x) for x in args.loads.split(",")]
        results = {}
        modes = []
        if args.secure or not args.insecure:
            modes.append(True)
        if args.insecure or not args.secure:
            modes.append(False)
        for secure in sorted(modes):
            name = "secure" if secure else "insecure"
            sweep = bench.capacity_sweep(
                scenario_with(scenario, secure_mode=secure),
                loads,
                min_residency=args.residency,
            )
            results[name] = sweep
            sat, peak = bench.find_saturation(sweep)
            print(f"{name}: saturation at {sat} potatoes, peak {peak:.0f} passes/s")
            caps = [cap for _, _, cap in sweep]
            pre_sat = [c for (load, _, c) in sweep if load <= sat]
            if any(b < a * 0.98 for a, b in zip(pre_sat, pre_sat[1:])):
                print(f"FAIL: {name} capacity not non-decreasing before "
                      "saturation", file=sys.stderr)
                failed = True
            twox = [cap for load, _, cap in sweep if load >= 2 * sat]
            if twox and abs(twox[0] - peak) > 0.15 * peak:
                print(f"FAIL: {name} capacity at 2x saturation deviates "
                      ">15% from peak", file=sys.stderr)
                failed = True
        (out / "capacity.tsv").write_text(bench.capacity_tsv(results))
    return 1 if failed else 0


def cmd_inspect(args) -> int:
    text = args.snapshot.read_text()
    nodes = 0
    current_key = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "node":
            nodes += 1
            current_key = key_from_hex(parts[1])
            if not validate_key(current_key):
                print(f"line {lineno}: node key fails validation")
                return 1
        elif parts[0] == "group" and current_key is not None:
            members = [key_from_hex(p) for p in parts[1:-2]]
            if current_key not in members:
                print(f"line {lineno}: node missing from its own group")
                return 1
    print(f"snapshot ok: {nodes} nodes")
    return 0


def cmd_node_run(args) -> int:
    import random

    from .auth import decode_certificate
    from .directory import StaticDirectory, load_seed_records
    from .protocol import Node, NodeConfig
    from .auth import KeyPair
    from .wire import UdpTransport

    addr = NetAddr.parse(args.addr)
    cert = decode_certificate(args.cert.read_bytes())
    priv = args.key.read_bytes()
    keypair = KeyPair(public=cert.public_key, private=priv)
    records = load_seed_records(args.directory.read_text())
    directory = StaticDirectory(records)
    authority_public = args.authority_pub.read_bytes()
    self_key = derive_key(addr)
    if cert.peer_key != self_key:
        raise ValueError("certificate peer key does not match --addr")
    config = NodeConfig(ring_domain=args.ring, secure=not args.insecure)
    node = Node(
        addr=addr,
        self_key=self_key,
        keypair=keypair,
        certificate=cert,
        authority_public=authority_public,
        config=config,
        rng=random.Random(),
        lookup_fn=lambda key: directory.lookup(args.ring, key),
    )
    transport = UdpTransport(bind=addr)
    start = time.monotonic()
    now = 0.0
    next_tick = 0.0
    if args.bootstrap is None:
        node.start_alone()
        print(f"ring started at {addr} key {key_hex(self_key)}")
    else:
        for a, data in node.start_join(NetAddr.parse(args.bootstrap), now):
            transport.send(a, data)
        print(f"joining via {args.bootstrap}")
    try:
        while True:
            now = time.monotonic() - start
            if args.max_seconds is not None and now > args.max_seconds:
                break
            if now >= next_tick:
                for a, data in node.on_tick(now):
                    transport.send(a, data)
                next_tick = now + config.tick_interval
            got = transport.recv(timeout=min(0.05, max(0.001, next_tick - now)))
            if got is None:
                continue
            _, data = got
            _, sends = node.handle_datagram(data, time.monotonic() - start)
            for a, out in sends:
                transport.send(a, out)
    except KeyboardInterrupt:
        pass
    finally:
        transport.close()
    print(node.snapshot())
    return 0


if __name__ == "__main__":
    sys.exit(main())
