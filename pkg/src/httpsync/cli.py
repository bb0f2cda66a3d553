"""Command line entry points: run-node, run-origin, run-scenario, bench, keygen."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from httpsync.harness.chain import HarnessError
from httpsync.node import NodeConfig, OnInvalid, TransferMode, run_node
from httpsync.presets import PRESETS, UnknownPreset, build_personality
from httpsync.sync import SyncKey, ValidationPolicy

KEY_ENV = "HTTPSYNC_KEY_FILE"


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or int(port) > 65535:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _knob(text: str) -> tuple[str, str]:
    name, sep, value = text.partition("=")
    if not sep or not name or not value:
        raise argparse.ArgumentTypeError(f"expected knob=value, got {text!r}")
    return name.strip(), value.strip()


def _add_hop_flags(p: argparse.ArgumentParser, origin: bool) -> None:
    p.add_argument("--listen", type=_address, required=True, help="address to bind, host:port (port 0 picks one)")
    if not origin:
        p.add_argument("--upstream", type=_address, required=True, help="next hop, host:port")
    p.add_argument("--key-file", help=f"file with 64 hex characters of shared key (default: ${KEY_ENV})")
    p.add_argument(
        "--personality",
        default="raw-path-cache",
        help=f"parser preset, one of: {', '.join(sorted(PRESETS))}",
    )
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        type=_knob,
        default=[],
        metavar="KNOB=VALUE",
        help="override one parser knob of the preset (repeatable)",
    )
    p.add_argument("--policy-file", help="JSON list of transition rules; omitted means strict equality")
    if not origin:
        p.add_argument("--mode", choices=[m.value for m in TransferMode], default="streaming", help="body transfer mode")
    p.add_argument("--oblivious", action="store_true", help="do not take part in synchronization")
    p.add_argument("--on-invalid", choices=[m.value for m in OnInvalid], default="close", help="reaction to a failed check")
    p.add_argument("--hop", type=int, default=1, help="hop number used in log records")
    p.add_argument("--read-timeout", type=float, default=30.0, help="seconds to wait for client or upstream bytes")
    p.add_argument("--verbose", action="store_true", help="log honored values and HTTP-Sync snapshots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="httpsync", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    node = sub.add_parser("run-node", help="run a forwarding hop")
    _add_hop_flags(node, origin=False)

    origin = sub.add_parser("run-origin", help="run an origin that validates and echoes")
    _add_hop_flags(origin, origin=True)

    scen = sub.add_parser("run-scenario", help="run a scenario file against a launched chain")
    scen.add_argument("config", help="scenario JSON file, or the name of a bundled scenario")
    scen.add_argument("--out", help="write the JSON report here")
    scen.add_argument("--baseline", action="store_true", help="run the chain with every hop oblivious")
    scen.add_argument("--launcher", choices=["process", "inprocess"], default="process", help="how hops are started")
    scen.add_argument("--timeout", type=float, default=5.0, help="per-request timeout in seconds")

    bench = sub.add_parser("bench", help="measure round-trip overhead of synchronization")
    bench.add_argument("--grid", help="grid JSON (default: the bundled overhead.json)")
    bench.add_argument("--iterations", type=int, help="override iterations per cell")
    bench.add_argument("--out", help="write the JSON results here")

    keygen = sub.add_parser("keygen", help="write a new random key file")
    keygen.add_argument("--out", required=True, help="destination path (created with mode 0600)")
    return parser


def _load_key(path: Optional[str]) -> SyncKey:
    path = path or os.environ.get(KEY_ENV)
    if not path:
        raise ValueError(f"a key file is required (--key-file or ${KEY_ENV})")
    return SyncKey.load(path)


def _node_config(args, origin: bool) -> NodeConfig:
    personality = build_personality(args.personality, dict(args.overrides))
    sync = not args.oblivious
    return NodeConfig(
        listen=args.listen,
        upstream=None if origin else args.upstream,
        personality=personality,
        policy=ValidationPolicy.load(args.policy_file),
        key=_load_key(args.key_file) if sync else None,
        transfer_mode=TransferMode(getattr(args, "mode", "streaming")),
        sync_enabled=sync,
        on_invalid=OnInvalid(args.on_invalid),
        hop=args.hop,
        read_timeout=args.read_timeout,
        verbose=args.verbose,
    )


def cmd_run_node(args, origin: bool = False) -> int:
    try:
        cfg = _node_config(args, origin)
    except UnknownPreset as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        run_node(cfg)
    except OSError as exc:
        print(f"error: cannot listen on {args.listen[0]}:{args.listen[1]}: {exc}", file=sys.stderr)
        return 1
    return 0


def _resolve_scenario(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    from httpsync.harness.corpus import scenario_path

    bundled = scenario_path(path.name[:-5] if path.name.endswith(".json") else path.name)
    if bundled.is_file():
        return Path(str(bundled))
    return path


def cmd_run_scenario(args) -> int:
    from httpsync.harness.scenario import ScenarioConfig, ScenarioError, run_attack_baseline, run_scenario

    try:
        cfg = ScenarioConfig.load(_resolve_scenario(args.config))
    except ScenarioError as exc:
        print(f"error: invalid scenario at {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.baseline:
            report = run_attack_baseline(cfg, launcher=args.launcher, timeout=args.timeout)
        else:
            report = run_scenario(cfg, launcher=args.launcher, timeout=args.timeout)
    except HarnessError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(report.summary())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return 0 if report.passed else 1


def cmd_bench(args) -> int:
    from httpsync.harness.bench import BenchGrid, format_table, results_to_json, run_bench

    try:
        grid = BenchGrid.load(args.grid)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: bad grid: {exc}", file=sys.stderr)
        return 2
    if args.iterations is not None:
        grid.iterations = args.iterations
    try:
        results = run_bench(grid, progress=lambda line: print(line, flush=True))
    except HarnessError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(format_table(results))
    if args.out:
        Path(args.out).write_text(json.dumps(results_to_json(results), indent=2) + "\n")
    return 0


def cmd_keygen(args) -> int:
    key = SyncKey.generate()
    try:
        fd = os.open(args.out, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(key.to_hex() + "\n")
        os.chmod(args.out, 0o600)
    except OSError as exc:
        print(f"error: cannot write key: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run-node":
        return cmd_run_node(args)
    if args.command == "run-origin":
        return cmd_run_node(args, origin=True)
    if args.command == "run-scenario":
        return cmd_run_scenario(args)
    if args.command == "bench":
        return cmd_bench(args)
    return cmd_keygen(args)


if __name__ == "__main__":
    sys.exit(main())
