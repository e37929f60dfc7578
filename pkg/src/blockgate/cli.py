"""Command-line entry point: run scenarios, crash suites, fuzzing and log dumps."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import yaml

from blockgate.encoding import DecodeError
from blockgate.identity import decode_chain, validate_chain
from blockgate.netsim import RecoveryPolicy
from blockgate.protocol.log import CorruptLog, Direction, LogEntry, parse_log
from blockgate.protocol.messages import STEP_NUMBER, ProtocolMessage, Step
from blockgate.protocol.gateway import PURPOSE_STEP
from blockgate.scenario import ConfigError, ScenarioConfig, config_to_dict, load_config, run_scenario, write_outputs
from blockgate.suite import fuzz_config, run_crash_suite, run_fuzz

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2

log = logging.getLogger("blockgate")


def _load(path: Optional[str], seed: Optional[int]) -> ScenarioConfig:
    cfg = load_config(Path(path)) if path else ScenarioConfig.default()
    return replace(cfg, seed=seed) if seed is not None else cfg


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seed)
    result = run_scenario(cfg)
    write_outputs(result, Path(args.out))
    for line in result.report:
        if args.verbose or line.startswith("OUTCOME") or line.endswith("FAIL"):
            print(line)
    failed = [k for k, v in result.checks.items() if not v]
    if failed:
        print(f"invariant violated: {', '.join(sorted(failed))}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_suite(args) -> int:
    cfg = _load(args.config, args.seed)
    if cfg.fault_plan.crashes or cfg.fault_plan.message_faults:
        log.warning("base config fault plan ignored by the crash suite")
    policies = [RecoveryPolicy(p) for p in args.policy] if args.policy else list(RecoveryPolicy)
    report = run_crash_suite(cfg, policies, workers=args.workers)
    lines = report.lines()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "suite.txt").write_text("".join(l + "\n" for l in lines))
    for line in lines:
        if args.verbose or not line.startswith("RUN") or "VIOLATION" in line:
            print(line)
    return EXIT_VIOLATION if report.violations else EXIT_OK


def cmd_fuzz(args) -> int:
    seeds = range(args.start, args.start + args.count)
    results = run_fuzz(seeds, workers=args.workers)
    failing = [(s, why) for s, ok, why in results if not ok]
    lines = [f"FUZZ seed={s} FAIL {why}" for s, why in failing]
    lines.append(f"SUMMARY seeds={len(results)} failures={len(failing)}")
    lines.append(f"CHECK fuzz {'PASS' if not failing else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "fuzz.txt").write_text("".join(l + "\n" for l in lines))
        for s, _ in failing[:5]:
            seed_dir = out / f"seed-{s}"
            seed_dir.mkdir(exist_ok=True)
            (seed_dir / "config.yaml").write_text(yaml.safe_dump(config_to_dict(fuzz_config(s)), sort_keys=False))
    print("\n".join(lines))
    return EXIT_VIOLATION if failing else EXIT_OK


def cmd_default_config(args) -> int:
    print(yaml.safe_dump(config_to_dict(ScenarioConfig.default(args.seed or 0)), sort_keys=False), end="")
    return EXIT_OK


# -- log dump -------------------------------------------------------------------


def _session_of(entry: LogEntry) -> str:
    try:
        rec = entry.record()
    except (DecodeError, ValueError, TypeError, KeyError):
        return "?"
    return getattr(rec, "session_id", "") or "-"


def _known_keys(entries: list[LogEntry]) -> dict[bytes, bytes]:
    """Sender digest -> gateway identity key, learned from chains carried in Phase 1 messages."""
    keys: dict[bytes, bytes] = {}
    for e in entries:
        if e.direction not in (Direction.SENT, Direction.RECV):
            continue
        try:
            msg = ProtocolMessage.from_bytes(e.data)
            if msg.step not in (Step.TRANSFER_PROPOSAL, Step.PROPOSAL_RESPONSE):
                continue
            chain = decode_chain(msg.record.cert_chain)
        except (DecodeError, ValueError, TypeError):
            continue
        if chain and len(chain) == 3 and validate_chain(chain, chain[2].subject_public_key).ok:
            keys[chain[0].subject_key_digest] = chain[0].subject_public_key
    return keys


def describe_entry(entry: LogEntry, keys: dict[bytes, bytes]) -> str:
    head = f"{entry.sequence:5d} t={entry.tick:<4d} {entry.direction.value:<8s}"
    if entry.direction in (Direction.SENT, Direction.RECV, Direction.DROP):
        try:
            msg = ProtocolMessage.from_bytes(entry.data)
        except (DecodeError, ValueError, TypeError):
            return f"{head} step=? {entry.step} UNDECODABLE"
        key = keys.get(msg.sender_gateway_digest)
        if key is None:
            status = "UNKNOWN-SIGNER"
        else:
            status = "VALID" if msg.verify(key) else "INVALID-SIGNATURE"
        return f"{head} step={STEP_NUMBER[msg.step]:<2d} {msg.step.value:<16s} seq={msg.sequence} {status}"
    try:
        rec = entry.record()
    except (DecodeError, ValueError, TypeError):
        return f"{head} {entry.step} UNDECODABLE"
    purpose = getattr(rec, "purpose", "")
    step = PURPOSE_STEP.get(purpose, 0)
    detail = {
        Direction.SUBMIT: lambda: f"purpose={purpose}",
        Direction.CONFIRM: lambda: f"purpose={purpose} height={rec.height}",
        Direction.REJECT: lambda: f"purpose={purpose} reason={rec.reason}",
        Direction.TIMEOUT: lambda: f"token={rec.token}",
        Direction.START: lambda: f"asset={rec.asset_id} failure={rec.handshake_failure or '-'}",
        Direction.RESUME: lambda: f"incarnation={rec.incarnation} absent={len(rec.absent_tx_ids)}",
        Direction.EFFECT: lambda: f"effect={purpose}",
    }[entry.direction]()
    return f"{head} step={step:<2d} {entry.step:<16s} {detail}"


def dump_log_text(text: str) -> tuple[list[str], int]:
    warning = ""
    code = EXIT_OK
    try:
        entries = parse_log(text)
    except CorruptLog as exc:
        entries = exc.valid_entries
        if exc.truncated:
            warning = f"WARNING log truncated after entry {len(entries) - 1}: {exc}"
        else:
            warning = f"ERROR corrupt log after entry {len(entries) - 1}: {exc}"
            code = EXIT_CONFIG
    keys = _known_keys(entries)
    sessions: dict[str, list[LogEntry]] = {}
    for e in entries:
        sessions.setdefault(_session_of(e), []).append(e)
    lines = []
    for sid in sessions:
        lines.append(f"SESSION {sid}")
        lines.extend("  " + describe_entry(e, keys) for e in sessions[sid])
    if warning:
        lines.append(warning)
    return lines, code


def cmd_dump_log(args) -> int:
    try:
        text = Path(args.log).read_text()
    except OSError as exc:
        print(f"cannot read log: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    lines, code = dump_log_text(text)
    print("\n".join(lines))
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockgate", description="Gateway asset-transfer simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("config", nargs="?", help="scenario YAML (default scenario if omitted)")
    run.add_argument("-o", "--out", default="out", help="output directory")
    run.add_argument("--seed", type=int)
    run.set_defaults(func=cmd_run)

    suite = sub.add_parser("suite", help="enumerate every crash point")
    suite.add_argument("config", nargs="?")
    suite.add_argument("-o", "--out", default="out")
    suite.add_argument("--seed", type=int)
    suite.add_argument("--policy", action="append", choices=[p.value for p in RecoveryPolicy])
    suite.add_argument("--workers", type=int, default=1)
    suite.set_defaults(func=cmd_suite)

    fuzz = sub.add_parser("fuzz", help="seeded random fault plans")
    fuzz.add_argument("--count", type=int, default=10_000)
    fuzz.add_argument("--start", type=int, default=0)
    fuzz.add_argument("--workers", type=int, default=1)
    fuzz.add_argument("-o", "--out")
    fuzz.set_defaults(func=cmd_fuzz)

    dump = sub.add_parser("dump-log", help="print a forensic log as per-session timelines")
    dump.add_argument("log")
    dump.set_defaults(func=cmd_dump_log)

    dflt = sub.add_parser("default-config", help="print the default scenario as YAML")
    dflt.add_argument("--seed", type=int)
    dflt.set_defaults(func=cmd_default_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
