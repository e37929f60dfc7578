"""Scenario configuration, world construction and end-of-run invariant checks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from blockgate.encoding import digest_hex, sha256
from blockgate.extensions.bridge import AuthorizationToken, BridgeNode, RedactedEvidence
from blockgate.extensions.htlc import ContractState, HashLockLedger
from blockgate.extensions.witness import WitnessChain, find_forwarding
from blockgate.identity import (
    Consortium,
    EVFields,
    KeyPair,
    KeyRole,
    ResolverRegistry,
    decode_chain,
    provision_gateway,
    validate_chain,
)
from blockgate.ledger import AssetStatus, Ledger, TxKind
from blockgate.netsim import (
    CrashEntry,
    CrashPoint,
    FaultAction,
    FaultPlan,
    InvalidCrashPoint,
    MessageFault,
    NonTermination,
    RecoveryPolicy,
    SubPoint,
    World,
)
from blockgate.protocol.gateway import ESCROW, PASSIVE_LOCK, GatewayPolicy, Phase, Role
from blockgate.protocol.log import Direction
from blockgate.protocol.messages import ProtocolMessage, Step
from blockgate import recovery


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LedgerSpec:
    id: str
    chain_id: str
    confirm_delay: int = 2
    broken_rules: tuple[str, ...] = ()


@dataclass(frozen=True)
class GatewaySpec:
    id: str
    ledger: str
    vasp: str
    legal_name: str
    jurisdiction: str
    lei: str
    bind_certificate: bool = True


@dataclass(frozen=True)
class TransferSpec:
    asset_id: str = "asset-001"
    profile_id: str = "profile/bond-v1"
    amount: Optional[int] = None
    originator: str = "alice"
    beneficiary: str = "bob"
    previous_owner: str = "charlie"
    origin_gateway: str = "G1"
    dest_gateway: str = "G2"
    requested_profile: str = ""  # profile G1 proposes; empty means the asset's own profile


@dataclass(frozen=True)
class HtlcSpec:
    amount: int = 100
    window: int = 200
    fund: int = 1000


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    ledgers: tuple[LedgerSpec, ...]
    gateways: tuple[GatewaySpec, ...]
    transfer: TransferSpec = TransferSpec()
    lock_mechanism: str = PASSIVE_LOCK
    record_evidence: bool = True
    report_final: bool = True
    t3: int = 40
    t_block_l1: int = 60
    t_block_l2: int = 60
    latency: int = 1
    vote_yes: bool = True
    withhold_finalize: bool = False
    accepted_profiles: tuple[str, ...] = ()
    fault_plan: FaultPlan = FaultPlan()
    htlc: Optional[HtlcSpec] = None
    witness: bool = False
    forwarding: bool = False
    bridge_precheck: bool = False
    probe_isolation: bool = False

    @classmethod
    def default(cls, seed: int = 0, **overrides) -> "ScenarioConfig":
        cfg = cls(
            seed=seed,
            ledgers=(LedgerSpec("L1", "B1"), LedgerSpec("L2", "B2")),
            gateways=(
                GatewaySpec("G1", "L1", "vasp-one", "First Custody AG", "CH", "5299001A2B3C4D5E6F70"),
                GatewaySpec("G2", "L2", "vasp-two", "Second Exchange Ltd", "SG", "5493002B3C4D5E6F7A81"),
            ),
        )
        return replace(cfg, **overrides)

    def ledger(self, ledger_id: str) -> LedgerSpec:
        return next(l for l in self.ledgers if l.id == ledger_id)

    def gateway(self, gateway_id: str) -> GatewaySpec:
        return next(g for g in self.gateways if g.id == gateway_id)


# -- config loading -----------------------------------------------------------


def _tuple(v) -> tuple:
    return tuple(v or ())


def _fault_plan(tree: dict) -> FaultPlan:
    crashes = []
    for c in tree.get("crashes", []) or []:
        crashes.append(CrashEntry(
            target=str(c["target"]),
            point=CrashPoint(int(c["step"]), SubPoint(c["sub_point"])),
            policy=RecoveryPolicy(str(c.get("policy", "None"))),
            recovery_delay=int(c.get("recovery_delay", 5)),
        ))
    messages = []
    for m in tree.get("messages", []) or []:
        messages.append(MessageFault(int(m["step"]), FaultAction(m["action"]), int(m.get("delay", 0)),
                                     str(m.get("sender", ""))))
    return FaultPlan(tuple(crashes), tuple(messages))


def config_from_dict(tree: dict) -> ScenarioConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    if "seed" not in tree:
        raise ConfigError("seed is required")
    try:
        base = ScenarioConfig.default(int(tree["seed"]))
        kw: dict[str, Any] = {}
        if "ledgers" in tree:
            kw["ledgers"] = tuple(LedgerSpec(str(l["id"]), str(l["chain_id"]), int(l.get("confirm_delay", 2)),
                                             _tuple(l.get("broken_rules"))) for l in tree["ledgers"])
        if "gateways" in tree:
            kw["gateways"] = tuple(GatewaySpec(
                str(g["id"]), str(g["ledger"]), str(g["vasp"]), str(g.get("legal_name", g["vasp"])),
                str(g.get("jurisdiction", "XX")), str(g.get("lei", "")), bool(g.get("bind_certificate", True)),
            ) for g in tree["gateways"])
        if "transfer" in tree:
            kw["transfer"] = TransferSpec(**tree["transfer"])
        for key in ("lock_mechanism",):
            if key in tree:
                kw[key] = str(tree[key])
        for key in ("record_evidence", "report_final", "vote_yes", "withhold_finalize", "witness", "forwarding",
                    "bridge_precheck", "probe_isolation"):
            if key in tree:
                kw[key] = bool(tree[key])
        for key in ("t3", "t_block_l1", "t_block_l2", "latency"):
            if key in tree:
                kw[key] = int(tree[key])
        if "accepted_profiles" in tree:
            kw["accepted_profiles"] = _tuple(tree["accepted_profiles"])
        if "faults" in tree:
            kw["fault_plan"] = _fault_plan(tree["faults"] or {})
        if tree.get("htlc"):
            h = tree["htlc"]
            kw["htlc"] = HtlcSpec(**h) if isinstance(h, dict) else HtlcSpec()
        cfg = replace(base, **kw)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, InvalidCrashPoint) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: ScenarioConfig) -> None:
    ledger_ids = {l.id for l in cfg.ledgers}
    gw_ids = {g.id for g in cfg.gateways}
    if len(ledger_ids) != len(cfg.ledgers) or len(gw_ids) != len(cfg.gateways):
        raise ConfigError("duplicate ledger or gateway id")
    for g in cfg.gateways:
        if g.ledger not in ledger_ids:
            raise ConfigError(f"gateway {g.id} references unknown ledger {g.ledger}")
    t = cfg.transfer
    for gw in (t.origin_gateway, t.dest_gateway):
        if gw not in gw_ids:
            raise ConfigError(f"transfer references unknown gateway {gw}")
    if cfg.lock_mechanism not in (PASSIVE_LOCK, ESCROW):
        raise ConfigError(f"lock_mechanism must be {PASSIVE_LOCK} or {ESCROW}")
    for c in cfg.fault_plan.crashes:
        if c.target not in gw_ids:
            raise ConfigError(f"crash targets unknown gateway {c.target}")
        if c.recovery_delay < 0:
            raise ConfigError("recovery_delay must be >= 0")
    for m in cfg.fault_plan.message_faults:
        if not 0 <= m.step <= 12 or m.delay < 0:
            raise ConfigError(f"bad message fault {m}")
    if min(cfg.t3, cfg.t_block_l1, cfg.t_block_l2, cfg.latency) <= 0:
        raise ConfigError("timing values must be positive")
    if cfg.htlc is not None:
        if min(cfg.htlc.amount, cfg.htlc.fund) <= 0 or cfg.htlc.amount > cfg.htlc.fund:
            raise ConfigError("htlc amount must be positive and covered by fund")
        # hash-lock ops apply immediately, so t_h only has to outlive the session deadline
        if cfg.htlc.window <= cfg.t3:
            raise ConfigError(f"htlc window {cfg.htlc.window} must exceed t3={cfg.t3}")


def load_config(path: Path) -> ScenarioConfig:
    try:
        tree = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return config_from_dict(tree)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    t = cfg.transfer
    tree: dict[str, Any] = {
        "seed": cfg.seed,
        "ledgers": [{"id": l.id, "chain_id": l.chain_id, "confirm_delay": l.confirm_delay,
                     "broken_rules": list(l.broken_rules)} for l in cfg.ledgers],
        "gateways": [{"id": g.id, "ledger": g.ledger, "vasp": g.vasp, "legal_name": g.legal_name,
                      "jurisdiction": g.jurisdiction, "lei": g.lei, "bind_certificate": g.bind_certificate}
                     for g in cfg.gateways],
        "transfer": {k: getattr(t, k) for k in TransferSpec.__dataclass_fields__},
        "lock_mechanism": cfg.lock_mechanism,
        "record_evidence": cfg.record_evidence,
        "report_final": cfg.report_final,
        "t3": cfg.t3, "t_block_l1": cfg.t_block_l1, "t_block_l2": cfg.t_block_l2, "latency": cfg.latency,
        "vote_yes": cfg.vote_yes, "withhold_finalize": cfg.withhold_finalize,
        "accepted_profiles": list(cfg.accepted_profiles),
        "faults": {
            "crashes": [{"target": c.target, "step": c.point.step, "sub_point": c.point.sub_point.value,
                         "policy": c.policy.value, "recovery_delay": c.recovery_delay}
                        for c in cfg.fault_plan.crashes],
            "messages": [{"step": m.step, "action": m.action.value, "delay": m.delay, "sender": m.sender}
                         for m in cfg.fault_plan.message_faults],
        },
        "witness": cfg.witness, "forwarding": cfg.forwarding, "bridge_precheck": cfg.bridge_precheck,
        "probe_isolation": cfg.probe_isolation,
    }
    if cfg.htlc:
        tree["htlc"] = {"amount": cfg.htlc.amount, "window": cfg.htlc.window, "fund": cfg.htlc.fund}
    return tree


# -- running ----------------------------------------------------------------------


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    world: World
    outcome: str
    checks: dict[str, bool]
    report: list[str]
    bridge_evidence: Optional[RedactedEvidence] = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    @property
    def trace(self) -> list[str]:
        return self.world.trace

    def session_phase(self, gateway_id: str) -> Optional[Phase]:
        host = self.world.hosts[gateway_id]
        if host.engine is None:
            return None
        sessions = list(host.engine.sessions.values())
        return sessions[0].phase if sessions else None


@dataclass
class _Parties:
    originator: KeyPair
    beneficiary: KeyPair
    previous_owner: KeyPair
    issuer: KeyPair


def _party(label: str) -> KeyPair:
    return KeyPair.derive(f"party:{label}", KeyRole.TRANSACTION_SIGNING)


def build_world(cfg: ScenarioConfig) -> tuple[World, _Parties]:
    consortium = Consortium.create("consortium")
    registry = ResolverRegistry()
    b4 = HashLockLedger("L4") if cfg.htlc else None
    witness = WitnessChain("W") if (cfg.witness or cfg.forwarding) else None
    world = World(consortium.root_key.public_key, registry, seed=cfg.seed, fault_plan=cfg.fault_plan,
                  latency=cfg.latency, b4=b4, witness=witness)
    for lspec in cfg.ledgers:
        world.add_ledger(Ledger(lspec.id, lspec.chain_id, lspec.confirm_delay, lspec.broken_rules))
    t = cfg.transfer
    origin = cfg.gateway(t.origin_gateway)
    dest = cfg.gateway(t.dest_gateway)
    l1 = world.ledgers[origin.ledger]
    l2 = world.ledgers[dest.ledger]
    creds = {}
    for g in cfg.gateways:
        creds[g.id] = provision_gateway(consortium, g.id, g.vasp, EVFields(g.legal_name, g.jurisdiction, g.lei),
                                        bind=g.bind_certificate)
    htlc_kw: dict[str, Any] = {}
    if cfg.htlc:
        htlc_kw = dict(htlc_amount=cfg.htlc.amount, htlc_window=cfg.htlc.window,
                       htlc_recipient=creds[dest.id].tx_key.digest)
        b4.fund(creds[origin.id].tx_key.digest, cfg.htlc.fund)
    common = dict(record_evidence=cfg.record_evidence, report_final=cfg.report_final, t3=cfg.t3,
                  t_block_l1=cfg.t_block_l1, t_block_l2=cfg.t_block_l2, witness=cfg.witness,
                  forwarding=cfg.forwarding, lock_mechanism=cfg.lock_mechanism,
                  travel_rule_payload=sha256(f"travel-rule:{t.originator}->{t.beneficiary}".encode()), **htlc_kw)
    for g in cfg.gateways:
        ledger = world.ledgers[g.ledger]
        peer = dest if g.id == origin.id else origin
        policy = GatewayPolicy(
            chain_id=ledger.chain_id, confirm_delay=ledger.confirm_delay,
            peer_confirm_delay=world.ledgers[peer.ledger].confirm_delay, **common,
        )
        if g.id == dest.id:
            policy = replace(policy, vote_yes=cfg.vote_yes, withhold_finalize=cfg.withhold_finalize,
                             accepted_profiles=cfg.accepted_profiles)
        world.add_gateway(creds[g.id], policy, ledger)

    parties = _Parties(_party(t.originator), _party(t.beneficiary), _party(t.previous_owner), _party("issuer"))
    for key in (parties.originator, parties.previous_owner, parties.issuer):
        l1.register_key(key.public_key)
    l2.register_key(parties.beneficiary.public_key)
    if cfg.bridge_precheck:
        l1.create_asset(t.asset_id, parties.issuer, parties.previous_owner.digest, t.profile_id, t.amount, 0)
        l1.transfer(t.asset_id, parties.previous_owner, parties.originator.digest, 0)
    else:
        l1.create_asset(t.asset_id, parties.issuer, parties.originator.digest, t.profile_id, t.amount, 0)
    world.tick = l1.confirm_delay
    return world, parties


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    world, parties = build_world(cfg)
    t = cfg.transfer
    origin = cfg.gateway(t.origin_gateway)
    dest = cfg.gateway(t.dest_gateway)
    l1 = world.ledgers[origin.ledger]
    evidence = None
    if cfg.bridge_precheck:
        bridge = BridgeNode(l1.reader())
        token = AuthorizationToken.issue(parties.originator, t.asset_id, parties.beneficiary.digest,
                                         world.tick + 10)
        evidence = bridge.export(t.asset_id, token, parties.beneficiary.public_key, world.tick)
    if cfg.probe_isolation:
        world.enable_isolation_probe(t.asset_id, parties.originator, parties.previous_owner.digest)
    world.initiate_transfer(origin.id, t.asset_id, parties.originator, parties.beneficiary.digest,
                            world.ledgers[dest.ledger].chain_id, dest.id, t.requested_profile)
    error = ""
    try:
        world.run_to_quiescence()
    except NonTermination as exc:
        error = str(exc)
    result = evaluate(cfg, world, parties, evidence)
    if error:
        result.checks["termination"] = False
        result.error = error
        result.report.append(f"ERROR {error}")
    return result


# -- invariant oracles -------------------------------------------------------------


def _session(world: World, gw: str):
    host = world.hosts[gw]
    if host.engine is None:
        stale = recovery.rebuild(host.log.entries, host.make_engine)
        sessions = stale.sessions
    else:
        sessions = host.engine.sessions
    return next(iter(sessions.values()), None)


def classify(l1: Ledger, l2: Ledger, asset_id: str, originator: bytes, beneficiary: bytes, tick: int) -> str:
    r1 = l1.asset_record(asset_id, tick)
    r2 = l2.asset_record(asset_id, tick)
    s1 = r1.status if r1 else AssetStatus.NONEXISTENT
    s2 = r2.status if r2 else AssetStatus.NONEXISTENT
    if s1 is AssetStatus.EXTINGUISHED and s2 is AssetStatus.ACTIVE and r2.owner_key == beneficiary:
        return "moved"
    if s1 is AssetStatus.ACTIVE and r1.owner_key == originator and s2 is AssetStatus.NONEXISTENT:
        return "reverted"
    if s1 is AssetStatus.EXTINGUISHED and s2 is AssetStatus.NONEXISTENT:
        return "stuck-committed-pending"
    return f"inconsistent(L1={s1.value},L2={s2.value})"


def _status_ticks(*ledgers: Ledger) -> list[int]:
    ticks = {0}
    for ledger in ledgers:
        for b in ledger.blocks:
            ticks.add(b.confirm_tick)
            for tx in b.transactions:
                exp = ledger.lock_expiry(tx.tx_id)
                if exp is not None:
                    ticks.add(exp)
    return sorted(ticks)


def _messages_verify(world: World) -> bool:
    for host in world.hosts.values():
        chain = host.creds.chain
        if not validate_chain(chain, world.trust_root_key).ok:
            return False
        key = chain[0].subject_public_key
        for e in host.log.entries:
            if e.direction is Direction.SENT and not ProtocolMessage.from_bytes(e.data).verify(key):
                return False
    return True


def _replay_matches(world: World) -> bool:
    for host in world.hosts.values():
        folds = recovery.phase_at_each_prefix(host.log.entries, host.make_engine)
        for length, phases in host.phase_history:
            if folds[length] != phases:
                return False
    return True


def dispute_evidence(world: World, g1: str) -> tuple[Optional[ProtocolMessage], list]:
    """Signed PrepareAck received by G1 and Claimed records on the hash-lock ledger."""
    host = world.hosts[g1]
    ack = None
    for e in host.log.entries:
        if e.direction is Direction.RECV:
            msg = ProtocolMessage.from_bytes(e.data)
            if msg.step is Step.PREPARE_ACK and msg.record.vote:
                ack = msg
    claims = [ev for ev in (world.b4.events if world.b4 else []) if ev.event == "Claimed"]
    return ack, claims


def evaluate(cfg: ScenarioConfig, world: World, parties: _Parties,
             evidence: Optional[RedactedEvidence] = None) -> ScenarioResult:
    t = cfg.transfer
    origin, dest = cfg.gateway(t.origin_gateway), cfg.gateway(t.dest_gateway)
    l1, l2 = world.ledgers[origin.ledger], world.ledgers[dest.ledger]
    final = world.final_tick()
    orig, bene = parties.originator.digest, parties.beneficiary.digest
    outcome = classify(l1, l2, t.asset_id, orig, bene, final)
    abandoned = any(h.abandoned for h in world.hosts.values())
    stuck_allowed = abandoned or cfg.withhold_finalize
    s1, s2 = _session(world, origin.id), _session(world, dest.id)
    checks: dict[str, bool] = {}

    checks["atomicity"] = outcome in ("moved", "reverted") or (outcome == "stuck-committed-pending" and stuck_allowed)
    checks["no-double-existence"] = not any(
        l1.is_asset_active(t.asset_id, tick) and l2.is_asset_active(t.asset_id, tick)
        for tick in _status_ticks(l1, l2) + [final])
    disabled = any(tx.kind is TxKind.DISABLEMENT for _, tx in l1.history(t.asset_id))
    if disabled and not stuck_allowed:
        checks["durability"] = s1 is not None and s1.phase is Phase.COMMITTED and outcome == "moved"
    else:
        checks["durability"] = True
    consistent = True
    stuck_ok = outcome == "stuck-committed-pending" and stuck_allowed
    if s1 is not None and s1.phase is Phase.COMMITTED and outcome != "moved" and not stuck_ok:
        consistent = False
    if s1 is not None and s1.phase is Phase.ABORTED and outcome not in ("reverted",):
        consistent = False
    if s2 is not None and s2.phase is Phase.COMMITTED and outcome != "moved":
        consistent = False
    checks["session-consistency"] = consistent
    checks["ledger-integrity"] = all(l.verify_header_chain() for l in world.ledgers.values())
    checks["non-repudiation"] = _messages_verify(world)
    checks["replay-equivalence"] = _replay_matches(world)
    if cfg.probe_isolation:
        checks["isolation"] = all(not p.accepted for p in world.probes)
    if world.b4 is not None:
        b4 = world.b4
        checks["htlc-conservation"] = b4.total_value() == cfg.htlc.fund
        states = [c.state for c in b4.contracts.values()]
        events = [(e.contract_id, e.event) for e in b4.events if e.event in ("Claimed", "Refunded")]
        checks["htlc-exclusivity"] = len(events) == len(set(cid for cid, _ in events))
        claimed = ContractState.CLAIMED in states
        refunded = ContractState.REFUNDED in states
        if outcome == "moved":
            coupled = claimed
        elif outcome == "reverted":
            coupled = refunded or not states or (world.hosts[origin.id].abandoned and not claimed)
        else:
            ack, claims = dispute_evidence(world, origin.id)
            coupled = (not claimed) or (ack is not None and bool(claims))
        checks["htlc-coupling"] = coupled
    if cfg.withhold_finalize:
        ack, claims = dispute_evidence(world, origin.id)
        checks["dispute-evidence"] = ack is not None and (world.b4 is None or bool(claims))
    if world.witness is not None and cfg.witness:
        digests = [e.data for e in world.witness.lookup(lambda d: len(d) == 32)]
        checks["witness-agreement"] = len(set(digests)) <= 1
    if world.witness is not None and cfg.forwarding and outcome == "moved" and s1 and s1.phase is Phase.COMMITTED:
        hits = find_forwarding(world.witness, t.asset_id)
        checks["forwarding-address"] = any(chain == l2.chain_id for _, chain in hits)
    if evidence is not None:
        blob = evidence.to_bytes()
        checks["redaction"] = parties.previous_owner.digest not in blob and orig in blob

    report = [f"SCENARIO seed={cfg.seed} final_tick={final} events={world.events_run}", f"OUTCOME {outcome}"]
    for gw, st in ((origin.id, s1), (dest.id, s2)):
        if st is None:
            report.append(f"SESSION gw={gw} none")
        else:
            report.append(f"SESSION gw={gw} id={st.session_id} role={st.role.value} phase={st.phase.value} "
                          f"cursor={st.cursor or '-'} reason={st.abort_reason or '-'}")
    for ledger in sorted(world.ledgers.values(), key=lambda l: l.ledger_id):
        rec = ledger.asset_record(t.asset_id, final)
        status = rec.status.value if rec else AssetStatus.NONEXISTENT.value
        owner = rec.owner_key.hex()[:16] if rec else "-"
        report.append(f"ASSET ledger={ledger.ledger_id} asset={t.asset_id} status={status} owner={owner} "
                      f"height={len(ledger.blocks)}")
    if world.b4 is not None:
        for c in sorted(world.b4.contracts.values(), key=lambda c: c.contract_id):
            report.append(f"HTLC contract={c.contract_id} state={c.state.value} amount={c.amount_x} "
                          f"t_h={c.expiry_t_h}")
        report.append(f"HTLC total={world.b4.total_value()}")
    if cfg.withhold_finalize:
        ack, claims = dispute_evidence(world, origin.id)
        if ack is not None:
            report.append(f"DISPUTE signed-step7 session={ack.session_id} digest={ack.digest.hex()} "
                          f"signature={ack.signature.hex()[:32]}")
        for ev in claims:
            report.append(f"DISPUTE claimed-record ledger={world.b4.ledger_id} contract={ev.contract_id} "
                          f"tick={ev.tick}")
    if world.probes:
        accepted = sum(p.accepted for p in world.probes)
        report.append(f"PROBE injections={len(world.probes)} rejected={len(world.probes) - accepted} "
                      f"accepted={accepted}")
    for name in sorted(checks):
        report.append(f"CHECK {name} {'PASS' if checks[name] else 'FAIL'}")
    return ScenarioResult(cfg, world, outcome, checks, report, evidence)


def write_outputs(result: ScenarioResult, out_dir: Path) -> None:
    out = Path(out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "trace.txt").write_text("".join(line + "\n" for line in result.trace))
    for gw, host in sorted(result.world.hosts.items()):
        host.log.write(out / "logs" / f"{gw}.log")
    (out / "report.txt").write_text("".join(line + "\n" for line in result.report))


def step_sequence(trace: list[str]) -> list[int]:
    """Numbered protocol steps performed, in order, with consecutive repeats collapsed."""
    seq: list[int] = []
    for line in trace:
        parts = line.split()
        if len(parts) < 2 or parts[1] not in ("SEND", "SUBMIT"):
            continue
        step = next((int(p[5:]) for p in parts if p.startswith("step=")), 0)
        if step and (not seq or seq[-1] != step):
            seq.append(step)
    return seq
