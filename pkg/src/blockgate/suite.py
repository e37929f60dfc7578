"""Exhaustive crash enumeration and seeded fault fuzzing."""

from __future__ import annotations

import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from blockgate.netsim import CrashEntry, CrashPoint, FaultAction, FaultPlan, MessageFault, RecoveryPolicy, SubPoint
from blockgate.protocol.gateway import ESCROW, PASSIVE_LOCK, Phase
from blockgate.scenario import ScenarioConfig, ScenarioResult, run_scenario


@dataclass(frozen=True)
class RunSummary:
    label: str
    outcome: str
    g1_phase: str
    disabled: bool
    policy: str
    checks: tuple[tuple[str, bool], ...]

    @property
    def ok(self) -> bool:
        return all(v for _, v in self.checks)

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.checks if not v]


@dataclass
class SuiteReport:
    runs: list[RunSummary] = field(default_factory=list)

    @property
    def violations(self) -> list[RunSummary]:
        return [r for r in self.runs if not r.ok]

    def counts(self) -> Counter:
        c = Counter()
        for r in self.runs:
            if r.outcome == "stuck-committed-pending":
                c["stuck-committed-pending"] += 1
            elif r.g1_phase == Phase.COMMITTED.value:
                c["Committed"] += 1
            elif r.g1_phase == Phase.ABORTED.value:
                c["Aborted"] += 1
            else:
                c["Incomplete"] += 1
        return c

    def lines(self) -> list[str]:
        out = [f"RUN {r.label} outcome={r.outcome} g1={r.g1_phase} "
               f"{'OK' if r.ok else 'VIOLATION ' + ','.join(r.failed)}" for r in self.runs]
        counts = self.counts()
        out.append("SUMMARY runs={} committed={} aborted={} stuck_committed_pending={} incomplete={} violations={}".format(
            len(self.runs), counts["Committed"], counts["Aborted"], counts["stuck-committed-pending"],
            counts["Incomplete"], len(self.violations)))
        out.append(f"CHECK crash-suite-atomicity {'PASS' if not self.violations else 'FAIL'}")
        return out


def summarize(label: str, result: ScenarioResult, policy: str = "-") -> RunSummary:
    st = result.session_phase(result.config.transfer.origin_gateway)
    if st is None:
        from blockgate.scenario import _session

        s = _session(result.world, result.config.transfer.origin_gateway)
        st = s.phase if s else None
    l1 = result.world.ledgers[result.config.gateway(result.config.transfer.origin_gateway).ledger]
    disabled = any(tx.kind.value == "Disablement" for _, tx in l1.history(result.config.transfer.asset_id))
    return RunSummary(label, result.outcome, st.value if st else "-", disabled, policy,
                      tuple(sorted(result.checks.items())))


def crash_configs(base: ScenarioConfig, policies: Iterable[RecoveryPolicy] = tuple(RecoveryPolicy),
                  delay: int = 5) -> list[tuple[str, ScenarioConfig]]:
    gateways = (base.transfer.origin_gateway, base.transfer.dest_gateway)
    out = []
    for step in range(1, 13):
        for sub in SubPoint:
            for gw in gateways:
                for policy in policies:
                    entry = CrashEntry(gw, CrashPoint(step, sub), policy, delay)
                    label = f"step={step} sub={sub.value} gw={gw} policy={policy.value}"
                    out.append((label, replace(base, fault_plan=FaultPlan(crashes=(entry,)))))
    return out


def _run_one(item: tuple[str, ScenarioConfig]) -> RunSummary:
    label, cfg = item
    policy = cfg.fault_plan.crashes[0].policy.value if cfg.fault_plan.crashes else "-"
    return summarize(label, run_scenario(cfg), policy)


def run_crash_suite(base: ScenarioConfig, policies: Iterable[RecoveryPolicy] = tuple(RecoveryPolicy),
                    workers: int = 1) -> SuiteReport:
    items = crash_configs(replace(base, fault_plan=FaultPlan()), policies)
    return SuiteReport(_map(_run_one, items, workers))


def _map(fn, items, workers: int) -> list:
    if workers <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (workers * 8))))


# -- fuzzing -------------------------------------------------------------------------


def fuzz_config(seed: int, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """Random drop/delay/mutate/crash plan derived only from ``seed``."""
    rng = random.Random(seed)
    base = base or ScenarioConfig.default()
    gateways = (base.transfer.origin_gateway, base.transfer.dest_gateway)
    faults = []
    for _ in range(rng.randint(0, 3)):
        action = rng.choice(list(FaultAction))
        faults.append(MessageFault(rng.randint(1, 11), action, rng.randint(1, 15) if action is FaultAction.DELAY else 0))
    crashes = []
    for _ in range(rng.choice((0, 1, 1, 2))):
        crashes.append(CrashEntry(rng.choice(gateways), CrashPoint(rng.randint(1, 12), rng.choice(list(SubPoint))),
                                  rng.choice(list(RecoveryPolicy)), rng.randint(1, 20)))
    return replace(
        base, seed=seed,
        lock_mechanism=rng.choice((PASSIVE_LOCK, ESCROW)),
        record_evidence=rng.random() < 0.8,
        report_final=rng.random() < 0.8,
        fault_plan=FaultPlan(tuple(crashes), tuple(faults)),
    )


def _fuzz_one(seed: int) -> tuple[int, bool, str]:
    result = run_scenario(fuzz_config(seed))
    failed = [k for k, v in result.checks.items() if not v]
    return seed, not failed, ",".join(failed)


def run_fuzz(seeds: Iterable[int], workers: int = 1) -> list[tuple[int, bool, str]]:
    return _map(_fuzz_one, list(seeds), workers)
