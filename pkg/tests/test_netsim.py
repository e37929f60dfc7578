import re
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from blockgate.identity import Consortium, FailureReason, ResolverRegistry
from blockgate.netsim import (
    CrashEntry,
    CrashPoint,
    FaultAction,
    FaultPlan,
    HandshakeFailed,
    InvalidCrashPoint,
    MessageFault,
    NonTermination,
    RecoveryPolicy,
    SubPoint,
    World,
)
from blockgate.protocol import Phase
from blockgate.protocol.log import Direction
from blockgate.scenario import ScenarioConfig, build_world, run_scenario

from worlds import only_session, start

TICK = re.compile(r"^tick=(\d+) ")


def _crash(gw, step, sub, policy, delay=5):
    return ScenarioConfig.default(fault_plan=FaultPlan(crashes=(CrashEntry(gw, CrashPoint(step, sub), policy, delay),)))


def _gateway_ids(trace):
    return {m for line in trace for m in re.findall(r"\bgw=(\S+)", line)}


# -- world basics ---------------------------------------------------------------


def test_empty_world():
    world = World(Consortium.create("empty").root_key.public_key, ResolverRegistry())
    assert world.run_to_quiescence() == [] and world.tick == 0


def test_same_tick_events_run_fifo():
    world = World(b"\0" * 32, ResolverRegistry())
    order = []
    world._ev_mark = order.append
    for label in ("a", "b", "c"):
        world._push(3, "mark", label)
    world._push(1, "mark", "first")
    world.run_to_quiescence()
    assert order == ["first", "a", "b", "c"]


def test_nominal_trace_ends_committed():
    r = run_scenario(ScenarioConfig.default())
    phases = [line for line in r.trace if " PHASE " in line]
    assert phases[-2:] == [l for l in phases if l.endswith("phase=Committed")]
    assert {re.search(r"gw=(\S+)", l).group(1) for l in phases[-2:]} == {"G1", "G2"}


def test_ticks_never_decrease():
    r = run_scenario(_crash("G1", 6, SubPoint.AFTER_SEND, RecoveryPolicy.SELF_HEALING))
    ticks = [int(TICK.match(line).group(1)) for line in r.trace]
    assert ticks == sorted(ticks)


def test_same_seed_same_trace():
    cfg = ScenarioConfig.default(seed=7, fault_plan=FaultPlan(message_faults=(MessageFault(5, FaultAction.DELAY, 4),)))
    assert run_scenario(cfg).trace == run_scenario(cfg).trace


def test_non_termination_guard():
    cfg = ScenarioConfig.default()
    world, parties = start(cfg)
    world.max_events = 10
    with pytest.raises(NonTermination):
        world.run_to_quiescence()


# -- channels ---------------------------------------------------------------------


def test_channel_ready_after_two_ticks():
    world, _ = build_world(ScenarioConfig.default())
    t = world.tick
    cid = world.open_secure_channel("G1", "G2")
    assert world.channels[cid].ready_at == t + 2
    assert world.open_secure_channel("G2", "G1") == cid


def test_broken_chain_fails_handshake():
    base = ScenarioConfig.default()
    cfg = replace(base, gateways=(base.gateway("G1"), replace(base.gateway("G2"), bind_certificate=False)))
    world, _ = build_world(cfg)
    with pytest.raises(HandshakeFailed) as exc:
        world.open_secure_channel("G1", "G2")
    assert exc.value.reason == "ChainInvalid" and exc.value.cause is FailureReason.BROKEN_BINDING
    r = run_scenario(cfg)
    assert not any(" SEND " in line for line in r.trace)
    assert only_session(r.world, "G1").phase is Phase.ABORTED


def test_reopen_after_self_healing():
    r = run_scenario(_crash("G1", 6, SubPoint.BEFORE_SEND, RecoveryPolicy.SELF_HEALING))
    channels = [line for line in r.trace if " CHANNEL " in line]
    ids = [re.search(r"id=(\d+)", l).group(1) for l in channels]
    assert len(ids) >= 2 and len(set(ids)) == len(ids)
    assert r.world.registry.identifiers() == ["G1", "G2"]
    assert r.outcome == "moved"


def test_mutated_message_rejected_and_logged():
    cfg = ScenarioConfig.default(fault_plan=FaultPlan(message_faults=(MessageFault(5, FaultAction.MUTATE),)))
    r = run_scenario(cfg)
    g1 = r.world.hosts["G1"]
    drops = [e for e in g1.log.entries if e.direction is Direction.DROP]
    assert len(drops) == 1
    recv = [e.data for e in g1.log.entries if e.direction is Direction.RECV]
    assert drops[0].data not in recv
    assert any("REJECT-MSG gw=G1" in line for line in r.trace) and r.ok


def test_dropped_message_recovered_by_timeout():
    cfg = ScenarioConfig.default(fault_plan=FaultPlan(message_faults=(MessageFault(7, FaultAction.DROP),)))
    r = run_scenario(cfg)
    assert r.outcome == "moved" and r.ok


def test_delay_adds_latency():
    nominal = run_scenario(ScenarioConfig.default())
    cfg = ScenarioConfig.default(fault_plan=FaultPlan(message_faults=(MessageFault(1, FaultAction.DELAY, 3),)))
    delayed = run_scenario(cfg)

    def first_recv(trace):
        return next(int(TICK.match(l).group(1)) for l in trace if " RECV gw=G2 step=1 " in l)

    assert first_recv(delayed.trace) == first_recv(nominal.trace) + 3


# -- crashes ----------------------------------------------------------------------


@pytest.mark.parametrize("step", [0, 13, -1])
def test_invalid_crash_point(step):
    with pytest.raises(InvalidCrashPoint):
        CrashPoint(step, SubPoint.BEFORE_SEND)


def test_g1_crash_after_log_write_step8_commits():
    r = run_scenario(_crash("G1", 8, SubPoint.AFTER_LOG_WRITE, RecoveryPolicy.SELF_HEALING))
    assert only_session(r.world, "G1").phase is Phase.COMMITTED and r.outcome == "moved"
    assert any(" CRASH gw=G1 " in l for l in r.trace) and any(" RECOVER gw=G1 " in l for l in r.trace)


def test_g2_crash_step5_without_recovery_reverts():
    r = run_scenario(_crash("G2", 5, SubPoint.BEFORE_SEND, RecoveryPolicy.NONE))
    assert only_session(r.world, "G1").phase is Phase.ABORTED
    assert r.outcome == "reverted" and r.ok
    assert r.world.hosts["G2"].engine is None


def test_primary_backup_keeps_identifier():
    r = run_scenario(_crash("G2", 7, SubPoint.AFTER_SEND, RecoveryPolicy.PRIMARY_BACKUP))
    assert r.world.registry.resolve("G2") == "G2@backup1"
    assert r.world.registry.identifiers() == ["G1", "G2"]
    assert r.outcome == "moved" and r.ok


def test_log_survives_crash():
    cfg = _crash("G1", 6, SubPoint.AFTER_LOG_WRITE, RecoveryPolicy.SELF_HEALING)
    r = run_scenario(cfg)
    crash_tick = next(int(TICK.match(l).group(1)) for l in r.trace if " CRASH " in l)
    nominal = run_scenario(ScenarioConfig.default())
    before = [e for e in nominal.world.hosts["G1"].log.entries if e.tick < crash_tick]
    assert r.world.hosts["G1"].log.entries[: len(before)] == before


def test_recovered_engine_is_fresh():
    r = run_scenario(_crash("G2", 9, SubPoint.AFTER_SEND, RecoveryPolicy.SELF_HEALING))
    assert r.world.hosts["G2"].recoveries == 1
    assert r.checks["replay-equivalence"]


@settings(max_examples=25, deadline=None)
@given(gw=st.sampled_from(["G1", "G2"]), step=st.integers(1, 12), sub=st.sampled_from(list(SubPoint)),
       policy=st.sampled_from(list(RecoveryPolicy)), delay=st.integers(1, 30))
def test_identifiers_constant_under_crashes(gw, step, sub, policy, delay):
    r = run_scenario(_crash(gw, step, sub, policy, delay))
    assert _gateway_ids(r.trace) <= {"G1", "G2"}
    assert r.world.registry.identifiers() == ["G1", "G2"]
    assert r.checks["atomicity"] and r.checks["no-double-existence"]
