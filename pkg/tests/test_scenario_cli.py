import re
from dataclasses import replace
from pathlib import Path

import pytest
import yaml

from blockgate.cli import dump_log_text, main
from blockgate.netsim import CrashEntry, CrashPoint, FaultAction, FaultPlan, MessageFault, RecoveryPolicy, SubPoint
from blockgate.scenario import (
    ConfigError,
    HtlcSpec,
    ScenarioConfig,
    config_to_dict,
    load_config,
    run_scenario,
    step_sequence,
    write_outputs,
)
from blockgate.suite import run_crash_suite


def _write_cfg(tmp_path, cfg: ScenarioConfig, name="cfg.yaml") -> Path:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    return path


def _files(out: Path) -> dict[str, bytes]:
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


# -- config ---------------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    plan = FaultPlan(crashes=(CrashEntry("G2", CrashPoint(7, SubPoint.AFTER_SEND), RecoveryPolicy.PRIMARY_BACKUP, 4),),
                     message_faults=(MessageFault(5, FaultAction.DELAY, 3),))
    cfg = ScenarioConfig.default(seed=11, fault_plan=plan, htlc=HtlcSpec(), witness=True, lock_mechanism="escrow")
    assert load_config(_write_cfg(tmp_path, cfg)) == cfg


def test_default_config_command_round_trips(tmp_path, capsys):
    assert main(["default-config", "--seed", "3"]) == 0
    path = tmp_path / "d.yaml"
    path.write_text(capsys.readouterr().out)
    assert load_config(path) == ScenarioConfig.default(3)


@pytest.mark.parametrize("mutate", [
    lambda t: t.pop("seed"),
    lambda t: t["gateways"][0].update(ledger="L9"),
    lambda t: t["transfer"].update(dest_gateway="G7"),
    lambda t: t.update(lock_mechanism="handshake"),
    lambda t: t["faults"]["crashes"].append({"target": "G5", "step": 3, "sub_point": "BeforeSend", "policy": "None"}),
    lambda t: t.update(t3=0),
    lambda t: t["ledgers"].append(dict(t["ledgers"][0])),
    lambda t: t.update(htlc={"amount": 100, "window": 40, "fund": 1000}),
    lambda t: t.update(htlc={"amount": 2000, "window": 200, "fund": 1000}),
])
def test_config_errors(tmp_path, mutate):
    tree = config_to_dict(ScenarioConfig.default())
    mutate(tree)
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(tree))
    with pytest.raises(ConfigError):
        load_config(path)
    assert main(["run", str(path), "-o", str(tmp_path / "out")]) == 2


def test_unreadable_and_non_mapping_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(path)


# -- run ------------------------------------------------------------------------------


def test_nominal_run_exit_zero(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "-o", str(out)]) == 0
    report = (out / "report.txt").read_text().splitlines()
    assert "OUTCOME moved" in report
    assert any(l.startswith("SESSION gw=G1 ") and "phase=Committed" in l for l in report)
    assert any(l.startswith("ASSET ledger=L1 ") and "status=Extinguished" in l for l in report)
    assert any(l.startswith("ASSET ledger=L2 ") and "status=Active" in l for l in report)
    assert all(l.endswith("PASS") for l in report if l.startswith("CHECK"))
    assert sorted(_files(out)) == ["logs/G1.log", "logs/G2.log", "report.txt", "trace.txt"]
    assert "OUTCOME moved" in capsys.readouterr().out


def test_broken_ledger_rule_exit_one(tmp_path, capsys):
    base = ScenarioConfig.default()
    cfg = replace(base, ledgers=(replace(base.ledgers[0], broken_rules=("disablement-keeps-active",)), base.ledgers[1]))
    out = tmp_path / "out"
    assert main(["run", str(_write_cfg(tmp_path, cfg)), "-o", str(out)]) == 1
    assert "CHECK no-double-existence FAIL" in (out / "report.txt").read_text().splitlines()
    assert "no-double-existence" in capsys.readouterr().err


def test_same_seed_identical_files(tmp_path):
    plan = FaultPlan(crashes=(CrashEntry("G1", CrashPoint(9, SubPoint.AFTER_SEND), RecoveryPolicy.SELF_HEALING, 3),))
    path = _write_cfg(tmp_path, ScenarioConfig.default(seed=5, fault_plan=plan))
    assert main(["run", str(path), "-o", str(tmp_path / "a")]) == 0
    assert main(["run", str(path), "-o", str(tmp_path / "b")]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_seed_override(tmp_path):
    path = _write_cfg(tmp_path, ScenarioConfig.default(seed=1))
    main(["run", str(path), "-o", str(tmp_path / "a"), "--seed", "9"])
    assert (tmp_path / "a" / "report.txt").read_text().startswith("SCENARIO seed=9 ")


def test_nominal_step_sequence():
    assert step_sequence(run_scenario(ScenarioConfig.default()).trace) == list(range(1, 13))


# -- suite ----------------------------------------------------------------------------


def test_suite_none_policy_counts_stuck_separately(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["suite", "--policy", "None", "-o", str(out)]) == 0
    summary = next(l for l in (out / "suite.txt").read_text().splitlines() if l.startswith("SUMMARY"))
    counts = dict(kv.split("=") for kv in summary.split()[1:])
    assert counts["runs"] == "72" and counts["violations"] == "0"
    assert int(counts["stuck_committed_pending"]) > 0
    report = run_crash_suite(ScenarioConfig.default(), [RecoveryPolicy.NONE])
    for run in report.runs:
        fields = dict(kv.split("=") for kv in run.label.split())
        if run.outcome == "stuck-committed-pending":
            assert int(fields["step"]) >= 8 and run.disabled
        if fields["gw"] == "G1" and run.disabled:
            assert run.g1_phase == "P3" and run.outcome in ("stuck-committed-pending", "moved")
            assert dict(run.checks)["no-double-existence"]


@pytest.mark.slow
def test_suite_over_htlc_config_checks_conservation():
    report = run_crash_suite(ScenarioConfig.default(htlc=HtlcSpec()), list(RecoveryPolicy))
    assert len(report.runs) == 216 and report.violations == []
    assert all(dict(run.checks).get("htlc-conservation") for run in report.runs)


# -- dump-log -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def nominal_logs(tmp_path_factory):
    out = tmp_path_factory.mktemp("logs")
    write_outputs(run_scenario(ScenarioConfig.default()), out)
    return out / "logs"


def test_dump_nominal_timeline(nominal_logs, capsys):
    steps = set()
    for gw in ("G1", "G2"):
        assert main(["dump-log", str(nominal_logs / f"{gw}.log")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len([l for l in lines if l.startswith("SESSION ")]) == 1
        msgs = [l for l in lines if re.search(r"\b(SENT|RECV)\b", l)]
        assert msgs and all(" VALID" in l for l in msgs)
        steps |= {int(m) for l in lines for m in re.findall(r"step=(\d+)", l)}
    # each gateway logs its own ledger steps, so the two logs together cover the flow
    assert set(range(1, 13)) <= steps


def test_dump_flags_tampered_signature(nominal_logs):
    text = (nominal_logs / "G1.log").read_text()
    lines, code = dump_log_text(text)
    good = sum("INVALID-SIGNATURE" in l for l in lines)
    entries = text.splitlines()
    idx = next(i for i, l in enumerate(entries) if l.split("\t")[2] == "RECV")
    payload = entries[idx]
    # the signature is the trailing field of a message, so this digit lies inside it
    pos = len(payload) - 10
    flipped = payload[:pos] + ("0" if payload[pos] != "0" else "1") + payload[pos + 1:]
    entries[idx] = flipped
    lines, code = dump_log_text("\n".join(entries) + "\n")
    assert code == 0 and sum("INVALID-SIGNATURE" in l for l in lines) == good + 1


def test_dump_truncated_log_warns(nominal_logs, tmp_path, capsys):
    text = (nominal_logs / "G2.log").read_text()
    cut = tmp_path / "cut.log"
    cut.write_text(text[: len(text) // 2])
    assert main(["dump-log", str(cut)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1].startswith("WARNING log truncated")
    assert any(l.startswith("  ") for l in out)


def test_dump_corrupt_log_exit_two(nominal_logs, tmp_path):
    lines = (nominal_logs / "G1.log").read_text().splitlines()
    bad = tmp_path / "gap.log"
    bad.write_text("\n".join(lines[:2] + lines[3:]) + "\n")
    assert main(["dump-log", str(bad)]) == 2
    assert main(["dump-log", str(tmp_path / "nope.log")]) == 2


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_pass(path, tmp_path):
    assert main(["run", str(path), "-o", str(tmp_path)]) == 0
