import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activedrv.checker import (
    LIVENESS_RULES,
    ReplayError,
    Rule,
    StateBudgetExceeded,
    Status,
    Step,
    Trace,
    Verdict,
    build_product,
    check_all,
    check_rules,
    replay,
)
from activedrv.driver import lower, parse_driver
from activedrv.protocol import parse_protocol, recv, send
from conftest import corpus_paths, load_cfg, mutant_index, MUTANTS
from gen import random_instance
from oracle import Oracle

EXPECTED = {
    "suspend_bug.drv": {"EMIT": "PASS", "AWAIT2": "FAIL", "TERMINATION": "PASS",
                        "AWAIT1": "BLOCKED", "TIMED": "BLOCKED"},
    "suspend_ok.drv": dict.fromkeys(["EMIT", "AWAIT2", "TERMINATION", "AWAIT1", "TIMED"], "PASS"),
    "early_complete.drv": {"EMIT": "FAIL"},
    "return_immediately.drv": {"TERMINATION": "FAIL"},
    "ignore_suspend.drv": {"AWAIT1": "FAIL", "EMIT": "PASS", "AWAIT2": "PASS"},
    "stuck_suspending.drv": {"TIMED": "FAIL", "AWAIT1": "PASS"},
    "return_after_unplug.drv": {"TERMINATION": "PASS", "EMIT": "PASS"},
    "double_test.drv": dict.fromkeys(["EMIT", "AWAIT2", "TERMINATION", "AWAIT1", "TIMED"], "PASS"),
}


def statuses(report):
    return {v.rule.value: v.status.value for v in report.verdicts}


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_fixture_verdicts(name, pm):
    got = statuses(check_all(load_cfg(name), [pm]))
    for rule, want in EXPECTED[name].items():
        assert got[rule] == want, rule


def test_suspend_bug_fails_at_narrow_await(pm):
    cfg = load_cfg("suspend_bug.drv")
    v = check_all(cfg, [pm]).verdict(Rule.AWAIT2)
    node = cfg.nodes[v.trace.end_node]
    assert node.awaited == ("resume",)
    assert node.line == 11
    assert [str(e) for e in v.trace.events()] == ["?suspend", "!suspend_complete"]
    assert "SUSPENDED" in v.detail


def test_suspend_ok_has_no_reject_edges(pm):
    g = build_product(load_cfg("suspend_ok.drv"), [pm])
    assert g.rejects == []


def test_early_complete_rejects_at_depth_one(pm):
    cfg = load_cfg("early_complete.drv")
    g = build_product(cfg, [pm])
    assert g.rejects
    v = check_all(cfg, [pm]).verdict(Rule.EMIT)
    assert v.trace.events() == [send("suspend_complete")]


def test_empty_main_single_state(pm):
    g = build_product(lower(parse_driver("main { }")), [pm])
    assert len(g.states) == 1


def test_trivial_driver_no_protocol_passes():
    report = check_all(lower(parse_driver("main { }")), [])
    assert report.ok


def test_no_emit_nodes_pass(pm):
    cfg = lower(parse_driver("driver d uses power_mgmt { var mb : mailbox; main { loop { mb = await(suspend, unplug); } } }", [pm]))
    assert check_all(cfg, [pm]).verdict(Rule.EMIT).status is Status.PASS


def test_await_with_only_unfair_protocols_fails():
    p = parse_protocol("protocol q { mailbox in a; state S initial final; S -> S on ?a; }")
    cfg = lower(parse_driver("driver d uses q { var mb : mailbox; main { mb = await(a); } }", [p]))
    assert check_all(cfg, [p]).verdict(Rule.AWAIT2).status is Status.FAIL


def test_loop_forever_terminates_vacuously(pm):
    cfg = lower(parse_driver("main { loop { skip; } }"))
    assert check_all(cfg, [pm]).verdict(Rule.TERMINATION).status is Status.PASS


def test_no_in_mailboxes_no_timed_states():
    p = parse_protocol("protocol q { mailbox out a; state S initial final; S -> S on !a; }")
    cfg = lower(parse_driver("driver d uses q { main { loop { emit(a); } } }", [p]))
    r = check_all(cfg, [p])
    assert r.verdict(Rule.AWAIT1).status is Status.PASS
    assert r.verdict(Rule.TIMED).status is Status.PASS


def test_liveness_traces_are_lassos(pm):
    for name, rule in [("ignore_suspend.drv", Rule.AWAIT1), ("stuck_suspending.drv", Rule.TIMED)]:
        cfg = load_cfg(name)
        v = check_all(cfg, [pm]).verdict(rule)
        assert v.trace.is_lasso
        assert replay(cfg, [pm], v)
    v = check_all(load_cfg("stuck_suspending.drv"), [pm]).verdict(Rule.TIMED)
    assert v.trace.events() == [recv("suspend")]


def test_blocked_liveness_after_safety_failure(pm):
    r = check_all(load_cfg("suspend_bug.drv"), [pm])
    for rule in LIVENESS_RULES:
        assert r.verdict(rule).status is Status.BLOCKED


@pytest.mark.parametrize("path", corpus_paths(), ids=lambda p: p.name)
def test_every_failing_trace_replays(path, pm):
    cfg = load_cfg(path)
    for v in check_rules(build_product(cfg, [pm])).values():
        if v.status is Status.FAIL:
            assert replay(cfg, [pm], v), v.rule
            # and survives serialization
            again = Verdict.from_dict(json.loads(json.dumps(v.to_dict())))
            assert replay(cfg, [pm], again)


@pytest.mark.parametrize("entry", mutant_index(), ids=lambda e: e["file"])
def test_mutants_fail_exactly_their_rule(entry, pm):
    cfg = load_cfg(MUTANTS / entry["file"])
    report = check_all(cfg, [pm])
    failing = [v.rule.value for v in report.verdicts if v.status is Status.FAIL]
    assert failing == [entry["rule"]]
    assert replay(cfg, [pm], report.verdict(Rule(entry["rule"])))


def test_replay_rejects_bogus_trace(pm):
    cfg = load_cfg("suspend_ok.drv")
    bogus = Verdict(Rule.AWAIT2, Status.FAIL, Trace((Step(3, recv("resume")),), 4))
    with pytest.raises(ReplayError):
        replay(cfg, [pm], bogus)
    await_node = next(n.id for n in cfg.nodes if n.awaited == ("suspend", "unplug"))
    path = [Step(i) for i in range(await_node)] + [Step(await_node, recv("resume"))]
    with pytest.raises(ReplayError, match="trace delivers"):
        replay(cfg, [pm], Verdict(Rule.AWAIT2, Status.FAIL, Trace(tuple(path), 0)))
    wrong_claim = Verdict(Rule.TERMINATION, Status.FAIL, Trace((), 0))
    assert not replay(cfg, [pm], wrong_claim)


def test_failing_verdict_needs_trace():
    with pytest.raises(ValueError):
        Verdict(Rule.EMIT, Status.FAIL)


def test_budget_error_has_statistics(pm):
    with pytest.raises(StateBudgetExceeded) as exc:
        build_product(load_cfg("suspend_ok.drv"), [pm], budget=4)
    assert exc.value.budget == 4 and exc.value.frontier >= 1


def test_reports_are_deterministic(pm):
    a = check_all(load_cfg("suspend_bug.drv"), [pm]).to_dict()
    b = check_all(load_cfg("suspend_bug.drv"), [pm]).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert "wall_time_s" not in a["statistics"]


def test_traces_are_shortest(pm):
    # BFS order: no shorter path reaches the failing await
    v = check_all(load_cfg("suspend_bug.drv"), [pm]).verdict(Rule.AWAIT2)
    assert len(v.trace.steps) == 4


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 10**9))
def test_matches_oracle_on_random_instances(seed):
    cfg, protocols, _ = random_instance(random.Random(seed))
    got = {r.value: v.status is Status.PASS
           for r, v in check_rules(build_product(cfg, protocols)).items()}
    assert got == Oracle(cfg, protocols).verdicts()
    for v in check_rules(build_product(cfg, protocols)).values():
        if v.status is Status.FAIL:
            assert replay(cfg, protocols, v)
