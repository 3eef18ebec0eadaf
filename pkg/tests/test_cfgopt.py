import random
from itertools import product

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activedrv.cfgopt import (
    CandidateRegion,
    find_regions,
    infeasible_paths,
    optimize,
    outcome_values,
    rewrite,
    satisfiable,
)
from activedrv.checker import build_product, check_all
from activedrv.driver import NodeKind, lower, parse_driver, well_formed
from activedrv.driver.ast import Eq, Lit, Var
from activedrv.driver.interp import run_cfg
from conftest import corpus_paths, load_cfg
from gen import random_instance

TWO_TESTS = """driver d uses power_mgmt { var mb : mailbox; var b : bool;
  main { mb = await(suspend, unplug);
    if (mb == suspend) { b = true; } else { b = false; }
    if (mb == suspend) { emit(suspend_complete); } else { emit(unplug_complete); }
    loop { skip; } } }"""


def _cfg(text, pm):
    return lower(parse_driver(text, [pm]))


def test_double_test_region(pm):
    cfg = load_cfg("double_test.drv")
    regions = find_regions(cfg)
    assert len(regions) == 1
    r = regions[0]
    assert len(r.branches) == 2
    assert r.domain == ("suspend", "unplug")
    assert cfg.nodes[r.await_node].kind is NodeKind.AWAIT


def test_single_branch_has_no_region(pm):
    cfg = _cfg("""driver d uses power_mgmt { var mb : mailbox;
      main { mb = await(suspend, unplug); if (mb == suspend) { skip; } loop { skip; } } }""", pm)
    assert find_regions(cfg) == []


def test_reassignment_between_tests_has_no_region(pm):
    cfg = _cfg("""driver d uses power_mgmt { var mb : mailbox;
      main { mb = await(suspend, unplug);
        if (mb == suspend) { skip; }
        mb = await(resume);
        if (mb == suspend) { skip; }
        loop { skip; } } }""", pm)
    assert find_regions(cfg) == []


def _eq(m, negated=False):
    return Eq(Var("mb"), Lit(m), negated)


def test_contradictory_outcomes_unsatisfiable():
    dom = ("suspend", "unplug", "resume")
    assert not satisfiable([(_eq("suspend"), True), (_eq("suspend"), False)], "mb", dom)
    assert not satisfiable([(_eq("suspend"), True), (_eq("unplug"), True)], "mb", dom)
    assert satisfiable([(_eq("suspend"), False), (_eq("unplug"), False)], "mb", dom)
    # restricted to the awaited domain the last combination is impossible
    assert not satisfiable([(_eq("suspend"), False), (_eq("unplug"), False)], "mb",
                           ("suspend", "unplug"))


def test_outcome_values_partition():
    from activedrv.driver.cfg import CfgNode
    node = CfgNode(0, NodeKind.BRANCH, (1, 2), expr=_eq("unplug", negated=True))
    t, f = outcome_values(node, "mb", ("suspend", "unplug"))
    assert t == {"suspend"} and f == {"unplug"}


def test_infeasible_paths_of_double_test():
    cfg = load_cfg("double_test.drv")
    (r,) = find_regions(cfg)
    b1, b2 = r.branches
    bad = infeasible_paths(r, cfg)
    assert frozenset({(b1, True), (b2, False)}) in bad
    assert frozenset({(b1, False), (b2, True)}) in bad
    assert frozenset({(b1, True), (b2, True)}) not in bad


def test_rewrite_identity_on_empty_region_list():
    cfg = load_cfg("suspend_ok.drv")
    assert rewrite(cfg, []).cfg == cfg


def test_all_feasible_region_is_left_alone(pm):
    cfg = _cfg("""driver d uses power_mgmt { var mb : mailbox;
      main { mb = await(suspend, unplug, resume);
        if (mb == suspend) { skip; }
        if (mb == unplug) { skip; }
        loop { skip; } } }""", pm)
    regions = find_regions(cfg)
    assert len(regions) == 1
    # suspend/unplug exclusive: one infeasible pair, so use a genuinely independent pair
    r = regions[0]
    independent = CandidateRegion(r.await_node, "b", ("x",), r.entry, r.nodes, (), r.exits)
    res = rewrite(cfg, [independent])
    assert res.cfg == cfg and res.regions[0].skipped == "all paths feasible"


def _paths(cfg, limit=12):
    """Branch-outcome-consistent event sequences: all scripts of length <= 3."""
    out = set()
    for n in range(4):
        for script in product(range(3), repeat=n):
            r = run_cfg(cfg, list(script), max_steps=300, max_events=limit)
            out.add((tuple(map(str, r.events)), r.returned, r.exhausted))
    return out


def test_double_test_rewrite(pm):
    cfg = load_cfg("double_test.drv")
    res = optimize(cfg)
    new = res.cfg
    assert well_formed(new, [pm]) == []
    assert res.regions[0].resolved == 2 and res.regions[0].skipped is None
    # after the await only one test of mb == suspend remains on every path
    after = [n for n in new.nodes if n.kind is NodeKind.BRANCH and str(n.expr) == "mb == suspend"]
    assert len(after) == 1
    assert _paths(new) == _paths(cfg)
    before = len(build_product(cfg, [pm]).states)
    now = len(build_product(new, [pm]).states)
    assert now < before


def test_two_tests_rewrite(pm):
    cfg = _cfg(TWO_TESTS, pm)
    res = optimize(cfg)
    assert res.regions and res.regions[0].skipped is None
    assert _paths(res.cfg) == _paths(cfg)


def test_growth_budget_skips_region(pm):
    cfg = load_cfg("double_test.drv")
    res = optimize(cfg, growth=1)
    assert res.cfg == cfg
    assert "growth budget" in res.regions[0].skipped


@pytest.mark.parametrize("path", corpus_paths(), ids=lambda p: p.name)
def test_verdicts_preserved_on_corpus(path, pm):
    cfg = load_cfg(path)
    new = optimize(cfg).cfg
    a = [(v.rule, v.status) for v in check_all(cfg, [pm]).verdicts]
    b = [(v.rule, v.status) for v in check_all(new, [pm]).verdicts]
    assert a == b
    assert len(build_product(new, [pm]).states) <= len(build_product(cfg, [pm]).states)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9), st.lists(st.integers(0, 5), max_size=20))
def test_rewrite_preserves_traces_on_random_programs(seed, script):
    cfg, protocols, _ = random_instance(random.Random(seed), max_nodes=40)
    new = optimize(cfg).cfg
    assert well_formed(new, protocols) == []
    a = run_cfg(cfg, script, max_steps=4000, max_events=50)
    b = run_cfg(new, script, max_steps=4000, max_events=50)
    if a.truncated or b.truncated:
        n = min(len(a.events), len(b.events))
        assert a.events[:n] == b.events[:n]
    else:
        assert (a.events, a.returned, a.exhausted) == (b.events, b.returned, b.exhausted)
    va = [(v.rule, v.status) for v in check_all(cfg, protocols).verdicts]
    vb = [(v.rule, v.status) for v in check_all(new, protocols).verdicts]
    assert va == vb
