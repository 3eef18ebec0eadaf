"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line that is printed in the
terminal summary (and to stdout, visible with ``-s``).
"""

import random
import time
from contextlib import contextmanager

from activedrv.checker import (
    Rule,
    Status,
    build_product,
    check_all,
    check_rules,
    replay,
)
from activedrv.cfgopt import optimize
from activedrv.cli import main
from activedrv.decomposition import check_decomposition, check_language_equiv, load_decomposition
from activedrv.driver import NodeKind, lower, parse_driver
from activedrv.runtime import run
from conftest import ACCEPTANCE, FIXTURES, corpus_paths, load_cfg, mutant_index, MUTANTS
from gen import random_driver_text, random_instance
from oracle import Oracle
from test_decomposition import brute_force_witness, without_rearm

SAFETY = (Rule.EMIT, Rule.AWAIT2, Rule.TERMINATION)


@contextmanager
def criterion(n, title):
    t0 = time.perf_counter()
    notes = []
    ok = False
    try:
        yield notes
        ok = True
    finally:
        extra = f" ({'; '.join(notes)})" if notes else ""
        line = (f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}{extra} "
                f"[{time.perf_counter() - t0:.2f}s]")
        ACCEPTANCE[n] = line
        print(line)


def test_criterion_1_bug_reproduction(pm):
    with criterion(1, "faulty fragment fails only the await rule, fixed variant passes") as notes:
        t0 = time.perf_counter()
        bug = load_cfg("suspend_bug.drv")
        report = check_all(bug, [pm])
        failed = [v.rule for v in report.verdicts if v.status is Status.FAIL]
        assert failed == [Rule.AWAIT2]
        v = report.verdict(Rule.AWAIT2)
        narrow = bug.nodes[v.trace.end_node]
        assert narrow.kind is NodeKind.AWAIT and narrow.awaited == ("resume",)
        assert narrow.line == 11
        assert replay(bug, [pm], v)
        fixed = check_all(load_cfg("suspend_ok.drv"), [pm])
        assert [v.status for v in fixed.verdicts] == [Status.PASS] * 5
        elapsed = time.perf_counter() - t0
        notes.append(f"narrow await at line {narrow.line}")
        assert elapsed < 5


def test_criterion_2_decomposition(pm):
    with criterion(2, "six-part decomposition valid, deleted rearm yields witness") as notes:
        t0 = time.perf_counter()
        d = load_decomposition(FIXTURES / "power_mgmt.decomp")
        report = check_decomposition(d)
        assert report.ok and report.parts == 6
        assert brute_force_witness(d.parent, d.completed_parts(), 10) is None
        broken = without_rearm(d)
        res = check_language_equiv(broken)
        assert not res.equivalent
        assert brute_force_witness(broken.parent, broken.completed_parts(), 10) == res.witness
        notes.append("witness " + " ".join(str(e) for e in res.witness))
        assert time.perf_counter() - t0 < 10


def _part_verdicts(cfg, parts):
    """Per-part EMIT and TERMINATION verdicts over the joint product of the
    completed parts, plus the AWAIT2 verdict of the part set as a whole."""
    g = build_product(cfg, parts)
    emit = {p.name: not any(p.name in names for _, _, names in g.rejects) for p in parts}
    term = {p.name: all(st.pstates[i] in p.finals for st in g.states
                        if cfg.nodes[st.node].kind is NodeKind.RETURN)
            for i, p in enumerate(parts)}
    rules = check_rules(g)
    assert all(emit.values()) == (rules[Rule.EMIT].status is Status.PASS)
    assert all(term.values()) == (rules[Rule.TERMINATION].status is Status.PASS)
    return {Rule.EMIT: all(emit.values()),
            Rule.AWAIT2: rules[Rule.AWAIT2].status is Status.PASS,
            Rule.TERMINATION: all(term.values())}


def test_criterion_3_decomposition_soundness(pm):
    with criterion(3, "parent verdicts equal verdicts against completed parts") as notes:
        parts = load_decomposition(FIXTURES / "power_mgmt.decomp").completed_parts()
        cfgs = [load_cfg(p) for p in corpus_paths()]
        rng = random.Random(2024)
        while len(cfgs) < 60:
            text = random_driver_text(rng, [pm], name=f"r{len(cfgs)}")
            cfgs.append(lower(parse_driver(text, [pm])))
        mismatches = []
        for cfg in cfgs:
            parent = check_rules(build_product(cfg, [pm]))
            want = {r: parent[r].status is Status.PASS for r in SAFETY}
            if _part_verdicts(cfg, parts) != want:
                mismatches.append(cfg.name)
        notes.append(f"{len(cfgs)} driver/protocol pairs, {len(mismatches)} mismatches")
        assert len(cfgs) >= 20
        assert mismatches == []


def test_criterion_4_oracle_equivalence():
    with criterion(4, "checker matches brute-force enumerator on random instances") as notes:
        t0 = time.perf_counter()
        rng = random.Random(4)
        n, bad = 500, []
        for k in range(n):
            cfg, protocols, text = random_instance(rng, max_nodes=30, max_states=6)
            assert len(cfg.nodes) <= 30 and all(len(p.states) <= 6 for p in protocols)
            got = {r.value: v.status is Status.PASS
                   for r, v in check_rules(build_product(cfg, protocols)).items()}
            if got != Oracle(cfg, protocols).verdicts():
                bad.append(k)
        notes.append(f"{n} instances, {len(bad)} discrepancies")
        assert bad == []
        assert time.perf_counter() - t0 < 600


def test_criterion_5_seeded_bugs(pm):
    with criterion(5, "every seeded mutant detected with a replayable counterexample") as notes:
        index = mutant_index()
        assert len(index) == 12
        covered = set()
        slowest = 0.0
        for entry in index:
            t0 = time.perf_counter()
            cfg = load_cfg(MUTANTS / entry["file"])
            report = check_all(cfg, [pm])
            v = report.verdict(Rule(entry["rule"]))
            assert v.status is Status.FAIL, entry
            assert replay(cfg, [pm], v)
            sim = run(cfg, [pm], replay=v)
            assert sim.violation and sim.verdict.rule is v.rule, entry
            covered.add(v.rule)
            slowest = max(slowest, time.perf_counter() - t0)
            assert time.perf_counter() - t0 < 180
        assert covered == set(Rule)
        notes.append(f"12 mutants, all five rules, slowest {slowest:.3f}s")


def test_criterion_6_cfg_transformation(pm):
    with criterion(6, "cfg rewrite keeps verdicts and shrinks the double-test product") as notes:
        for path in corpus_paths():
            cfg = load_cfg(path)
            new = optimize(cfg).cfg
            before = [(v.rule, v.status) for v in check_all(cfg, [pm]).verdicts]
            after = [(v.rule, v.status) for v in check_all(new, [pm]).verdicts]
            assert before == after, path.name
        cfg = load_cfg("double_test.drv")
        a = len(build_product(cfg, [pm]).states)
        b = len(build_product(optimize(cfg).cfg, [pm]).states)
        notes.append(f"double_test {a} -> {b} states, ratio {b / a:.3f}")
        assert b < a


def test_criterion_7_simulator_agreement(pm):
    with criterion(7, "simulation reproduces safety failures and violations replay") as notes:
        reproduced, replayed = 0, 0
        for path in corpus_paths():
            cfg = load_cfg(path)
            report = check_all(cfg, [pm])
            for v in report.verdicts:
                if v.rule not in SAFETY or v.status is not Status.FAIL:
                    continue
                for seed in range(1000):
                    r = run(cfg, [pm], seed=seed, max_steps=10_000)
                    if r.violation and r.verdict.rule is v.rule:
                        break
                else:
                    raise AssertionError(f"{path.name}: {v.rule.value} not reproduced")
                assert replay(cfg, [pm], r.checker_verdict())
                reproduced += 1
            for seed in range(20):
                r = run(cfg, [pm], seed=seed, max_steps=10_000)
                if r.violation:
                    assert replay(cfg, [pm], r.checker_verdict()), (path.name, seed)
                    replayed += 1
        notes.append(f"{reproduced} safety failures reproduced, {replayed} violations replayed")
        assert reproduced > 0


def test_criterion_8_determinism(capsys):
    with criterion(8, "reports byte-identical across runs") as notes:
        prot = str(FIXTURES / "power_mgmt.prot")
        runs = []
        for path in corpus_paths():
            for fmt in ("machine", "text"):
                runs.append(["check", "--format", fmt, str(path), prot])
                runs.append(["check", "--format", fmt, str(path), prot, "--cfg-opt", "on"])
                runs.append(["simulate", "--format", fmt, str(path), prot, "--seed", "11"])
        runs.append(["decompose", "--format", "machine", str(FIXTURES / "power_mgmt.decomp")])
        runs.append(["stats", "--format", "machine", prot])
        for argv in runs:
            outs = []
            for _ in range(2):
                main(argv)
                outs.append(capsys.readouterr().out.encode())
            assert outs[0] == outs[1], argv
        notes.append(f"{len(runs)} command lines")
