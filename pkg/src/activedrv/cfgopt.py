"""Correlated-branch elimination after AWAIT.

A driver that awaits several mailboxes often tests the returned mailbox
more than once (``if (mb == suspend)`` ... later ``if (mb == suspend)``).
Every path that takes inconsistent outcomes at such tests is infeasible.
The rewrite specialises the region after the AWAIT by the set of values
the result variable can still hold, which resolves correlated tests
statically and removes the inconsistent paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

from .driver.ast import NONDET, evaluate, free_vars
from .driver.cfg import CfgNode, DriverCfg, NodeKind

DEFAULT_GROWTH = 4


@dataclass(frozen=True)
class CandidateRegion:
    await_node: int
    var: str
    domain: tuple[str, ...]          # values the result may take (awaited mailboxes)
    entry: int                       # successor of the await
    nodes: frozenset[int]
    branches: tuple[int, ...]        # branch nodes testing only ``var``
    exits: tuple[int, ...]


def dominators(cfg: DriverCfg) -> list[set[int]]:
    n = len(cfg.nodes)
    preds = cfg.predecessors()
    everything = set(range(n))
    dom = [set(everything) for _ in range(n)]
    dom[cfg.entry] = {cfg.entry}
    changed = True
    while changed:
        changed = False
        for v in range(n):
            if v == cfg.entry:
                continue
            ps = [dom[p] for p in preds[v]]
            new = set.intersection(*ps) if ps else set()
            new = new | {v}
            if new != dom[v]:
                dom[v] = new
                changed = True
    return dom


def _redefines(node: CfgNode, var: str) -> bool:
    return node.var == var and node.kind in (NodeKind.ASSIGN, NodeKind.AWAIT)


def tests_only(node: CfgNode, var: str) -> bool:
    return (node.kind is NodeKind.BRANCH and node.expr is not NONDET
            and free_vars(node.expr) == {var})


def find_regions(cfg: DriverCfg) -> list[CandidateRegion]:
    """Maximal single-entry regions after an AWAIT in which at least two
    branches test the await's result and the result is not redefined."""
    dom = dominators(cfg)
    preds = cfg.predecessors()
    regions = []
    for a in cfg.nodes:
        if a.kind is not NodeKind.AWAIT:
            continue
        start = a.succs[0]
        if start == a.id or a.id not in dom[start]:
            continue
        # forward closure, stopping at redefinitions and at the await itself
        region = set()
        stack = [start]
        while stack:
            v = stack.pop()
            if v in region or v == a.id or a.id not in dom[v]:
                continue
            if _redefines(cfg.nodes[v], a.var):
                continue
            region.add(v)
            stack.extend(cfg.nodes[v].succs)
        # enforce a single entry
        changed = True
        while changed and region:
            changed = False
            if any(p not in region and p != a.id for p in preds[start]):
                region = set()
                break
            for v in sorted(region):
                if v != start and any(p not in region for p in preds[v]):
                    region.discard(v)
                    changed = True
            if changed:
                keep = set()
                stack = [start]
                while stack:
                    v = stack.pop()
                    if v in region and v not in keep:
                        keep.add(v)
                        stack.extend(cfg.nodes[v].succs)
                region = keep
        branches = tuple(sorted(v for v in region if tests_only(cfg.nodes[v], a.var)))
        if len(branches) < 2:
            continue
        exits = sorted({s for v in region for s in cfg.nodes[v].succs if s not in region})
        regions.append(CandidateRegion(
            a.id, a.var, tuple(sorted(a.awaited)), start, frozenset(region), branches,
            tuple(exits),
        ))
    return regions


# -- feasibility ---------------------------------------------------------------

def outcome_values(node: CfgNode, var: str, domain) -> tuple[frozenset, frozenset]:
    """Split ``domain`` by the branch outcome (enumeration over the finite domain)."""
    taken = frozenset(v for v in domain if evaluate(node.expr, {var: v}))
    return taken, frozenset(domain) - taken


def satisfiable(constraints, var: str, domain) -> bool:
    """Is there a value of ``var`` in ``domain`` meeting every (expr, outcome) pair?"""
    return any(all(bool(evaluate(e, {var: v})) == want for e, want in constraints)
               for v in domain)


def infeasible_paths(region: CandidateRegion, cfg: DriverCfg) -> set[frozenset]:
    """Unsatisfiable combinations of branch outcomes inside ``region``.

    Each combination is a frozenset of (branch node, outcome) pairs;
    single outcomes that no awaited value can produce are included.
    """
    result = set()
    outcomes = [(b, o) for b in region.branches for o in (True, False)]
    for b, o in outcomes:
        if not satisfiable([(cfg.nodes[b].expr, o)], region.var, region.domain):
            result.add(frozenset([(b, o)]))
    for (b1, o1), (b2, o2) in combinations(outcomes, 2):
        if b1 == b2:
            continue
        c = [(cfg.nodes[b1].expr, o1), (cfg.nodes[b2].expr, o2)]
        if not satisfiable(c, region.var, region.domain):
            result.add(frozenset([(b1, o1), (b2, o2)]))
    return result


# -- rewriting -----------------------------------------------------------------

@dataclass
class RegionReport:
    await_node: int
    branches: int
    infeasible: int
    region_size: int
    clones: int = 0
    resolved: int = 0
    skipped: str | None = None

    def to_dict(self) -> dict:
        d = {"await_node": self.await_node, "branches": self.branches,
             "infeasible_combinations": self.infeasible, "region_size": self.region_size,
             "nodes_added": self.clones - self.resolved - self.region_size, "branches_resolved": self.resolved}
        if self.skipped:
            d["skipped"] = self.skipped
        return d


@dataclass
class RewriteResult:
    cfg: DriverCfg
    regions: list[RegionReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"nodes": len(self.cfg.nodes), "regions": [r.to_dict() for r in self.regions]}


def _clone_keys(cfg: DriverCfg, region: CandidateRegion) -> tuple[dict, int]:
    """Reachable (node, value set) pairs of the specialised region."""
    start = (region.entry, frozenset(region.domain))
    seen = {start}
    stack = [start]
    resolved = 0
    while stack:
        v, vals = stack.pop()
        node = cfg.nodes[v]
        if v in region.branches:
            t, f = outcome_values(node, region.var, vals)
            nxt = [(node.succs[0], t)] if t else []
            nxt += [(node.succs[1], f)] if f else []
            resolved += len(nxt) == 1
        else:
            nxt = [(s, vals) for s in node.succs]
        for s, k in nxt:
            if s in region.nodes and (s, k) not in seen:
                seen.add((s, k))
                stack.append((s, k))
    return seen, resolved


def rewrite(cfg: DriverCfg, regions, growth: int = DEFAULT_GROWTH) -> RewriteResult:
    reports = []
    chosen: list[CandidateRegion] = []
    claimed: set[int] = set()
    for r in regions:
        rep = RegionReport(r.await_node, len(r.branches),
                           len(infeasible_paths(r, cfg)), len(r.nodes))
        reports.append(rep)
        if not rep.infeasible:
            rep.skipped = "all paths feasible"
            continue
        if r.nodes & claimed:
            rep.skipped = "overlaps an earlier region"
            continue
        keys, resolved = _clone_keys(cfg, r)
        rep.clones, rep.resolved = len(keys), resolved
        if len(keys) > growth * len(r.nodes):
            rep.skipped = f"growth budget exceeded ({len(keys)} > {growth}x{len(r.nodes)})"
            continue
        chosen.append(r)
        claimed |= r.nodes
    if not chosen:
        return RewriteResult(cfg, reports)

    owner = {}
    for idx, r in enumerate(chosen):
        for v in r.nodes:
            owner[v] = idx
    by_await = {r.await_node: idx for idx, r in enumerate(chosen)}

    def key_for(s, ctx):
        # ctx: (region idx, value set) when inside a specialised region
        if ctx is not None and owner.get(s) == ctx[0]:
            return ("c", s, ctx[0], ctx[1])
        return ("o", s)

    def expand(key):
        """Node template and successor keys, or ("jump", target key)."""
        if key[0] == "o":
            node = cfg.nodes[key[1]]
            if node.id in by_await:
                idx = by_await[node.id]
                r = chosen[idx]
                return node, [("c", r.entry, idx, frozenset(r.domain))]
            return node, [("o", s) for s in node.succs]
        _, v, idx, vals = key
        node = cfg.nodes[v]
        r = chosen[idx]
        if v in r.branches:
            t, f = outcome_values(node, r.var, vals)
            if not f:
                return "jump", key_for(node.succs[0], (idx, t))
            if not t:
                return "jump", key_for(node.succs[1], (idx, f))
            return node, [key_for(node.succs[0], (idx, t)), key_for(node.succs[1], (idx, f))]
        return node, [key_for(s, (idx, vals)) for s in node.succs]

    return RewriteResult(assemble(cfg, ("o", cfg.entry), expand), reports)


def assemble(cfg: DriverCfg, entry_key, expand) -> DriverCfg:
    """Materialise a CFG from keyed node templates, numbering in pre-order."""
    memo = {}

    def resolve(key):
        path = []
        while key not in memo:
            spec = expand(key)
            if spec[0] != "jump":
                memo[key] = (key, spec)
                break
            if key in path:
                idle = ("idle", key)
                memo[idle] = (idle, (CfgNode(0, NodeKind.ASSIGN, line=0), [idle]))
                for k in path:
                    memo[k] = memo[idle]
                return memo[idle]
            path.append(key)
            key = spec[1]
        for k in path:
            memo[k] = memo[key]
        return memo[key]

    number = {}
    order = []
    stack = [resolve(entry_key)[0]]
    while stack:
        k = stack.pop()
        if k in number:
            continue
        number[k] = len(order)
        order.append(k)
        _, (tmpl, succs) = memo[k]
        real = [resolve(s)[0] for s in succs]
        memo[k] = (k, (tmpl, real))
        stack.extend(reversed(real))
    nodes = []
    for k in order:
        tmpl, succs = memo[k][1]
        nodes.append(CfgNode(number[k], tmpl.kind, tuple(number[s] for s in succs),
                             var=tmpl.var, expr=tmpl.expr, mailbox=tmpl.mailbox,
                             awaited=tmpl.awaited, line=tmpl.line))
    return DriverCfg(cfg.name, cfg.uses, cfg.vars, tuple(nodes), 0)


def optimize(cfg: DriverCfg, growth: int = DEFAULT_GROWTH) -> RewriteResult:
    return rewrite(cfg, find_regions(cfg), growth)
