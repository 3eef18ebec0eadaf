"""Explicit-state checking of the five driver protocol rules.

The product of a driver CFG with its protocol state machines is explored
breadth-first.  Protocol states advance exactly at EMIT and at the
return of AWAIT; an AWAIT fans out to every awaited mailbox whose
incoming message is enabled in the current protocol state.

Safety rules (EMIT, AWAIT2, TERMINATION) are decided by reachability.
Liveness rules (AWAIT1, TIMED) are decided by searching the restricted
product for a reachable cycle; the witness is a lasso.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

from . import __version__
from .driver.cfg import DriverCfg, NodeKind, assign, bind, branch
from .protocol import Direction, Event, Protocol, REJECT, fair_enabled, recv, send, step

DEFAULT_STATE_BUDGET = 10**6


class Rule(Enum):
    EMIT = "EMIT"
    AWAIT1 = "AWAIT1"
    AWAIT2 = "AWAIT2"
    TIMED = "TIMED"
    TERMINATION = "TERMINATION"

    @property
    def is_safety(self) -> bool:
        return self in SAFETY_RULES


SAFETY_RULES = (Rule.EMIT, Rule.AWAIT2, Rule.TERMINATION)
LIVENESS_RULES = (Rule.AWAIT1, Rule.TIMED)
RULE_ORDER = SAFETY_RULES + LIVENESS_RULES


class Status(Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    BLOCKED = "BLOCKED"


class StateBudgetExceeded(Exception):
    def __init__(self, budget: int, states: int, frontier: int, depth: int):
        self.budget = budget
        self.states = states
        self.frontier = frontier
        self.depth = depth
        super().__init__(
            f"product state budget {budget} exceeded "
            f"({states} states, frontier {frontier}, depth {depth})"
        )


@dataclass(frozen=True)
class ProductState:
    node: int
    valuation: tuple
    pstates: tuple


class Label(NamedTuple):
    event: Event | None = None
    choice: bool | None = None


@dataclass(frozen=True)
class Step:
    """One move of the driver: leaving ``node`` via ``event`` or ``choice``."""

    node: int
    event: Event | None = None
    choice: bool | None = None

    def to_dict(self) -> dict:
        d = {"node": self.node}
        if self.event is not None:
            d["event"] = str(self.event)
        if self.choice is not None:
            d["choice"] = self.choice
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Step":
        ev = d.get("event")
        return cls(d["node"], None if ev is None else Event.parse(ev), d.get("choice"))

    def __str__(self) -> str:
        if self.event is not None:
            return f"{self.node}:{self.event}"
        if self.choice is not None:
            return f"{self.node}:{'T' if self.choice else 'F'}"
        return str(self.node)


@dataclass(frozen=True)
class Trace:
    """Counterexample.  Safety traces end at ``end_node`` (or with a
    rejected emit as the last step); lassos repeat ``cycle`` forever."""

    steps: tuple[Step, ...]
    end_node: int
    cycle: tuple[Step, ...] = ()

    @property
    def is_lasso(self) -> bool:
        return bool(self.cycle)

    def events(self) -> list[Event]:
        return [s.event for s in self.steps if s.event is not None]

    def script(self, repeat: int = 1) -> list:
        """AWAIT deliveries and ``choose`` outcomes, in order."""
        out = []
        for s in list(self.steps) + list(self.cycle) * repeat:
            if s.event is not None and s.event.direction is Direction.IN:
                out.append(s.event.mailbox)
            elif s.choice is not None:
                out.append(s.choice)
        return out

    def to_dict(self) -> dict:
        d = {"steps": [s.to_dict() for s in self.steps], "end_node": self.end_node}
        if self.cycle:
            d["cycle"] = [s.to_dict() for s in self.cycle]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Trace":
        return cls(
            tuple(Step.from_dict(s) for s in d["steps"]),
            d["end_node"],
            tuple(Step.from_dict(s) for s in d.get("cycle", ())),
        )

    def __str__(self) -> str:
        text = " ".join(map(str, self.steps)) or "<start>"
        if self.cycle:
            text += " ( " + " ".join(map(str, self.cycle)) + " )^w"
        return text


@dataclass(frozen=True)
class Verdict:
    rule: Rule
    status: Status
    trace: Trace | None = None
    detail: str = ""

    def __post_init__(self):
        if self.status is Status.FAIL and self.trace is None:
            raise ValueError("a failing verdict needs a trace")

    def to_dict(self) -> dict:
        d = {"rule": self.rule.value, "status": self.status.value}
        if self.detail:
            d["detail"] = self.detail
        if self.trace is not None:
            d["trace"] = self.trace.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        trace = d.get("trace")
        return cls(Rule(d["rule"]), Status(d["status"]),
                   None if trace is None else Trace.from_dict(trace), d.get("detail", ""))


# -- product construction ------------------------------------------------------

class _Protocols:
    """Protocol list with per-mailbox ownership.  Mailboxes may be shared
    (completed subprotocols all see every message)."""

    def __init__(self, protocols: Sequence[Protocol]):
        self.list = list(protocols)
        self.owners: dict[str, list[int]] = {}
        for i, p in enumerate(self.list):
            for m in p.mailboxes:
                self.owners.setdefault(m.name, []).append(i)

    def initial(self) -> tuple:
        return tuple(p.initial for p in self.list)

    def fire(self, pstates: tuple, event: Event):
        """Advance every owner of the event's mailbox; REJECT and the
        indices of rejecting protocols if any of them refuses."""
        owners = self.owners.get(event.mailbox)
        if not owners:
            return REJECT, []
        nxt = list(pstates)
        refused = []
        for i in owners:
            t = step(self.list[i], pstates[i], event)
            if t is REJECT:
                refused.append(i)
            else:
                nxt[i] = t
        if refused:
            return REJECT, refused
        return tuple(nxt), []

    def in_mailboxes(self) -> list[str]:
        names = {m.name for p in self.list for m in p.mailboxes if m.direction is Direction.IN}
        return sorted(names)


@dataclass
class ProductGraph:
    cfg: DriverCfg
    protocols: list[Protocol]
    states: list[ProductState] = field(default_factory=list)
    index: dict = field(default_factory=dict)
    edges: list[list[tuple[Label, int]]] = field(default_factory=list)
    parent: list = field(default_factory=list)  # (pred index, Label) or None
    rejects: list[tuple[int, Event, tuple[str, ...]]] = field(default_factory=list)

    @property
    def initial(self) -> int:
        return 0

    def num_edges(self) -> int:
        return sum(len(e) for e in self.edges) + len(self.rejects)

    def path_to(self, idx: int) -> list[Step]:
        steps = []
        while self.parent[idx] is not None:
            pred, label = self.parent[idx]
            steps.append(Step(self.states[pred].node, label.event, label.choice))
            idx = pred
        steps.reverse()
        return steps

    def stats(self) -> dict:
        return {"states": len(self.states), "edges": self.num_edges(),
                "reject_edges": len(self.rejects)}


def successors(cfg: DriverCfg, protos: _Protocols, st: ProductState):
    """Yield (label, successor) pairs in canonical order; a rejected emit
    yields (label, (REJECT, refusing protocol indices))."""
    node = cfg.nodes[st.node]
    k = node.kind
    if k is NodeKind.RETURN:
        return
    if k is NodeKind.ASSIGN:
        yield Label(), ProductState(node.succs[0], assign(cfg, node, st.valuation), st.pstates)
    elif k is NodeKind.BRANCH:
        if node.is_nondet:
            yield Label(choice=True), ProductState(node.succs[0], st.valuation, st.pstates)
            yield Label(choice=False), ProductState(node.succs[1], st.valuation, st.pstates)
        else:
            i = 0 if branch(cfg, node, st.valuation) else 1
            yield Label(), ProductState(node.succs[i], st.valuation, st.pstates)
    elif k is NodeKind.EMIT:
        ev = send(node.mailbox)
        nxt, refused = protos.fire(st.pstates, ev)
        if nxt is REJECT:
            yield Label(ev), (REJECT, refused)
        else:
            yield Label(ev), ProductState(node.succs[0], st.valuation, nxt)
    elif k is NodeKind.AWAIT:
        for m in sorted(node.awaited):
            ev = recv(m)
            nxt, _ = protos.fire(st.pstates, ev)
            if nxt is not REJECT:
                val = bind(cfg, node.var, st.valuation, m)
                yield Label(ev), ProductState(node.succs[0], val, nxt)


def build_product(cfg: DriverCfg, protocols: Sequence[Protocol],
                  budget: int = DEFAULT_STATE_BUDGET) -> ProductGraph:
    protos = _Protocols(protocols)
    g = ProductGraph(cfg, protos.list)
    init = ProductState(cfg.entry, cfg.initial_valuation(), protos.initial())
    g.states.append(init)
    g.index[init] = 0
    g.edges.append([])
    g.parent.append(None)
    depth = {0: 0}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        st = g.states[i]
        out = g.edges[i]
        for label, nxt in successors(cfg, protos, st):
            if isinstance(nxt, tuple) and nxt and nxt[0] is REJECT:
                names = tuple(protos.list[j].name for j in nxt[1])
                g.rejects.append((i, label.event, names))
                continue
            j = g.index.get(nxt)
            if j is None:
                j = len(g.states)
                if j >= budget:
                    raise StateBudgetExceeded(budget, j, len(queue), depth[i] + 1)
                g.states.append(nxt)
                g.index[nxt] = j
                g.edges.append([])
                g.parent.append((i, label))
                depth[j] = depth[i] + 1
                queue.append(j)
            out.append((label, j))
    return g


# -- safety rules --------------------------------------------------------------

def check_emit(g: ProductGraph) -> Verdict:
    if not g.rejects:
        return Verdict(Rule.EMIT, Status.PASS)
    i, ev, names = g.rejects[0]
    st = g.states[i]
    steps = g.path_to(i) + [Step(st.node, ev)]
    return Verdict(Rule.EMIT, Status.FAIL, Trace(tuple(steps), st.node),
                   f"{ev} not allowed by {', '.join(names)} in state "
                   f"{_pstate_text(g, st.pstates)}")


def await2_ok(node, pstates, protocols: Sequence[Protocol]) -> bool:
    awaited = set(node.awaited)
    for p, s in zip(protocols, pstates):
        if s in p.fair and fair_enabled(p, s) <= awaited:
            return True
    return False


def check_await2(g: ProductGraph, protocols=None) -> Verdict:
    protocols = g.protocols if protocols is None else list(protocols)
    for i, st in enumerate(g.states):
        node = g.cfg.nodes[st.node]
        if node.kind is NodeKind.AWAIT and not await2_ok(node, st.pstates, protocols):
            return Verdict(
                Rule.AWAIT2, Status.FAIL, Trace(tuple(g.path_to(i)), st.node),
                f"await({', '.join(node.awaited)}) at node {st.node} (line {node.line}) "
                f"in state {_pstate_text(g, st.pstates)}: no fair protocol fully awaited",
            )
    return Verdict(Rule.AWAIT2, Status.PASS)


def check_termination(g: ProductGraph, protocols=None) -> Verdict:
    protocols = g.protocols if protocols is None else list(protocols)
    for i, st in enumerate(g.states):
        if g.cfg.nodes[st.node].kind is not NodeKind.RETURN:
            continue
        bad = [p.name for p, s in zip(protocols, st.pstates) if s not in p.finals]
        if bad:
            return Verdict(
                Rule.TERMINATION, Status.FAIL, Trace(tuple(g.path_to(i)), st.node),
                f"driver returns with {', '.join(bad)} not final "
                f"(state {_pstate_text(g, st.pstates)})",
            )
    return Verdict(Rule.TERMINATION, Status.PASS)


# -- liveness rules ------------------------------------------------------------

def _nontrivial_sccs(g: ProductGraph, member: list[bool]) -> list[list[int]]:
    """Iterative Tarjan over the subgraph induced by ``member``."""
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    result = []
    counter = 0
    for root in range(len(g.states)):
        if not member[root] or root in index:
            continue
        work = [(root, 0)]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, pos = work[-1]
            edges = g.edges[v]
            advanced = False
            while pos < len(edges):
                w = edges[pos][1]
                pos += 1
                if not member[w]:
                    continue
                if w not in index:
                    work[-1] = (v, pos)
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, 0))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                if len(comp) > 1 or any(t == v for _, t in g.edges[v]):
                    result.append(sorted(comp))
    return result


def _lasso(g: ProductGraph, comp: list[int]) -> Trace:
    members = set(comp)
    entry = comp[0]  # lowest BFS index, hence a shortest stem
    prev = {}
    queue = deque()
    for label, t in g.edges[entry]:
        if t in members and t not in prev:
            prev[t] = (entry, label)
            queue.append(t)
    while entry not in prev:
        v = queue.popleft()
        for label, t in g.edges[v]:
            if t in members and t not in prev:
                prev[t] = (v, label)
                queue.append(t)
    cycle = []
    cur = entry
    while True:
        pred, label = prev[cur]
        cycle.append(Step(g.states[pred].node, label.event, label.choice))
        cur = pred
        if cur == entry:
            break
    cycle.reverse()
    return Trace(tuple(g.path_to(entry)), g.states[entry].node, tuple(cycle))


def _first_cycle(g: ProductGraph, member: list[bool]):
    comps = _nontrivial_sccs(g, member)
    if not comps:
        return None
    return min(comps, key=lambda c: c[0])


def await1_member(g: ProductGraph, protos: _Protocols, m: str) -> list[bool]:
    ev = recv(m)
    member = []
    for st in g.states:
        nxt, _ = protos.fire(st.pstates, ev)
        node = g.cfg.nodes[st.node]
        waits = node.kind is NodeKind.AWAIT and m in node.awaited
        member.append(nxt is not REJECT and not waits)
    return member


def check_await1(g: ProductGraph, protocols=None) -> Verdict:
    protos = _Protocols(g.protocols if protocols is None else protocols)
    best = None
    for m in protos.in_mailboxes():
        comp = _first_cycle(g, await1_member(g, protos, m))
        if comp is not None and (best is None or comp[0] < best[0][0]):
            best = (comp, m)
    if best is None:
        return Verdict(Rule.AWAIT1, Status.PASS)
    comp, m = best
    trace = _lasso(g, comp)
    return Verdict(Rule.AWAIT1, Status.FAIL, trace,
                   f"?{m} stays enabled forever without being awaited "
                   f"(cycle through node {trace.end_node})")


def timed_member(g: ProductGraph, protocols: Sequence[Protocol], i: int) -> list[bool]:
    timed = protocols[i].timed
    return [st.pstates[i] in timed for st in g.states]


def check_timed(g: ProductGraph, protocols=None) -> Verdict:
    protocols = g.protocols if protocols is None else list(protocols)
    best = None
    for i, p in enumerate(protocols):
        if not p.timed:
            continue
        comp = _first_cycle(g, timed_member(g, protocols, i))
        if comp is not None and (best is None or comp[0] < best[0][0]):
            best = (comp, i)
    if best is None:
        return Verdict(Rule.TIMED, Status.PASS)
    comp, i = best
    trace = _lasso(g, comp)
    st = g.states[comp[0]]
    return Verdict(Rule.TIMED, Status.FAIL, trace,
                   f"{protocols[i].name} never leaves timed state(s); "
                   f"e.g. {st.pstates[i]} at node {trace.end_node}")


# -- driver --------------------------------------------------------------------

@dataclass
class CheckReport:
    driver: str
    protocols: list[str]
    verdicts: list[Verdict]
    stats: dict
    cfg_opt: dict | None = None

    def verdict(self, rule: Rule) -> Verdict:
        return next(v for v in self.verdicts if v.rule is rule)

    @property
    def ok(self) -> bool:
        return all(v.status is Status.PASS for v in self.verdicts)

    @property
    def failed(self) -> bool:
        return any(v.status is Status.FAIL for v in self.verdicts)

    def to_dict(self) -> dict:
        d = {
            "tool": {"name": "activedrv", "version": __version__},
            "driver": self.driver,
            "protocols": self.protocols,
            "statistics": self.stats,
            "verdicts": [v.to_dict() for v in self.verdicts],
        }
        if self.cfg_opt is not None:
            d["cfg_opt"] = self.cfg_opt
        return d

    def format_text(self) -> str:
        lines = [f"driver {self.driver} against {', '.join(self.protocols) or '(no protocol)'}"]
        s = self.stats
        lines.append(f"  product: {s['states']} states, {s['edges']} edges")
        for v in self.verdicts:
            lines.append(f"  {v.rule.value:<12} {v.status.value}")
            if v.detail:
                lines.append(f"      {v.detail}")
            if v.trace is not None:
                lines.append(f"      trace: {v.trace}")
        return "\n".join(lines) + "\n"


def check_all(cfg: DriverCfg, protocols: Sequence[Protocol],
              budget: int = DEFAULT_STATE_BUDGET, timing: bool = False) -> CheckReport:
    """Run all five rules; liveness is BLOCKED when a safety rule fails."""
    t0 = time.perf_counter()
    g = build_product(cfg, protocols, budget)
    verdicts = [check_emit(g), check_await2(g), check_termination(g)]
    if any(v.status is Status.FAIL for v in verdicts):
        verdicts += [Verdict(r, Status.BLOCKED, detail="a safety rule failed")
                     for r in LIVENESS_RULES]
    else:
        verdicts += [check_await1(g), check_timed(g)]
    stats = g.stats()
    if timing:
        stats["wall_time_s"] = round(time.perf_counter() - t0, 6)
    return CheckReport(cfg.name, [p.name for p in protocols], verdicts, stats)


def check_rules(g: ProductGraph) -> dict[Rule, Verdict]:
    """All five verdicts computed unconditionally (no BLOCKED)."""
    return {
        Rule.EMIT: check_emit(g),
        Rule.AWAIT2: check_await2(g),
        Rule.TERMINATION: check_termination(g),
        Rule.AWAIT1: check_await1(g),
        Rule.TIMED: check_timed(g),
    }


def _pstate_text(g: ProductGraph, pstates) -> str:
    return "[" + ", ".join(pstates) + "]"


# -- counterexample replay -----------------------------------------------------

class ReplayError(Exception):
    pass


def _execute(cfg: DriverCfg, protos: _Protocols, st: ProductState, s: Step):
    """Take one scripted step; returns the next state or (REJECT, event)."""
    if s.node != st.node:
        raise ReplayError(f"trace expects node {s.node}, driver is at {st.node}")
    node = cfg.nodes[st.node]
    k = node.kind
    if k is NodeKind.ASSIGN:
        return ProductState(node.succs[0], assign(cfg, node, st.valuation), st.pstates)
    if k is NodeKind.BRANCH:
        if node.is_nondet:
            if s.choice is None:
                raise ReplayError(f"missing choice at node {st.node}")
            return ProductState(node.succs[0 if s.choice else 1], st.valuation, st.pstates)
        taken = branch(cfg, node, st.valuation)
        return ProductState(node.succs[0 if taken else 1], st.valuation, st.pstates)
    if k is NodeKind.EMIT:
        ev = send(node.mailbox)
        if s.event != ev:
            raise ReplayError(f"trace expects {s.event} at node {st.node}, driver emits {ev}")
        nxt, _ = protos.fire(st.pstates, ev)
        if nxt is REJECT:
            return (REJECT, ev)
        return ProductState(node.succs[0], st.valuation, nxt)
    if k is NodeKind.AWAIT:
        ev = s.event
        if ev is None or ev.direction is not Direction.IN or ev.mailbox not in node.awaited:
            raise ReplayError(f"trace delivers {ev} to await({', '.join(node.awaited)})")
        nxt, _ = protos.fire(st.pstates, ev)
        if nxt is REJECT:
            raise ReplayError(f"{ev} is not enabled at node {st.node}")
        return ProductState(node.succs[0], bind(cfg, node.var, st.valuation, ev.mailbox), nxt)
    raise ReplayError(f"trace continues past return at node {st.node}")


def replay(cfg: DriverCfg, protocols: Sequence[Protocol], verdict: Verdict) -> bool:
    """Re-execute a counterexample and confirm it exhibits the violation.

    Raises ``ReplayError`` when the trace is not executable."""
    protos = _Protocols(protocols)
    trace = verdict.trace
    st = ProductState(cfg.entry, cfg.initial_valuation(), protos.initial())
    for k, s in enumerate(trace.steps):
        nxt = _execute(cfg, protos, st, s)
        if isinstance(nxt, tuple):
            if verdict.rule is Rule.EMIT and k == len(trace.steps) - 1:
                return True
            raise ReplayError(f"unexpected rejected emit {nxt[1]} at step {k}")
        st = nxt
    if st.node != trace.end_node:
        raise ReplayError(f"trace ends at node {st.node}, expected {trace.end_node}")
    node = cfg.nodes[st.node]
    if verdict.rule is Rule.EMIT:
        return False
    if verdict.rule is Rule.AWAIT2:
        return node.kind is NodeKind.AWAIT and not await2_ok(node, st.pstates, protos.list)
    if verdict.rule is Rule.TERMINATION:
        return node.kind is NodeKind.RETURN and any(
            s not in p.finals for p, s in zip(protos.list, st.pstates))
    # lasso: walk the cycle, it must come back to the same configuration
    start = st
    visited = [st]
    for s in trace.cycle:
        nxt = _execute(cfg, protos, st, s)
        if isinstance(nxt, tuple):
            raise ReplayError("rejected emit inside a liveness cycle")
        st = nxt
        visited.append(st)
    if st != start or not trace.cycle:
        return False
    loop = visited[:-1]
    if verdict.rule is Rule.AWAIT1:
        for m in protos.in_mailboxes():
            ok = True
            for c in loop:
                nxt, _ = protos.fire(c.pstates, recv(m))
                n = cfg.nodes[c.node]
                if nxt is REJECT or (n.kind is NodeKind.AWAIT and m in n.awaited):
                    ok = False
                    break
            if ok:
                return True
        return False
    for i, p in enumerate(protos.list):
        if p.timed and all(c.pstates[i] in p.timed for c in loop):
            return True
    return False
