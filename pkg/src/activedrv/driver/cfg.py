"""Control-flow graphs of driver models and the lowering that builds them."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from ..protocol import Diagnostic, Direction, ProtocolSet
from .ast import (
    BOOL,
    MAILBOX,
    NONDET,
    Assign,
    Await,
    BoolLit,
    Break,
    Call,
    Choose,
    DriverProgram,
    Emit,
    If,
    Loop,
    Return,
    Skip,
    VarDecl,
    While,
    evaluate,
    free_vars,
)

DEFAULT_INLINE_BUDGET = 10**4


class LoweringError(Exception):
    pass


class NodeKind(Enum):
    ASSIGN = "assign"
    BRANCH = "branch"
    EMIT = "emit"
    AWAIT = "await"
    RETURN = "return"


@dataclass(frozen=True)
class CfgNode:
    id: int
    kind: NodeKind
    succs: tuple[int, ...] = ()  # BRANCH: (true, false)
    var: str | None = None       # ASSIGN target / AWAIT result variable
    expr: object = None          # ASSIGN value / BRANCH condition
    mailbox: str | None = None   # EMIT
    awaited: tuple[str, ...] = ()
    line: int = 0

    @property
    def is_nondet(self) -> bool:
        return self.kind is NodeKind.BRANCH and self.expr is NONDET

    def describe(self) -> str:
        k = self.kind
        if k is NodeKind.ASSIGN:
            return "skip" if self.var is None else f"{self.var} = {self.expr}"
        if k is NodeKind.BRANCH:
            return f"if {self.expr}"
        if k is NodeKind.EMIT:
            return f"emit({self.mailbox})"
        if k is NodeKind.AWAIT:
            return f"{self.var} = await({', '.join(self.awaited)})"
        return "return"


@dataclass(frozen=True)
class DriverCfg:
    name: str
    uses: tuple[str, ...]
    vars: tuple[VarDecl, ...]
    nodes: tuple[CfgNode, ...]
    entry: int = 0
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {v.name: i for i, v in enumerate(self.vars)})

    def __len__(self) -> int:
        return len(self.nodes)

    def var_index(self, name: str) -> int:
        return self._index[name]

    def initial_valuation(self) -> tuple:
        return tuple(v.init for v in self.vars)

    def env(self, valuation) -> dict:
        return dict(zip((v.name for v in self.vars), valuation))

    def count(self, kind: NodeKind) -> int:
        return sum(1 for n in self.nodes if n.kind is kind)

    def predecessors(self) -> dict[int, list[int]]:
        preds = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for s in n.succs:
                preds[s].append(n.id)
        return preds

    def format(self) -> str:
        out = [f"cfg {self.name} ({len(self.nodes)} nodes)"]
        for n in self.nodes:
            succ = ",".join(map(str, n.succs)) or "-"
            out.append(f"  {n.id:3d} L{n.line:<3d} {n.describe():40s} -> {succ}")
        return "\n".join(out) + "\n"


# -- execution helpers shared by the checker and the simulator ------------------

def assign(cfg: DriverCfg, node: CfgNode, valuation: tuple) -> tuple:
    if node.var is None:
        return valuation
    value = evaluate(node.expr, cfg.env(valuation))
    i = cfg.var_index(node.var)
    if valuation[i] == value:
        return valuation
    return valuation[:i] + (value,) + valuation[i + 1:]


def bind(cfg: DriverCfg, var: str, valuation: tuple, value) -> tuple:
    i = cfg.var_index(var)
    return valuation[:i] + (value,) + valuation[i + 1:]


def branch(cfg: DriverCfg, node: CfgNode, valuation: tuple) -> bool:
    return bool(evaluate(node.expr, cfg.env(valuation)))


# -- lowering ------------------------------------------------------------------

_JUMP = "jump"


class _Builder:
    def __init__(self, program: DriverProgram, budget: int):
        self.program = program
        self.budget = budget
        self.kind: list = []
        self.succs: list[list[int]] = []
        self.attrs: list[dict] = []

    def new(self, kind, succs=(), **attrs) -> int:
        if len(self.kind) >= self.budget:
            raise LoweringError(f"inlining budget of {self.budget} nodes exceeded")
        self.kind.append(kind)
        self.succs.append(list(succs))
        self.attrs.append(attrs)
        return len(self.kind) - 1

    def block(self, stmts, succ: int, brk: int | None, ret: int | None) -> int:
        for s in reversed(stmts):
            succ = self.stmt(s, succ, brk, ret)
        return succ

    def stmt(self, s, succ, brk, ret) -> int:
        if isinstance(s, Assign):
            return self.new(NodeKind.ASSIGN, [succ], var=s.var, expr=s.value, line=s.line)
        if isinstance(s, Skip):
            return self.new(NodeKind.ASSIGN, [succ], line=s.line)
        if isinstance(s, Emit):
            return self.new(NodeKind.EMIT, [succ], mailbox=s.mailbox, line=s.line)
        if isinstance(s, Await):
            return self.new(NodeKind.AWAIT, [succ], var=s.var, awaited=s.mailboxes, line=s.line)
        if isinstance(s, Choose):
            t = self.new(NodeKind.ASSIGN, [succ], var=s.var, expr=BoolLit(True), line=s.line)
            f = self.new(NodeKind.ASSIGN, [succ], var=s.var, expr=BoolLit(False), line=s.line)
            return self.new(NodeKind.BRANCH, [t, f], expr=NONDET, line=s.line)
        if isinstance(s, If):
            t = self.block(s.then, succ, brk, ret)
            f = self.block(s.orelse, succ, brk, ret)
            return self.new(NodeKind.BRANCH, [t, f], expr=s.cond, line=s.line)
        if isinstance(s, While):
            head = self.new(_JUMP, [])
            body = self.block(s.body, head, succ, ret)
            test = self.new(NodeKind.BRANCH, [body, succ], expr=s.cond, line=s.line)
            self.succs[head] = [test]
            return test
        if isinstance(s, Loop):
            head = self.new(_JUMP, [], line=s.line)
            body = self.block(s.body, head, succ, ret)
            self.succs[head] = [body]
            return head
        if isinstance(s, Break):
            return brk
        if isinstance(s, Return):
            if ret is None:
                return self.new(NodeKind.RETURN, [], line=s.line)
            return ret
        if isinstance(s, Call):
            return self.block(self.program.functions[s.func], succ, None, succ)
        raise TypeError(f"unknown statement {s!r}")

    def resolve(self, i: int, memo: dict) -> int:
        """Follow jump chains; a cycle made only of jumps becomes an idle node."""
        path = []
        while self.kind[i] == _JUMP and i not in memo:
            if i in path:
                line = self.attrs[i].get("line", 0)
                idle = self.new(NodeKind.ASSIGN, [], line=line)
                self.succs[idle] = [idle]
                for j in path:
                    memo[j] = idle
                return idle
            path.append(i)
            i = self.succs[i][0]
        target = memo.get(i, i)
        for j in path:
            memo[j] = target
        return target

    def finish(self, entry: int) -> DriverCfg:
        memo: dict[int, int] = {}
        entry = self.resolve(entry, memo)
        order: list[int] = []
        number: dict[int, int] = {}
        stack = [entry]
        while stack:
            i = stack.pop()
            if i in number:
                continue
            number[i] = len(order)
            order.append(i)
            succs = [self.resolve(s, memo) for s in self.succs[i]]
            self.succs[i] = succs
            stack.extend(reversed(succs))
        nodes = []
        for old in order:
            a = self.attrs[old]
            nodes.append(CfgNode(
                number[old], self.kind[old],
                tuple(number[s] for s in self.succs[old]),
                var=a.get("var"), expr=a.get("expr"), mailbox=a.get("mailbox"),
                awaited=a.get("awaited", ()), line=a.get("line", 0),
            ))
        p = self.program
        return DriverCfg(p.name, p.uses, p.vars, tuple(nodes), 0)


def lower(program: DriverProgram, budget: int = DEFAULT_INLINE_BUDGET) -> DriverCfg:
    """Inline calls and lower structured control flow to a CFG.

    Nodes are numbered in pre-order from the entry (true successor
    before false successor); unreachable nodes are dropped.
    """
    b = _Builder(program, budget)
    end = b.new(NodeKind.RETURN, [])
    entry = b.block(program.main, end, None, None)
    return b.finish(entry)


# -- well-formedness -----------------------------------------------------------

def well_formed(cfg: DriverCfg, protocols) -> list[Diagnostic]:
    """Structural CFG invariants plus mailbox/direction binding."""
    pset = protocols if isinstance(protocols, ProtocolSet) else ProtocolSet(protocols)
    diags = []

    def err(msg, node=None):
        diags.append(Diagnostic("error", msg, None if node is None else f"node {node.id}"))

    ids = {n.id for n in cfg.nodes}
    for i, n in enumerate(cfg.nodes):
        if n.id != i:
            err("node numbering is not dense", n)
        if any(s not in ids for s in n.succs):
            err("edge to unknown node", n)
        want = {NodeKind.BRANCH: 2, NodeKind.RETURN: 0}.get(n.kind, 1)
        if len(n.succs) != want:
            err(f"{n.kind.value} node has {len(n.succs)} successors, expected {want}", n)
        if n.kind is NodeKind.EMIT:
            m = pset.mailbox(n.mailbox)
            if m is None:
                err(f"emit on unknown mailbox {n.mailbox}", n)
            elif m.direction is not Direction.OUT:
                err(f"emit on incoming mailbox {n.mailbox}", n)
        if n.kind is NodeKind.AWAIT:
            if not n.awaited:
                err("await on no mailbox", n)
            for name in n.awaited:
                m = pset.mailbox(name)
                if m is None:
                    err(f"await on unknown mailbox {name}", n)
                elif m.direction is not Direction.IN:
                    err(f"await on outgoing mailbox {name}", n)
            decl = next((v for v in cfg.vars if v.name == n.var), None)
            if decl is None or decl.type != MAILBOX:
                err(f"await result variable {n.var} is not a mailbox variable", n)
        if n.kind is NodeKind.BRANCH and n.expr is not NONDET:
            for v in free_vars(n.expr):
                if v not in cfg._index:
                    err(f"branch reads undeclared variable {v}", n)
        if n.kind is NodeKind.ASSIGN and n.var is not None:
            decl = next((v for v in cfg.vars if v.name == n.var), None)
            if decl is None:
                err(f"assignment to undeclared variable {n.var}", n)
    if cfg.nodes:
        seen = {cfg.entry}
        stack = [cfg.entry]
        while stack:
            for s in cfg.nodes[stack.pop()].succs:
                if s in ids and s not in seen:
                    seen.add(s)
                    stack.append(s)
        for n in cfg.nodes:
            if n.id not in seen:
                err("node unreachable from entry", n)
    else:
        err("empty CFG")
    for name in cfg.uses:
        if pset.by_name(name) is None:
            err(f"driver uses unknown protocol {name}")
    for v in cfg.vars:
        if isinstance(v.type, tuple) and len(v.type) > 16:
            err(f"enum variable {v.name} has more than 16 literals")
        if v.type == BOOL and not isinstance(v.init, bool):
            err(f"bool variable {v.name} has a non-boolean initial value")
    return diags
