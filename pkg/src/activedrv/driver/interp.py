"""Direct execution of driver programs under a scripted environment.

Both runners consume the same resolution script: each AWAIT takes the
next entry as the mailbox that delivers, each ``choose`` takes the next
entry as the chosen boolean.  Integer entries are also accepted: an
AWAIT reads one as an index into its awaited mailboxes, a ``choose`` by
parity.  They stop when the script runs out, when
the driver returns, or when a step/event bound is hit.  The AST runner
is the semantic reference for lowering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..protocol import Event, recv, send
from .ast import (
    Assign,
    Await,
    Break,
    Call,
    Choose,
    DriverProgram,
    Emit,
    If,
    Loop,
    Return,
    Skip,
    While,
    evaluate,
)
from .cfg import DriverCfg, NodeKind, assign, bind, branch


class _Stop(Exception):
    pass


class _Break(Exception):
    pass


class _Return(Exception):
    pass


@dataclass
class Run:
    events: list[Event] = field(default_factory=list)
    returned: bool = False
    exhausted: bool = False  # script ran out
    truncated: bool = False  # step or event bound hit


def _mailbox(v, awaited) -> str:
    if isinstance(v, int) and not isinstance(v, bool):
        return awaited[v % len(awaited)]
    if v not in awaited:
        raise ValueError(f"script delivers {v} to await on {tuple(awaited)}")
    return v


def _boolean(v) -> bool:
    if isinstance(v, int) and not isinstance(v, bool):
        return v % 2 == 1
    return bool(v)


class _Script:
    def __init__(self, script, run: Run, max_steps: int, max_events: int):
        self.script = list(script)
        self.pos = 0
        self.run = run
        self.steps = 0
        self.max_steps = max_steps
        self.max_events = max_events

    def tick(self):
        self.steps += 1
        if self.steps > self.max_steps:
            self.run.truncated = True
            raise _Stop

    def take(self):
        if self.pos >= len(self.script):
            self.run.exhausted = True
            raise _Stop
        v = self.script[self.pos]
        self.pos += 1
        return v

    def event(self, e: Event):
        self.run.events.append(e)
        if len(self.run.events) >= self.max_events:
            self.run.truncated = True
            raise _Stop


def run_program(program: DriverProgram, script, max_steps: int = 10_000,
                max_events: int = 200) -> Run:
    run = Run()
    ctl = _Script(script, run, max_steps, max_events)
    env = {v.name: v.init for v in program.vars}

    def block(stmts):
        for s in stmts:
            ctl.tick()
            stmt(s)

    def stmt(s):
        if isinstance(s, Assign):
            env[s.var] = evaluate(s.value, env)
        elif isinstance(s, Skip):
            pass
        elif isinstance(s, Emit):
            ctl.event(send(s.mailbox))
        elif isinstance(s, Await):
            m = _mailbox(ctl.take(), s.mailboxes)
            ctl.event(recv(m))
            env[s.var] = m
        elif isinstance(s, Choose):
            env[s.var] = _boolean(ctl.take())
        elif isinstance(s, If):
            block(s.then if evaluate(s.cond, env) else s.orelse)
        elif isinstance(s, While):
            try:
                while evaluate(s.cond, env):
                    block(s.body)
                    ctl.tick()
            except _Break:
                pass
        elif isinstance(s, Loop):
            try:
                while True:
                    block(s.body)
                    ctl.tick()
            except _Break:
                pass
        elif isinstance(s, Break):
            raise _Break
        elif isinstance(s, Return):
            raise _Return
        elif isinstance(s, Call):
            try:
                block(program.functions[s.func])
            except _Return:
                pass
        else:
            raise TypeError(f"unknown statement {s!r}")

    try:
        block(program.main)
        run.returned = True
    except _Return:
        run.returned = True
    except _Stop:
        pass
    return run


def run_cfg(cfg: DriverCfg, script, max_steps: int = 10_000, max_events: int = 200) -> Run:
    run = Run()
    ctl = _Script(script, run, max_steps, max_events)
    node = cfg.nodes[cfg.entry]
    val = cfg.initial_valuation()
    try:
        while True:
            ctl.tick()
            k = node.kind
            if k is NodeKind.RETURN:
                run.returned = True
                break
            if k is NodeKind.ASSIGN:
                val = assign(cfg, node, val)
                nxt = node.succs[0]
            elif k is NodeKind.EMIT:
                ctl.event(send(node.mailbox))
                nxt = node.succs[0]
            elif k is NodeKind.AWAIT:
                m = _mailbox(ctl.take(), node.awaited)
                ctl.event(recv(m))
                val = bind(cfg, node.var, val, m)
                nxt = node.succs[0]
            elif node.is_nondet:
                nxt = node.succs[0 if _boolean(ctl.take()) else 1]
            else:
                nxt = node.succs[0 if branch(cfg, node, val) else 1]
            node = cfg.nodes[nxt]
    except _Stop:
        pass
    return run
