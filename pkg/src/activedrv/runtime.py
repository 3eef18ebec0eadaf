"""Cooperative-domain runtime with a simulated OS wrapper and protocol monitor.

Driver tasks run in a single-threaded event loop.  EMIT appends to a
mailbox queue and never blocks; AWAIT blocks until one of its mailboxes
holds a message and then dequeues the oldest head.  When every task is
blocked the OS wrapper takes a turn: it picks, with a seeded RNG, one
protocol-legal action and the loop continues.  A monitor steps the
protocol machines on every driver emit and receive.
"""

from __future__ import annotations

import random
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum

from .checker import (
    ProductState,
    ReplayError,
    Rule,
    Step,
    Trace,
    Verdict,
    _Protocols,
    await2_ok,
)
from .driver.ast import DriverProgram
from .driver.cfg import DriverCfg, NodeKind, assign, bind, branch, lower
from .protocol import REJECT, Direction, recv, send

DEFAULT_FAIRNESS_K = 8
DRIVER_TASK = "driver"


class Overflow(Exception):
    def __init__(self, mailbox: str):
        super().__init__(f"capacity-1 mailbox {mailbox} already holds a message")
        self.mailbox = mailbox


# -- the domain ----------------------------------------------------------------

@dataclass(frozen=True)
class _Waiting:
    awaited: tuple[str, ...]


class CooperativeDomain:
    """Deterministic scheduler for generator-based tasks.

    A task yields ``("tick",)``, ``("emit", mailbox, payload)`` or
    ``("await", mailboxes)``; an await resumes with ``(mailbox, payload)``.
    Only one task runs at a time, and it runs until it blocks or ends.
    """

    def __init__(self, priority=(), capacity1: bool = False):
        self.queues: dict[str, deque] = {}
        self.priority = frozenset(priority)
        self.capacity1 = capacity1
        self.seq = 0
        self.steps = 0
        self.tasks: dict = {}
        self.runnable: deque[str] = deque()
        self.blocked: dict[str, tuple[str, ...]] = {}
        self.finished: list[str] = []
        self._resume: dict = {}
        self.on_emit = None
        self.on_receive = None

    def spawn(self, name: str, gen) -> None:
        if name in self.tasks:
            raise ValueError(f"duplicate task {name}")
        self.tasks[name] = gen
        self._resume[name] = None
        self.runnable.append(name)

    def queue(self, mailbox: str) -> deque:
        return self.queues.setdefault(mailbox, deque())

    def post(self, mailbox: str, payload=None) -> int:
        q = self.queue(mailbox)
        if self.capacity1 and q:
            raise Overflow(mailbox)
        self.seq += 1
        item = (self.seq, payload)
        if mailbox in self.priority:
            q.appendleft(item)
        else:
            q.append(item)
        for name, awaited in list(self.blocked.items()):
            if mailbox in awaited:
                del self.blocked[name]
                self.runnable.append(name)
        return self.seq

    def retract(self, mailbox: str, seq: int) -> bool:
        q = self.queue(mailbox)
        for item in q:
            if item[0] == seq:
                q.remove(item)
                return True
        return False

    def select(self, awaited) -> str | None:
        """Mailbox to dequeue from: priority mailboxes first, then oldest head."""
        ready = [m for m in awaited if self.queues.get(m)]
        if not ready:
            return None
        return min(ready, key=lambda m: (m not in self.priority, self.queues[m][0][0], m))

    def ready(self, awaited) -> bool:
        return any(self.queues.get(m) for m in awaited)

    def run(self, max_steps: int | None = None, idle=None) -> str:
        """Run until every task has finished ("done"), all are blocked and
        ``idle`` is absent or reports no progress ("blocked"), or the step
        budget is spent ("budget")."""
        while True:
            if not self.runnable:
                if not self.blocked:
                    return "done"
                if idle is None or not idle():
                    return "blocked"
                continue
            name = self.runnable.popleft()
            if self._run_task(name, max_steps):
                return "budget"

    def _run_task(self, name: str, max_steps) -> bool:
        gen = self.tasks[name]
        value = self._resume[name]
        if isinstance(value, _Waiting):
            m = self.select(value.awaited)
            value = (m, self._take(name, m))
        while True:
            if max_steps is not None and self.steps >= max_steps:
                self._resume[name] = value
                self.runnable.appendleft(name)
                return True
            try:
                op = gen.send(value)
            except StopIteration:
                self.finished.append(name)
                return False
            self.steps += 1
            value = None
            if op[0] == "emit":
                if self.on_emit is not None:
                    self.on_emit(name, op[1])
                self.post(op[1], op[2] if len(op) > 2 else None)
            elif op[0] == "await":
                m = self.select(op[1])
                if m is None:
                    self.blocked[name] = tuple(op[1])
                    self._resume[name] = _Waiting(tuple(op[1]))
                    return False
                value = (m, self._take(name, m))

    def _take(self, name: str, mailbox: str):
        _, payload = self.queue(mailbox).popleft()
        if self.on_receive is not None:
            self.on_receive(name, mailbox)
        return payload


# -- simulation results --------------------------------------------------------

class SimStatus(Enum):
    OK = "OK"
    VIOLATION = "VIOLATION"
    INCONCLUSIVE = "INCONCLUSIVE"


@dataclass(frozen=True)
class MonitorVerdict:
    status: SimStatus
    rule: Rule | None = None   # None for OK, INCONCLUSIVE and queue overflow
    step: int | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        d = {"status": self.status.value}
        if self.rule is not None:
            d["rule"] = self.rule.value
        if self.step is not None:
            d["step"] = self.step
        if self.detail:
            d["detail"] = self.detail
        return d

    def __str__(self) -> str:
        text = self.status.value
        if self.rule is not None:
            text += f"({self.rule.value})"
        if self.step is not None:
            text += f" at step {self.step}"
        return text + (f": {self.detail}" if self.detail else "")


@dataclass
class SimulationResult:
    driver: str
    seed: int
    events: list
    log: list[str]
    verdict: MonitorVerdict
    trace: Trace
    steps: int
    dump: dict | None = None

    @property
    def violation(self) -> bool:
        return self.verdict.status is SimStatus.VIOLATION

    def checker_verdict(self) -> Verdict | None:
        """The violation in checker form, for independent replay."""
        from .checker import Status
        if not self.violation or self.verdict.rule is None:
            return None
        return Verdict(self.verdict.rule, Status.FAIL, self.trace, self.verdict.detail)

    def to_dict(self) -> dict:
        d = {"driver": self.driver, "seed": self.seed, "steps": self.steps,
             "events": len(self.events), "log": list(self.log),
             "verdict": self.verdict.to_dict()}
        if self.violation:
            d["trace"] = self.trace.to_dict()
        if self.dump is not None:
            d["final_state"] = self.dump
        return d

    def format_text(self) -> str:
        lines = [f"simulate {self.driver} seed={self.seed}"]
        lines += [f"  {line}" for line in self.log]
        lines.append(f"  result: {self.verdict}")
        if self.violation:
            lines.append(f"  trace: {self.trace}")
        if self.dump is not None:
            for k in sorted(self.dump):
                lines.append(f"  {k}: {self.dump[k]}")
        return "\n".join(lines) + "\n"


class _Halt(Exception):
    def __init__(self, verdict: MonitorVerdict | None = None):
        self.verdict = verdict


# -- driver + wrapper + monitor ------------------------------------------------

class _Simulation:
    def __init__(self, cfg: DriverCfg, protocols, seed: int, fairness_k: int,
                 capacity1: bool, priority, replay: Verdict | None, repeat: int):
        self.cfg = cfg
        self.protos = _Protocols(protocols)
        self.pstates = self.protos.initial()
        self.rng = random.Random(seed)
        self.k = fairness_k
        self.domain = CooperativeDomain(priority, capacity1)
        self.domain.on_emit = self._on_emit
        self.domain.on_receive = self._on_receive
        self.commit: dict[int, tuple] = {}  # protocol -> ("msg", mailbox, seq) | ("silence",)
        self.deferred: Counter = Counter()
        self.node = cfg.entry
        self.val = cfg.initial_valuation()
        self.steps: list[Step] = []
        self.configs: list[ProductState] = []
        self.events = []
        self.log: list[str] = []
        self.participants = {
            m: [i for i in owners if m not in self.protos.list[i].unconstrained]
            for m, owners in self.protos.owners.items()
        }
        self.out_mailboxes = sorted({mb.name for p in self.protos.list for mb in p.mailboxes
                                     if mb.direction is Direction.OUT})
        self.seed = seed
        self.replay = replay
        self.script = None
        self.expected: list[Step] = []
        self.stop_after = None
        if replay is not None:
            tr = replay.trace
            self.script = deque(tr.script(repeat if tr.is_lasso else 0))
            self.expected = list(tr.steps) + list(tr.cycle) * (repeat if tr.is_lasso else 0)
            if tr.is_lasso:
                self.stop_after = len(self.expected)
        self.repeat = repeat

    # driver task
    def task(self):
        cfg = self.cfg
        while True:
            n = cfg.nodes[self.node]
            k = n.kind
            if k is NodeKind.RETURN:
                return
            if k is NodeKind.ASSIGN:
                yield ("tick",)
                self._record(Step(n.id))
                self.val = assign(cfg, n, self.val)
                self.node = n.succs[0]
            elif k is NodeKind.BRANCH:
                yield ("tick",)
                if n.is_nondet:
                    c = self._choose()
                    self._record(Step(n.id, choice=c))
                else:
                    self._record(Step(n.id))
                    c = branch(cfg, n, self.val)
                self.node = n.succs[0 if c else 1]
            elif k is NodeKind.EMIT:
                yield ("emit", n.mailbox, None)
                self.node = n.succs[0]
            else:
                m, _ = yield ("await", n.awaited)
                self.val = bind(cfg, n.var, self.val, m)
                self.node = n.succs[0]

    def _record(self, s: Step):
        j = len(self.steps)
        if j < len(self.expected):
            want = self.expected[j]
            if want.node != s.node or (want.event is not None and want.event != s.event):
                raise ReplayError(f"replay diverges at step {j}: expected {want}, got {s}")
        self.configs.append(ProductState(self.node, self.val, self.pstates))
        if self.stop_after is not None and j >= self.stop_after:
            raise _Halt()
        self.steps.append(s)

    def _choose(self) -> bool:
        if self.script:
            v = self.script.popleft()
            if not isinstance(v, bool):
                raise ReplayError(f"replay expects a delivery of {v}, driver makes a choice")
            return v
        return self.rng.random() < 0.5

    def _line(self, task: str, ev) -> str:
        return f"{len(self.steps) - 1} {task} {ev.direction.value} {ev.mailbox} [{','.join(self.pstates)}]"

    # monitor hooks
    def _on_emit(self, task: str, m: str):
        ev = send(m)
        self._record(Step(self.node, ev))
        nxt, refused = self.protos.fire(self.pstates, ev)
        self.events.append(ev)
        if nxt is REJECT:
            self.log.append(self._line(task, ev) + " rejected")
            names = ", ".join(self.protos.list[i].name for i in refused) or "no protocol"
            raise _Halt(MonitorVerdict(SimStatus.VIOLATION, Rule.EMIT, len(self.steps),
                                       f"{ev} not allowed by {names}"))
        self.pstates = nxt
        self.log.append(self._line(task, ev))
        for i in self.protos.owners.get(m, ()):
            c = self.commit.get(i)
            if c is None:
                continue
            if c[0] == "silence":
                del self.commit[i]
            elif self.protos.fire(self.pstates, recv(c[1]))[0] is REJECT:
                self.domain.retract(c[1], c[2])
                for j in self.participants[c[1]]:
                    self.commit.pop(j, None)

    def _on_receive(self, task: str, m: str):
        ev = recv(m)
        self._record(Step(self.node, ev))
        nxt, _ = self.protos.fire(self.pstates, ev)
        if nxt is REJECT:
            raise RuntimeError(f"wrapper delivered {ev}, which the protocol does not allow")
        self.pstates = nxt
        self.events.append(ev)
        self.log.append(self._line(task, ev))
        for i in self.participants.get(m, ()):
            c = self.commit.get(i)
            if c is not None and c[0] == "msg" and c[1] == m:
                del self.commit[i]

    # wrapper
    def candidates(self) -> list[tuple]:
        out = []
        for m in self.protos.in_mailboxes():
            if any(i in self.commit for i in self.participants[m]):
                continue
            if self.protos.fire(self.pstates, recv(m))[0] is not REJECT:
                out.append(("msg", m))
        for i, p in enumerate(self.protos.list):
            if i in self.commit or self.pstates[i] in p.fair:
                continue
            if any(c[0] == "msg" and i in self.participants[c[1]] for c in out):
                out.append(("silence", i))
        return out

    def wrapper_turn(self) -> bool:
        for m in self.out_mailboxes:
            self.domain.queue(m).clear()  # the OS consumes driver output
        awaited = self.domain.blocked.get(DRIVER_TASK)
        if awaited is None:
            return False
        if self.script:
            v = self.script.popleft()
            if not isinstance(v, str) or v not in awaited:
                raise ReplayError(f"replay delivers {v!r} to await({', '.join(awaited)})")
            if self.protos.fire(self.pstates, recv(v))[0] is REJECT:
                raise ReplayError(f"replay delivers ?{v}, which the protocol does not allow")
            self.domain.post(v)
            return True
        cands = self.candidates()
        if not cands:
            node = self.cfg.nodes[self.node]
            if await2_ok(node, self.pstates, self.protos.list):
                raise _Halt(MonitorVerdict(
                    SimStatus.INCONCLUSIVE, None, len(self.steps),
                    "wrapper has no legal message although a fair protocol is fully awaited"))
            raise _Halt(MonitorVerdict(
                SimStatus.VIOLATION, Rule.AWAIT2, len(self.steps),
                f"deadlock at await({', '.join(awaited)}) node {self.node} "
                f"in state [{', '.join(self.pstates)}]"))
        if self.replay is not None:
            # counterexample exhausted: play adversarially
            pick = next((c for c in cands if c[0] == "silence" or c[1] not in awaited), cands[0])
        else:
            deliverable = [c[1] for c in cands if c[0] == "msg" and c[1] in awaited]
            forced = [m for m in deliverable if self.deferred[m] >= self.k]
            pick = ("msg", forced[0]) if forced else self.rng.choice(cands)
            for m in list(self.deferred):
                if m not in deliverable:
                    del self.deferred[m]
            for m in deliverable:
                if pick == ("msg", m):
                    self.deferred.pop(m, None)
                else:
                    self.deferred[m] += 1
        if pick[0] == "silence":
            self.commit[pick[1]] = ("silence",)
            return True
        m = pick[1]
        seq = self.domain.post(m)
        if m not in awaited:
            for i in self.participants[m]:
                self.commit[i] = ("msg", m, seq)
        return True

    def max_deferral(self) -> int:
        return max(self.deferred.values(), default=0)

    def dump(self) -> dict:
        return {
            "node": self.node,
            "valuation": {k: v for k, v in sorted(self.cfg.env(self.val).items())},
            "protocol_states": list(self.pstates),
            "queued": {m: len(q) for m, q in sorted(self.domain.queues.items()) if q},
            "commitments": {self.protos.list[i].name: list(c[:2]) if c[0] == "msg" else ["silence"]
                            for i, c in sorted(self.commit.items())},
        }

    def lasso_verdict(self) -> MonitorVerdict:
        tr = self.replay.trace
        s, c = len(tr.steps), len(tr.cycle)
        if len(self.configs) <= s + self.repeat * c:
            return MonitorVerdict(SimStatus.INCONCLUSIVE, None, len(self.steps),
                                  "driver did not complete the counterexample cycle")
        start = self.configs[s]
        if any(self.configs[s + r * c] != start for r in range(1, self.repeat + 1)):
            return MonitorVerdict(SimStatus.INCONCLUSIVE, None, len(self.steps),
                                  "cycle does not return to its starting configuration")
        loop = self.configs[s:s + c]
        rule = self.replay.rule
        if rule is Rule.TIMED:
            ok = any(p.timed and all(q.pstates[i] in p.timed for q in loop)
                     for i, p in enumerate(self.protos.list))
        else:
            ok = any(all(self.protos.fire(q.pstates, recv(m))[0] is not REJECT
                         and not (self.cfg.nodes[q.node].kind is NodeKind.AWAIT
                                  and m in self.cfg.nodes[q.node].awaited)
                         for q in loop)
                     for m in self.protos.in_mailboxes())
        if not ok:
            return MonitorVerdict(SimStatus.INCONCLUSIVE, None, len(self.steps),
                                  "cycle repeats but does not exhibit the violation")
        return MonitorVerdict(SimStatus.VIOLATION, rule, len(self.steps),
                              f"cycle of {c} steps repeated {self.repeat} times")

    def execute(self, max_steps: int) -> SimulationResult:
        self.domain.spawn(DRIVER_TASK, self.task())
        dump = None
        try:
            outcome = self.domain.run(max_steps, self.wrapper_turn)
            if outcome == "done":
                bad = [p.name for p, s in zip(self.protos.list, self.pstates) if s not in p.finals]
                if bad:
                    verdict = MonitorVerdict(
                        SimStatus.VIOLATION, Rule.TERMINATION, len(self.steps),
                        f"driver returned with {', '.join(bad)} not final")
                else:
                    verdict = MonitorVerdict(SimStatus.OK, None, len(self.steps))
            else:
                dump = self.dump()
                why = (f"step budget of {max_steps} exhausted" if outcome == "budget"
                       else "driver blocked with no wrapper action available")
                verdict = MonitorVerdict(SimStatus.INCONCLUSIVE, None, len(self.steps), why)
        except _Halt as h:
            verdict = h.verdict if h.verdict is not None else self.lasso_verdict()
            if verdict.status is SimStatus.INCONCLUSIVE:
                dump = self.dump()
        except Overflow as e:
            verdict = MonitorVerdict(SimStatus.VIOLATION, None, len(self.steps), str(e))
        trace = Trace(tuple(self.steps), self.node)
        if self.replay is not None and self.replay.trace.is_lasso:
            trace = self.replay.trace
        return SimulationResult(self.cfg.name, self.seed, self.events, self.log, verdict,
                                trace, self.domain.steps, dump)


def run(driver, protocols, seed: int = 0, max_steps: int = 10_000,
        fairness_k: int = DEFAULT_FAIRNESS_K, capacity1: bool = False, priority=(),
        replay: Verdict | None = None, repeat: int = 2) -> SimulationResult:
    """Simulate ``driver`` against an OS wrapper for ``protocols``.

    With ``replay`` the wrapper and the driver's choices follow the
    counterexample trace (lassos are unrolled ``repeat`` times); once a
    safety trace is used up the wrapper plays adversarially.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    if fairness_k < 1:
        raise ValueError("fairness bound must be at least 1")
    cfg = lower(driver) if isinstance(driver, DriverProgram) else driver
    sim = _Simulation(cfg, list(protocols), seed, fairness_k, capacity1, priority,
                      replay, max(repeat, 1))
    return sim.execute(max_steps)


# -- throughput microbenchmark -------------------------------------------------

@dataclass
class BenchResult:
    messages: int
    clients: int
    seconds: float
    per_client: list[int] = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.messages / max(self.seconds, 1e-9)


def throughput_bench(n_messages: int, n_clients: int = 1) -> BenchResult:
    """Request/reply round trips between ``n_clients`` clients and one server."""
    if n_messages < 1:
        raise ValueError("n_messages must be at least 1")
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    domain = CooperativeDomain()
    served = [0] * n_clients

    def server():
        for _ in range(n_messages):
            _, client = yield ("await", ("request",))
            served[client] += 1
            yield ("emit", f"reply{client}", None)

    def client(i):
        while True:
            yield ("emit", "request", i)
            yield ("await", (f"reply{i}",))

    domain.spawn("server", server())
    for i in range(n_clients):
        domain.spawn(f"client{i}", client(i))
    t0 = time.perf_counter()
    domain.run()
    return BenchResult(n_messages, n_clients, time.perf_counter() - t0, served)
