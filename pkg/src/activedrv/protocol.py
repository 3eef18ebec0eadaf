"""Driver-interface protocol state machines.

A protocol is a deterministic FSM whose transitions are labelled with
mailbox events: ``?m`` when the driver receives from mailbox ``m`` and
``!m`` when it sends to it.  States may additionally be marked initial,
final, fair (the OS is guaranteed to eventually deliver one of the
enabled incoming messages) and timed (the driver must eventually leave
by sending a response).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence

from .lexer import SyntaxError_, TokenStream, tokenize


class ProtocolError(SyntaxError_):
    pass


class Direction(Enum):
    IN = "?"   # OS -> driver
    OUT = "!"  # driver -> OS

    @property
    def keyword(self) -> str:
        return "in" if self is Direction.IN else "out"


@dataclass(frozen=True)
class Mailbox:
    name: str
    direction: Direction


@dataclass(frozen=True)
class Event:
    """One send or receive on a mailbox (messages carry no data here)."""

    direction: Direction
    mailbox: str

    def __str__(self) -> str:
        return f"{self.direction.value}{self.mailbox}"

    def sort_key(self) -> tuple[str, str]:
        return (self.mailbox, self.direction.value)

    @classmethod
    def parse(cls, text: str) -> "Event":
        text = text.strip()
        if len(text) < 2 or text[0] not in "?!":
            raise ValueError(f"not an event: {text!r}")
        return cls(Direction(text[0]), text[1:])


def recv(mailbox: str) -> Event:
    return Event(Direction.IN, mailbox)


def send(mailbox: str) -> Event:
    return Event(Direction.OUT, mailbox)


@dataclass(frozen=True)
class Transition:
    src: str
    event: Event
    dst: str


class _Reject:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "REJECT"

    def __reduce__(self):
        return (_Reject, ())


REJECT = _Reject()


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str
    state: str | None = None
    transition: Transition | None = None

    def __str__(self) -> str:
        where = ""
        if self.transition is not None:
            t = self.transition
            where = f" [{t.src} -> {t.dst} on {t.event}]"
        elif self.state is not None:
            where = f" [state {self.state}]"
        return f"{self.severity}: {self.message}{where}"


@dataclass(frozen=True)
class Protocol:
    """Immutable protocol FSM.

    ``unconstrained`` lists mailboxes that were added by completion of a
    subprotocol; they self-loop in every state and do not count towards
    the enabled sets used by the fairness rule.
    """

    name: str
    mailboxes: tuple[Mailbox, ...]
    states: tuple[str, ...]
    initial: str
    transitions: tuple[Transition, ...] = ()
    finals: frozenset[str] = frozenset()
    fair: frozenset[str] = frozenset()
    timed: frozenset[str] = frozenset()
    unconstrained: frozenset[str] = frozenset()
    _delta: dict = field(default=None, init=False, repr=False, compare=False, hash=False)
    _out: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        for attr in ("finals", "fair", "timed", "unconstrained"):
            object.__setattr__(self, attr, frozenset(getattr(self, attr)))
        object.__setattr__(self, "mailboxes", tuple(self.mailboxes))
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "transitions", tuple(self.transitions))

        names = [m.name for m in self.mailboxes]
        if len(set(names)) != len(names):
            raise ProtocolError(f"{self.name}: duplicate mailbox")
        if len(set(self.states)) != len(self.states):
            raise ProtocolError(f"{self.name}: duplicate state")
        known = set(self.states)
        if self.initial not in known:
            raise ProtocolError(f"{self.name}: unknown initial state {self.initial}")
        for attr in ("finals", "fair", "timed"):
            bad = getattr(self, attr) - known
            if bad:
                raise ProtocolError(f"{self.name}: unknown {attr} state {sorted(bad)[0]}")
        directions = {m.name: m.direction for m in self.mailboxes}
        delta: dict[tuple[str, Event], str] = {}
        out: dict[str, list[Transition]] = {s: [] for s in self.states}
        for t in self.transitions:
            if t.src not in known or t.dst not in known:
                bad = t.src if t.src not in known else t.dst
                raise ProtocolError(f"{self.name}: unknown state {bad} in transition")
            if directions.get(t.event.mailbox) is not t.event.direction:
                raise ProtocolError(f"{self.name}: transition on undeclared label {t.event}")
            key = (t.src, t.event)
            if key in delta:
                raise ProtocolError(
                    f"{self.name}: nondeterministic transitions from {t.src} on {t.event}"
                )
            delta[key] = t.dst
            out[t.src].append(t)
        object.__setattr__(self, "_delta", delta)
        object.__setattr__(self, "_out", out)

    # -- queries ---------------------------------------------------------

    def mailbox(self, name: str) -> Mailbox | None:
        for m in self.mailboxes:
            if m.name == name:
                return m
        return None

    @property
    def mailbox_names(self) -> frozenset[str]:
        return frozenset(m.name for m in self.mailboxes)

    @property
    def alphabet(self) -> list[Event]:
        return sorted((Event(m.direction, m.name) for m in self.mailboxes), key=Event.sort_key)

    def outgoing(self, state: str) -> list[Transition]:
        return self._out[state]

    def step(self, state: str, event: Event):
        return step(self, state, event)

    def enabled(self, state: str, direction: Direction) -> frozenset[str]:
        return enabled(self, state, direction)

    def accepts(self, word: Iterable[Event]) -> bool:
        s = self.initial
        for e in word:
            s = step(self, s, e)
            if s is REJECT:
                return False
        return s in self.finals


def step(p: Protocol, state: str, event: Event):
    """Successor of ``state`` on ``event``, or ``REJECT``."""
    if state not in p._out:
        raise KeyError(f"unknown state {state!r} in protocol {p.name}")
    return p._delta.get((state, event), REJECT)


def enabled(p: Protocol, state: str, direction: Direction) -> frozenset[str]:
    if state not in p._out:
        raise KeyError(f"unknown state {state!r} in protocol {p.name}")
    return frozenset(t.event.mailbox for t in p._out[state] if t.event.direction is direction)


def fair_enabled(p: Protocol, state: str) -> frozenset[str]:
    """Incoming mailboxes the fairness rule requires an AWAIT to cover."""
    return enabled(p, state, Direction.IN) - p.unconstrained


def reachable_states(p: Protocol) -> set[str]:
    seen = {p.initial}
    todo = deque([p.initial])
    while todo:
        s = todo.popleft()
        for t in p.outgoing(s):
            if t.dst not in seen:
                seen.add(t.dst)
                todo.append(t.dst)
    return seen


def validate(p: Protocol) -> list[Diagnostic]:
    diags = []
    seen = {}
    for t in p.transitions:
        key = (t.src, t.event)
        if key in seen:
            diags.append(Diagnostic("error", "nondeterministic transition", t.src, t))
        seen[key] = t
    for s in p.states:
        if s in p.fair and not enabled(p, s, Direction.IN):
            diags.append(Diagnostic("error", "fair state has no incoming message enabled", s))
    reach = reachable_states(p)
    for s in p.states:
        if s not in reach:
            diags.append(Diagnostic("warning", "state unreachable from initial state", s))
    return diags


# -- concrete syntax ---------------------------------------------------------

def parse_protocol(text: str) -> Protocol:
    ts = TokenStream(tokenize(text, ProtocolError), ProtocolError)
    ts.expect("protocol")
    name = ts.ident("protocol name").text
    ts.expect("{")
    mailboxes: list[Mailbox] = []
    states: list[str] = []
    finals, fair, timed = set(), set(), set()
    initial = None
    pending: list[tuple[str, Event, str, object]] = []
    while not ts.at("}"):
        tok = ts.peek()
        if tok.kind == "eof":
            ts.fail("expected '}'")
        if ts.accept("mailbox"):
            d = ts.ident("'in' or 'out'")
            if d.text not in ("in", "out"):
                ts.fail("expected 'in' or 'out'", d)
            mtok = ts.ident("mailbox name")
            if any(m.name == mtok.text for m in mailboxes):
                ts.fail(f"duplicate mailbox {mtok.text}", mtok)
            mailboxes.append(Mailbox(mtok.text, Direction.IN if d.text == "in" else Direction.OUT))
            ts.expect(";")
        elif ts.accept("state"):
            stok = ts.ident("state name")
            if stok.text in states:
                ts.fail(f"duplicate state {stok.text}", stok)
            states.append(stok.text)
            while not ts.at(";"):
                flag = ts.ident("state attribute")
                if flag.text == "initial":
                    if initial is not None:
                        ts.fail("more than one initial state", flag)
                    initial = stok.text
                elif flag.text == "final":
                    finals.add(stok.text)
                elif flag.text == "fair":
                    fair.add(stok.text)
                elif flag.text == "timed":
                    timed.add(stok.text)
                else:
                    ts.fail(f"unknown state attribute {flag.text!r}", flag)
            ts.expect(";")
        else:
            src = ts.ident("'mailbox', 'state' or transition")
            ts.expect("->")
            dst = ts.ident("target state")
            ts.expect("on")
            dtok = ts.next()
            if dtok.text not in ("?", "!"):
                ts.fail("expected '?' or '!'", dtok)
            mtok = ts.ident("mailbox name")
            ts.expect(";")
            pending.append((src.text, Event(Direction(dtok.text), mtok.text), dst.text, src))
    ts.expect("}")
    if ts.peek().kind != "eof":
        ts.fail("trailing input after protocol")
    if initial is None:
        ts.fail("protocol has no initial state")

    directions = {m.name: m.direction for m in mailboxes}
    transitions = []
    seen = set()
    for src, ev, dst, tok in pending:
        for s in (src, dst):
            if s not in states:
                raise ProtocolError(f"unknown state {s}", tok.line, tok.col)
        if ev.mailbox not in directions:
            raise ProtocolError(f"unknown mailbox {ev.mailbox}", tok.line, tok.col)
        if directions[ev.mailbox] is not ev.direction:
            raise ProtocolError(
                f"mailbox {ev.mailbox} is declared {directions[ev.mailbox].keyword}",
                tok.line, tok.col,
            )
        if (src, ev) in seen:
            raise ProtocolError(
                f"nondeterministic transitions from {src} on {ev}", tok.line, tok.col
            )
        seen.add((src, ev))
        transitions.append(Transition(src, ev, dst))
    return Protocol(name, tuple(mailboxes), tuple(states), initial, tuple(transitions),
                    frozenset(finals), frozenset(fair), frozenset(timed))


def format_protocol(p: Protocol) -> str:
    lines = [f"protocol {p.name} {{"]
    for m in p.mailboxes:
        lines.append(f"  mailbox {m.direction.keyword} {m.name};")
    for s in p.states:
        attrs = [a for a, on in (("initial", s == p.initial), ("final", s in p.finals),
                                 ("fair", s in p.fair), ("timed", s in p.timed)) if on]
        lines.append("  state " + " ".join([s, *attrs]) + ";")
    for t in p.transitions:
        lines.append(f"  {t.src} -> {t.dst} on {t.event};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def load_protocol(path) -> Protocol:
    with open(path, encoding="utf-8") as fh:
        return parse_protocol(fh.read())


class ProtocolSet(Sequence[Protocol]):
    """The protocols implemented by one driver; mailbox names are disjoint."""

    def __init__(self, protocols: Iterable[Protocol] = ()):
        self.protocols: tuple[Protocol, ...] = tuple(protocols)
        self._owner: dict[str, int] = {}
        names = set()
        for i, p in enumerate(self.protocols):
            if p.name in names:
                raise ProtocolError(f"protocol {p.name} listed twice")
            names.add(p.name)
            for m in p.mailboxes:
                if m.name in self._owner:
                    raise ProtocolError(f"mailbox {m.name} declared by more than one protocol")
                self._owner[m.name] = i

    def __getitem__(self, i):
        return self.protocols[i]

    def __len__(self) -> int:
        return len(self.protocols)

    def __iter__(self) -> Iterator[Protocol]:
        return iter(self.protocols)

    def owner(self, mailbox: str) -> int | None:
        return self._owner.get(mailbox)

    def by_name(self, name: str) -> Protocol | None:
        for p in self.protocols:
            if p.name == name:
                return p
        return None

    def mailbox(self, name: str) -> Mailbox | None:
        i = self._owner.get(name)
        return None if i is None else self.protocols[i].mailbox(name)
