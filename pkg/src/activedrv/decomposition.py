"""Protocol decomposition into subprotocols and its correctness check.

A decomposition is correct when (1) the parent accepts exactly the
strings accepted by every completed part, and (2) the parent's fair
states correspond one-to-one with the parts' fair states, matched by
their sets of enabled incoming messages.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .protocol import (
    Direction,
    Event,
    Mailbox,
    Protocol,
    ProtocolError,
    REJECT,
    Transition,
    enabled,
    load_protocol,
    step,
    validate,
)

DEFAULT_STATE_BUDGET = 10**6


class DecompositionError(Exception):
    pass


class BudgetExceeded(DecompositionError):
    def __init__(self, budget: int, explored: int):
        self.budget = budget
        self.explored = explored
        super().__init__(f"product state budget {budget} exceeded after {explored} states")


@dataclass(frozen=True)
class Decomposition:
    parent: Protocol
    parts: tuple[Protocol, ...]

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        alphabet = {m.name: m.direction for m in self.parent.mailboxes}
        for part in self.parts:
            for m in part.mailboxes:
                if m.name not in alphabet:
                    raise DecompositionError(
                        f"part {part.name}: mailbox {m.name} not in parent {self.parent.name}"
                    )
                if alphabet[m.name] is not m.direction:
                    raise DecompositionError(
                        f"part {part.name}: mailbox {m.name} direction conflicts with parent"
                    )
            errors = [d for d in validate(part) if d.severity == "error"]
            if errors:
                raise DecompositionError(f"part {part.name}: {errors[0]}")

    def completed_parts(self) -> list[Protocol]:
        return [completion(p, self.parent.mailboxes) for p in self.parts]


def participating(part: Protocol) -> frozenset[str]:
    """Mailboxes the part actually constrains (those on some transition)."""
    return frozenset(t.event.mailbox for t in part.transitions)


def completion(part: Protocol, alphabet: Sequence[Mailbox]) -> Protocol:
    """Extend ``part`` to ``alphabet`` by self-looping every absent label."""
    directions = {m.name: m.direction for m in alphabet}
    for m in part.mailboxes:
        if m.name not in directions:
            raise DecompositionError(f"part {part.name}: mailbox {m.name} outside the alphabet")
        if directions[m.name] is not m.direction:
            raise DecompositionError(
                f"part {part.name}: mailbox {m.name} declared {m.direction.keyword}, "
                f"alphabet has {directions[m.name].keyword}"
            )
    used = participating(part) - part.unconstrained
    absent = [m for m in alphabet if m.name not in used]
    loops = [
        Transition(s, Event(m.direction, m.name), s)
        for s in part.states
        for m in absent
    ]
    kept = [t for t in part.transitions if t.event.mailbox in used]
    return Protocol(
        part.name,
        tuple(alphabet),
        part.states,
        part.initial,
        tuple(kept) + tuple(loops),
        part.finals,
        part.fair,
        part.timed,
        frozenset(m.name for m in absent),
    )


# -- condition 1: language equivalence ----------------------------------------

@dataclass(frozen=True)
class EquivResult:
    equivalent: bool
    witness: tuple[Event, ...] | None = None
    parent_accepts: bool | None = None
    explored: int = 0

    def __str__(self) -> str:
        if self.equivalent:
            return "EQUIV"
        return "DIFFER on " + (" ".join(map(str, self.witness)) or "<empty string>")


def _product_step(parts: Sequence[Protocol], states, event):
    if states is None:
        return None
    nxt = []
    for p, s in zip(parts, states):
        t = step(p, s, event)
        if t is REJECT:
            return None
        nxt.append(t)
    return tuple(nxt)


def check_language_equiv(d: Decomposition, budget: int = DEFAULT_STATE_BUDGET) -> EquivResult:
    """Compare the parent with the synchronous product of completed parts.

    Two strings are told apart when one side has rejected (no transition)
    while the other is still alive, or when both are alive and only one
    accepts.  The reported witness is the shortest such string, ties
    broken lexicographically on (mailbox, direction).
    """
    parts = d.completed_parts()
    alphabet = d.parent.alphabet

    def verdict(ps, qs):
        alive_p, alive_q = ps is not None, qs is not None
        if alive_p != alive_q:
            return False, alive_p
        if not alive_p:
            return True, None
        acc_p = ps in d.parent.finals
        acc_q = all(s in p.finals for p, s in zip(parts, qs))
        return acc_p == acc_q, acc_p

    start = (d.parent.initial, tuple(p.initial for p in parts))
    ok, acc = verdict(*start)
    if not ok:
        return EquivResult(False, (), acc, 1)
    seen = {start: None}
    queue = deque([start])
    while queue:
        pair = queue.popleft()
        ps, qs = pair
        if ps is None and qs is None:
            continue
        for ev in alphabet:
            np = None if ps is None else step(d.parent, ps, ev)
            np = None if np is REJECT else np
            nxt = (np, _product_step(parts, qs, ev))
            if nxt in seen:
                continue
            seen[nxt] = (pair, ev)
            if len(seen) > budget:
                raise BudgetExceeded(budget, len(seen))
            ok, acc = verdict(*nxt)
            if not ok:
                word = []
                cur = nxt
                while seen[cur] is not None:
                    cur, e = seen[cur]
                    word.append(e)
                return EquivResult(False, tuple(reversed(word)), acc, len(seen))
            queue.append(nxt)
    return EquivResult(True, None, None, len(seen))


# -- condition 2: fair-state bijection ----------------------------------------

@dataclass(frozen=True)
class BijectionResult:
    ok: bool
    mapping: tuple[tuple[str, str, str], ...] = ()  # (parent state, part name, part state)
    witness: str | None = None  # unmatched state, "part:state" for part states
    warnings: tuple[str, ...] = ()

    def __str__(self) -> str:
        return "OK" if self.ok else f"MISMATCH at {self.witness}"


def check_fair_bijection(d: Decomposition) -> BijectionResult:
    candidates = []
    for part in d.parts:
        for s in part.states:
            if s in part.fair:
                candidates.append((part.name, s, enabled(part, s, Direction.IN)))
    used = [False] * len(candidates)
    mapping = []
    warnings = []
    for s in d.parent.states:
        if s not in d.parent.fair:
            continue
        want = enabled(d.parent, s, Direction.IN)
        matches = [i for i, c in enumerate(candidates) if not used[i] and c[2] == want]
        if not matches:
            return BijectionResult(False, tuple(mapping), s, tuple(warnings))
        if len(matches) > 1:
            names = ", ".join(f"{candidates[i][0]}:{candidates[i][1]}" for i in matches)
            warnings.append(f"{s}: ambiguous partners {names}; chose the first")
        i = matches[0]
        used[i] = True
        mapping.append((s, candidates[i][0], candidates[i][1]))
    for i, c in enumerate(candidates):
        if not used[i]:
            return BijectionResult(False, tuple(mapping), f"{c[0]}:{c[1]}", tuple(warnings))
    return BijectionResult(True, tuple(mapping), None, tuple(warnings))


# -- combined report -----------------------------------------------------------

@dataclass
class DecompositionReport:
    parent: str
    language: EquivResult
    fair: BijectionResult
    part_stats: list[tuple[str, int, int]] = field(default_factory=list)
    parent_stats: tuple[int, int] = (0, 0)

    @property
    def ok(self) -> bool:
        return self.language.equivalent and self.fair.ok

    @property
    def parts(self) -> int:
        return len(self.part_stats)

    def to_dict(self) -> dict:
        return {
            "parent": {"name": self.parent, "states": self.parent_stats[0],
                       "transitions": self.parent_stats[1]},
            "language": {
                "status": "EQUIV" if self.language.equivalent else "DIFFER",
                "witness": None if self.language.witness is None
                else [str(e) for e in self.language.witness],
                "explored": self.language.explored,
            },
            "fair": {
                "status": "OK" if self.fair.ok else "MISMATCH",
                "witness": self.fair.witness,
                "mapping": [list(m) for m in self.fair.mapping],
                "warnings": list(self.fair.warnings),
            },
            "parts": [{"name": n, "states": s, "transitions": t} for n, s, t in self.part_stats],
        }

    def format_text(self) -> str:
        lines = [
            f"decomposition of {self.parent} into {self.parts} part(s)",
            f"  language equivalence: {self.language}",
            f"  fair-state bijection: {self.fair}",
        ]
        lines += [f"  warning: {w}" for w in self.fair.warnings]
        for name, s, t in self.part_stats:
            lines.append(f"  part {name}: {s} states, {t} transitions")
        return "\n".join(lines) + "\n"


def check_decomposition(d: Decomposition, budget: int = DEFAULT_STATE_BUDGET) -> DecompositionReport:
    return DecompositionReport(
        d.parent.name,
        check_language_equiv(d, budget),
        check_fair_bijection(d),
        [(p.name, len(p.states), len(p.transitions)) for p in d.parts],
        (len(d.parent.states), len(d.parent.transitions)),
    )


def substitute_parts(protocols: Sequence[Protocol], d: Decomposition) -> list[Protocol]:
    """Replace the decomposed parent in a driver's protocol list by its completed parts."""
    out = []
    found = False
    for p in protocols:
        if p.name == d.parent.name:
            out.extend(d.completed_parts())
            found = True
        else:
            out.append(p)
    if not found:
        raise DecompositionError(f"protocol {d.parent.name} is not used by the driver")
    return out


# -- manifest ------------------------------------------------------------------

def parse_manifest(text: str) -> tuple[str, list[str]]:
    parent = None
    parts = []
    body = "\n".join(line.split("#", 1)[0] for line in text.splitlines())
    for n, entry in enumerate(body.split(";"), 1):
        entry = entry.strip()
        if not entry:
            continue
        key, _, path = entry.partition(" ")
        path = path.strip()
        if not path:
            raise DecompositionError(f"manifest entry {n}: missing file name")
        if key == "parent":
            if parent is not None:
                raise DecompositionError("manifest names more than one parent")
            parent = path
        elif key == "part":
            parts.append(path)
        else:
            raise DecompositionError(f"manifest entry {n}: unknown keyword {key!r}")
    if parent is None:
        raise DecompositionError("manifest has no parent")
    return parent, parts


def load_decomposition(path) -> Decomposition:
    with open(path, encoding="utf-8") as fh:
        parent, parts = parse_manifest(fh.read())
    base = os.path.dirname(os.path.abspath(path))
    try:
        return Decomposition(
            load_protocol(os.path.join(base, parent)),
            tuple(load_protocol(os.path.join(base, p)) for p in parts),
        )
    except ProtocolError as exc:
        raise DecompositionError(str(exc)) from exc
