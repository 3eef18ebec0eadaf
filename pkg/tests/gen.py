"""Random protocols and driver programs for differential tests."""

import random

from activedrv.driver import lower, parse_driver
from activedrv.protocol import Direction, Event, Mailbox, Protocol, Transition


def random_protocol(rng: random.Random, name: str = "p", max_states: int = 6,
                    prefix: str = "") -> Protocol:
    ins = [f"{prefix}r{k}" for k in range(rng.randint(1, 3))]
    outs = [f"{prefix}a{k}" for k in range(rng.randint(1, 2))]
    mailboxes = tuple([Mailbox(m, Direction.IN) for m in ins]
                      + [Mailbox(m, Direction.OUT) for m in outs])
    states = tuple(f"S{k}" for k in range(rng.randint(1, max_states)))
    transitions = []
    for s in states:
        for m in mailboxes:
            if rng.random() < 0.35:
                transitions.append(Transition(s, Event(m.direction, m.name), rng.choice(states)))
    has_in = {t.src for t in transitions if t.event.direction is Direction.IN}
    finals = frozenset(s for s in states if rng.random() < 0.4)
    fair = frozenset(s for s in states if s in has_in and rng.random() < 0.6)
    timed = frozenset(s for s in states if rng.random() < 0.3)
    return Protocol(name, mailboxes, states, states[0], tuple(transitions), finals, fair, timed)


class _Writer:
    def __init__(self, rng, ins, outs, depth):
        self.rng = rng
        self.ins = ins
        self.outs = outs
        self.depth = depth

    def cond(self):
        r = self.rng.random()
        if r < 0.4 and self.ins:
            op = self.rng.choice(["==", "!="])
            return f"mb {op} {self.rng.choice(self.ins)}"
        if r < 0.7:
            return self.rng.choice(["b", "!b", "c", "b && !c", "b || c"])
        return self.rng.choice(["true", "false"])

    def block(self, depth, in_loop, n=None):
        n = self.rng.randint(1, 3) if n is None else n
        return "".join(self.stmt(depth, in_loop) for _ in range(n))

    def stmt(self, depth, in_loop):
        rng = self.rng
        kinds = ["emit", "await", "await", "assign", "choose", "skip"]
        if depth < self.depth:
            kinds += ["if", "if", "while", "loop"]
        if in_loop:
            kinds += ["break"]
        kinds += ["return"] if rng.random() < 0.3 else []
        k = rng.choice(kinds)
        if k == "emit" and self.outs:
            return f"emit({rng.choice(self.outs)});\n"
        if k == "await" and self.ins:
            boxes = rng.sample(self.ins, rng.randint(1, len(self.ins)))
            return f"mb = await({', '.join(boxes)});\n"
        if k == "assign":
            return f"{rng.choice(['b', 'c'])} = {self.cond()};\n"
        if k == "choose":
            return f"choose {rng.choice(['b', 'c'])};\n"
        if k == "if":
            text = f"if ({self.cond()}) {{\n{self.block(depth + 1, in_loop)}}}"
            if rng.random() < 0.6:
                text += f" else {{\n{self.block(depth + 1, in_loop)}}}"
            return text + "\n"
        if k == "while":
            return f"while ({self.cond()}) {{\n{self.block(depth + 1, True)}}}\n"
        if k == "loop":
            return (f"loop {{\n{self.block(depth + 1, True)}"
                    f"if ({self.cond()}) {{ break; }}\n}}\n")
        if k == "break":
            return "break;\n"
        if k == "return":
            return "return;\n"
        return "skip;\n"


def random_driver_text(rng: random.Random, protocols, name: str = "rnd",
                       depth: int = 2) -> str:
    ins = sorted(m.name for p in protocols for m in p.mailboxes if m.direction is Direction.IN)
    outs = sorted(m.name for p in protocols for m in p.mailboxes if m.direction is Direction.OUT)
    w = _Writer(rng, ins, outs, depth)
    body = w.block(0, False, rng.randint(2, 5))
    uses = ", ".join(p.name for p in protocols)
    header = f"driver {name} uses {uses}" if uses else f"driver {name}"
    return (f"{header} {{\n  var mb : mailbox;\n  var b : bool = false;\n"
            f"  var c : bool = true;\n  main {{\n{body}  }}\n}}\n")


def random_instance(rng: random.Random, max_nodes: int = 30, max_states: int = 6,
                    n_protocols=None):
    """A (cfg, protocols, text) triple with at most ``max_nodes`` CFG nodes."""
    while True:
        k = rng.choice([1, 1, 2]) if n_protocols is None else n_protocols
        protocols = [random_protocol(rng, f"p{i}", max_states, prefix=f"p{i}") for i in range(k)]
        text = random_driver_text(rng, protocols)
        cfg = lower(parse_driver(text, protocols))
        if len(cfg.nodes) <= max_nodes:
            return cfg, protocols, text
