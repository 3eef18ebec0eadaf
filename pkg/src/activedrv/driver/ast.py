"""Syntax tree of the driver modelling language."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union


# -- expressions ---------------------------------------------------------------

@dataclass(frozen=True)
class BoolLit:
    value: bool

    def __str__(self):
        return "true" if self.value else "false"


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Lit:
    """Enum literal or mailbox name."""

    value: str

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Not:
    arg: "Expr"

    def __str__(self):
        return f"!{_paren(self.arg)}"


@dataclass(frozen=True)
class And:
    left: "Expr"
    right: "Expr"

    def __str__(self):
        return f"{_paren(self.left)} && {_paren(self.right)}"


@dataclass(frozen=True)
class Or:
    left: "Expr"
    right: "Expr"

    def __str__(self):
        return f"{_paren(self.left)} || {_paren(self.right)}"


@dataclass(frozen=True)
class Eq:
    left: "Expr"
    right: "Expr"
    negated: bool = False

    def __str__(self):
        op = "!=" if self.negated else "=="
        return f"{self.left} {op} {self.right}"


@dataclass(frozen=True)
class Nondet:
    """Condition of the branch that ``choose`` lowers to."""

    def __str__(self):
        return "*"


NONDET = Nondet()

Expr = Union[BoolLit, Var, Lit, Not, And, Or, Eq, Nondet]


def _paren(e) -> str:
    return f"({e})" if isinstance(e, (And, Or, Eq)) else str(e)


def free_vars(e) -> frozenset[str]:
    if isinstance(e, Var):
        return frozenset([e.name])
    if isinstance(e, Not):
        return free_vars(e.arg)
    if isinstance(e, (And, Or, Eq)):
        return free_vars(e.left) | free_vars(e.right)
    return frozenset()


def evaluate(e, env) -> object:
    """Evaluate ``e`` against a name -> value mapping."""
    if isinstance(e, BoolLit):
        return e.value
    if isinstance(e, Var):
        return env[e.name]
    if isinstance(e, Lit):
        return e.value
    if isinstance(e, Not):
        return not evaluate(e.arg, env)
    if isinstance(e, And):
        return evaluate(e.left, env) and evaluate(e.right, env)
    if isinstance(e, Or):
        return evaluate(e.left, env) or evaluate(e.right, env)
    if isinstance(e, Eq):
        return (evaluate(e.left, env) == evaluate(e.right, env)) != e.negated
    raise TypeError(f"cannot evaluate {e!r}")


# -- statements ----------------------------------------------------------------

@dataclass(frozen=True)
class Assign:
    var: str
    value: Expr
    line: int = 0


@dataclass(frozen=True)
class Skip:
    line: int = 0


@dataclass(frozen=True)
class Emit:
    mailbox: str
    line: int = 0


@dataclass(frozen=True)
class Await:
    var: str
    mailboxes: tuple[str, ...]
    line: int = 0


@dataclass(frozen=True)
class If:
    cond: Expr
    then: tuple
    orelse: tuple = ()
    line: int = 0


@dataclass(frozen=True)
class While:
    cond: Expr
    body: tuple
    line: int = 0


@dataclass(frozen=True)
class Loop:
    body: tuple
    line: int = 0


@dataclass(frozen=True)
class Break:
    line: int = 0


@dataclass(frozen=True)
class Return:
    line: int = 0


@dataclass(frozen=True)
class Choose:
    var: str
    line: int = 0


@dataclass(frozen=True)
class Call:
    func: str
    line: int = 0


Stmt = Union[Assign, Skip, Emit, Await, If, While, Loop, Break, Return, Choose, Call]

BOOL = "bool"
MAILBOX = "mailbox"


@dataclass(frozen=True)
class VarDecl:
    name: str
    type: object  # BOOL, MAILBOX or tuple of enum literals
    init: object  # bool, literal string, or None for an unset mailbox var


@dataclass(frozen=True)
class DriverProgram:
    name: str
    uses: tuple[str, ...]
    vars: tuple[VarDecl, ...]
    functions: dict = field(default_factory=dict, hash=False)
    main: tuple = ()

    def var(self, name: str) -> VarDecl | None:
        for v in self.vars:
            if v.name == name:
                return v
        return None
