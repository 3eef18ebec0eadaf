"""Parser and static checks for ``.drv`` driver models."""

from __future__ import annotations

from typing import Sequence

from ..lexer import SyntaxError_, Token, TokenStream, tokenize
from ..protocol import Direction, Protocol, ProtocolSet
from .ast import (
    BOOL,
    MAILBOX,
    And,
    Assign,
    Await,
    BoolLit,
    Break,
    Call,
    Choose,
    DriverProgram,
    Emit,
    Eq,
    If,
    Lit,
    Loop,
    Not,
    Or,
    Return,
    Skip,
    Var,
    VarDecl,
    While,
)

MAX_ENUM_LITERALS = 16

_KEYWORDS = {
    "driver", "uses", "var", "function", "main", "if", "else", "while", "loop",
    "break", "return", "choose", "call", "emit", "await", "skip", "true", "false",
    "bool", "mailbox", "enum",
}


class DriverError(SyntaxError_):
    pass


def _protocol_index(protocols) -> ProtocolSet | None:
    if protocols is None or isinstance(protocols, ProtocolSet):
        return protocols
    return ProtocolSet(protocols)


class _Parser:
    def __init__(self, text: str, protocols: ProtocolSet | None, max_enum: int):
        self.ts = TokenStream(tokenize(text, DriverError), DriverError)
        self.protocols = protocols
        self.max_enum = max_enum
        self.vars: dict[str, VarDecl] = {}
        self.functions: dict[str, tuple] = {}
        self.calls: dict[str, list[tuple[str, Token]]] = {}
        self.loop_depth = 0
        self.current = "main"

    # -- top level -------------------------------------------------------

    def program(self) -> DriverProgram:
        ts = self.ts
        name, uses = "main", ()
        header = ts.accept("driver")
        if header:
            name = self.name_token("driver name").text
            if ts.accept("uses"):
                used = [self.name_token("protocol name")]
                while ts.accept(","):
                    used.append(self.name_token("protocol name"))
                if self.protocols is not None:
                    for tok in used:
                        if self.protocols.by_name(tok.text) is None:
                            ts.fail(f"unknown protocol {tok.text}", tok)
                uses = tuple(t.text for t in used)
            ts.expect("{")
        while ts.at("var"):
            self.var_decl()
        while ts.at("function"):
            self.function()
        if not ts.at("main"):
            ts.fail("expected 'function' or 'main'")
        ts.next()
        self.current = "main"
        main = self.block()
        if header:
            ts.expect("}")
        if ts.peek().kind != "eof":
            ts.fail("trailing input after main")
        self.check_calls()
        return DriverProgram(name, uses, tuple(self.vars.values()), dict(self.functions), main)

    def name_token(self, what: str) -> Token:
        tok = self.ts.ident(what)
        if tok.text in _KEYWORDS:
            self.ts.fail(f"keyword {tok.text!r} used as {what}", tok)
        return tok

    def var_decl(self):
        ts = self.ts
        ts.expect("var")
        tok = self.name_token("variable name")
        if tok.text in self.vars:
            ts.fail(f"duplicate variable {tok.text}", tok)
        ts.expect(":")
        ttok = ts.ident("type")
        if ttok.text == "bool":
            vtype, init = BOOL, False
        elif ttok.text == "mailbox":
            vtype, init = MAILBOX, None
        elif ttok.text == "enum":
            ts.expect("{")
            lits = [self.name_token("enum literal").text]
            while ts.accept(","):
                lits.append(self.name_token("enum literal").text)
            ts.expect("}")
            if len(set(lits)) != len(lits):
                ts.fail("duplicate enum literal", ttok)
            if len(lits) > self.max_enum:
                ts.fail(f"enum has {len(lits)} literals, at most {self.max_enum} allowed", ttok)
            vtype, init = tuple(lits), lits[0]
        else:
            ts.fail(f"unknown type {ttok.text!r}", ttok)
        if ts.accept("="):
            itok = ts.ident("initial value")
            if vtype == BOOL:
                if itok.text not in ("true", "false"):
                    ts.fail("boolean variable needs true or false", itok)
                init = itok.text == "true"
            elif vtype == MAILBOX:
                self.check_mailbox_name(itok)
                init = itok.text
            else:
                if itok.text not in vtype:
                    ts.fail(f"{itok.text} is not a literal of {tok.text}'s enum", itok)
                init = itok.text
        ts.expect(";")
        self.vars[tok.text] = VarDecl(tok.text, vtype, init)

    def function(self):
        ts = self.ts
        ts.expect("function")
        tok = self.name_token("function name")
        if tok.text in self.functions or tok.text == "main":
            ts.fail(f"duplicate function {tok.text}", tok)
        ts.expect("(")
        ts.expect(")")
        self.current = tok.text
        self.calls.setdefault(tok.text, [])
        self.functions[tok.text] = ()
        self.functions[tok.text] = self.block()

    def check_calls(self):
        for caller, callees in self.calls.items():
            for callee, tok in callees:
                if callee not in self.functions:
                    self.ts.fail(f"call to undefined function {callee}", tok)
        # recursion: DFS over the call graph
        state: dict[str, int] = {}

        def visit(f, via):
            state[f] = 1
            for g, tok in self.calls.get(f, ()):
                if state.get(g) == 1:
                    self.ts.fail(f"recursion detected: {f} calls {g}", tok)
                if g not in state:
                    visit(g, tok)
            state[f] = 2

        for f in sorted(self.calls):
            if f not in state:
                visit(f, None)

    # -- statements ------------------------------------------------------

    def block(self) -> tuple:
        self.ts.expect("{")
        body = []
        while not self.ts.at("}"):
            if self.ts.peek().kind == "eof":
                self.ts.fail("expected '}'")
            body.append(self.statement())
        self.ts.expect("}")
        return tuple(body)

    def statement(self):
        ts = self.ts
        tok = ts.peek()
        line = tok.line
        if ts.accept("skip"):
            ts.expect(";")
            return Skip(line)
        if ts.accept("emit"):
            ts.expect("(")
            mtok = ts.ident("mailbox name")
            ts.expect(")")
            ts.expect(";")
            self.check_mailbox(mtok, Direction.OUT, "emit")
            return Emit(mtok.text, line)
        if ts.accept("if"):
            return self.if_rest(line)
        if ts.accept("while"):
            ts.expect("(")
            cond = self.bool_expr()
            ts.expect(")")
            self.loop_depth += 1
            body = self.block()
            self.loop_depth -= 1
            return While(cond, body, line)
        if ts.accept("loop"):
            self.loop_depth += 1
            body = self.block()
            self.loop_depth -= 1
            return Loop(body, line)
        if ts.accept("break"):
            ts.expect(";")
            if self.loop_depth == 0:
                ts.fail("break outside of a loop", tok)
            return Break(line)
        if ts.accept("return"):
            ts.expect(";")
            return Return(line)
        if ts.accept("choose"):
            vtok = ts.ident("variable name")
            ts.expect(";")
            if self.var_type(vtok) != BOOL:
                ts.fail(f"choose needs a bool variable, {vtok.text} is not", vtok)
            return Choose(vtok.text, line)
        if ts.accept("call"):
            ftok = ts.ident("function name")
            ts.expect("(")
            ts.expect(")")
            ts.expect(";")
            self.calls.setdefault(self.current, []).append((ftok.text, ftok))
            return Call(ftok.text, line)
        if tok.kind == "ident" and tok.text not in _KEYWORDS:
            vtok = ts.next()
            ts.expect("=")
            vtype = self.var_type(vtok)
            if ts.accept("await"):
                ts.expect("(")
                boxes = [ts.ident("mailbox name")]
                while ts.accept(","):
                    boxes.append(ts.ident("mailbox name"))
                ts.expect(")")
                ts.expect(";")
                if vtype != MAILBOX:
                    ts.fail(f"await result needs a mailbox variable, {vtok.text} is not", vtok)
                names = [b.text for b in boxes]
                if len(set(names)) != len(names):
                    ts.fail("mailbox listed twice in await", boxes[0])
                for b in boxes:
                    self.check_mailbox(b, Direction.IN, "await")
                return Await(vtok.text, tuple(names), line)
            etok = ts.peek()
            value = self.expr()
            ts.expect(";")
            self.check_assignable(vtype, value, etok)
            return Assign(vtok.text, value, line)
        ts.fail(f"unexpected {tok.text or 'end of input'!r}", tok)

    def if_rest(self, line):
        ts = self.ts
        ts.expect("(")
        cond = self.bool_expr()
        ts.expect(")")
        then = self.block()
        orelse = ()
        if ts.accept("else"):
            if ts.at("if"):
                iline = ts.next().line
                orelse = (self.if_rest(iline),)
            else:
                orelse = self.block()
        return If(cond, then, orelse, line)

    # -- expressions -----------------------------------------------------

    def bool_expr(self):
        tok = self.ts.peek()
        e = self.expr()
        if self.type_of(e, tok) != BOOL:
            self.ts.fail("condition is not boolean", tok)
        return e

    def expr(self):
        left = self.conj()
        while self.ts.at("||"):
            tok = self.ts.next()
            right = self.conj()
            self.need_bool(left, tok)
            self.need_bool(right, tok)
            left = Or(left, right)
        return left

    def conj(self):
        left = self.unary()
        while self.ts.at("&&"):
            tok = self.ts.next()
            right = self.unary()
            self.need_bool(left, tok)
            self.need_bool(right, tok)
            left = And(left, right)
        return left

    def unary(self):
        if self.ts.at("!"):
            tok = self.ts.next()
            arg = self.unary()
            self.need_bool(arg, tok)
            return Not(arg)
        return self.comparison()

    def comparison(self):
        left = self.atom()
        if self.ts.at("==") or self.ts.at("!="):
            tok = self.ts.next()
            right = self.atom()
            self.check_comparison(left, right, tok)
            return Eq(left, right, tok.text == "!=")
        return left

    def atom(self):
        ts = self.ts
        if ts.accept("("):
            e = self.expr()
            ts.expect(")")
            return e
        tok = ts.ident("expression")
        if tok.text == "true":
            return BoolLit(True)
        if tok.text == "false":
            return BoolLit(False)
        if tok.text in _KEYWORDS:
            ts.fail(f"unexpected keyword {tok.text!r}", tok)
        if tok.text in self.vars:
            return Var(tok.text)
        return Lit(tok.text)

    # -- typing ----------------------------------------------------------

    def var_type(self, tok: Token):
        decl = self.vars.get(tok.text)
        if decl is None:
            self.ts.fail(f"undeclared variable {tok.text}", tok)
        return decl.type

    def type_of(self, e, tok):
        if isinstance(e, (BoolLit, Not, And, Or, Eq)):
            return BOOL
        if isinstance(e, Var):
            return self.vars[e.name].type
        return "lit"

    def need_bool(self, e, tok):
        if self.type_of(e, tok) != BOOL:
            if isinstance(e, Lit):
                self.ts.fail(f"unknown variable {e.value}", tok)
            self.ts.fail("operand is not boolean", tok)

    def check_literal(self, vtype, lit: Lit, tok):
        if vtype == BOOL:
            self.ts.fail(f"{lit.value} is not a boolean value", tok)
        elif vtype == MAILBOX:
            self.check_mailbox_name(Token("ident", lit.value, tok.line, tok.col))
        elif lit.value not in vtype:
            self.ts.fail(f"{lit.value} is not a literal of the enum", tok)

    def check_comparison(self, left, right, tok):
        lt, rt = self.type_of(left, tok), self.type_of(right, tok)
        if lt == "lit" and rt == "lit":
            self.ts.fail(f"comparison of two literals ({left} and {right})", tok)
        if lt == "lit":
            self.check_literal(rt, left, tok)
        elif rt == "lit":
            self.check_literal(lt, right, tok)
        elif lt != rt:
            self.ts.fail("comparison between values of different types", tok)

    def check_assignable(self, vtype, value, tok):
        t = self.type_of(value, tok)
        if t == "lit":
            self.check_literal(vtype, value, tok)
        elif t != vtype:
            self.ts.fail("assigned value has the wrong type", tok)

    def check_mailbox_name(self, tok: Token):
        if self.protocols is not None and self.protocols.mailbox(tok.text) is None:
            self.ts.fail(f"unknown mailbox {tok.text}", tok)

    def check_mailbox(self, tok: Token, direction: Direction, what: str):
        if self.protocols is None:
            return
        m = self.protocols.mailbox(tok.text)
        if m is None:
            self.ts.fail(f"unknown mailbox {tok.text}", tok)
        if m.direction is not direction:
            self.ts.fail(
                f"{what} on mailbox {tok.text} which is declared {m.direction.keyword}", tok
            )


def parse_driver(text: str, protocols: Sequence[Protocol] | ProtocolSet | None = None,
                 max_enum: int = MAX_ENUM_LITERALS) -> DriverProgram:
    """Parse a driver model.

    When ``protocols`` is given, mailbox references are resolved against
    it and EMIT/AWAIT directions are checked.
    """
    return _Parser(text, _protocol_index(protocols), max_enum).program()


def load_driver(path, protocols=None) -> DriverProgram:
    with open(path, encoding="utf-8") as fh:
        return parse_driver(fh.read(), protocols)
