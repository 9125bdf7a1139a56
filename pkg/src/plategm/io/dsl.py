"""Line-oriented model language: lexer, recursive-descent parser and printer.

Grammar::

    program  := (const | node | plate | link | optarc | observe)*
    const    := "const" IDENT "=" NUMBER
    node     := IDENT "~" FAMILY "(" args ")" | IDENT ":=" expr
    plate    := "plate" IDENT "[" (NUMBER | IDENT) "]" "{" program "}"
    link     := "link" IDENT "--" IDENT "table" "[" exprs "]"
    optarc   := "optional" IDENT "->" IDENT
    observe  := "observe" IDENT "from" STRING

Statements end at a newline or ``;``; newlines inside brackets are ignored and
``#`` starts a comment.  Every diagnostic carries ``line:column``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional, Union

from plategm.expfam.families import FAMILY_NAMES
from plategm.expr import (
    FUNCTIONS,
    BinOp,
    Call,
    Compare,
    Const,
    Expr,
    Neg,
    PlateSum,
    Ref,
    Vector,
    to_source,
)

__all__ = [
    "ModelError",
    "ConstDecl",
    "NodeDecl",
    "PlateDecl",
    "LinkDecl",
    "OptionalDecl",
    "ObserveDecl",
    "ModelSpec",
    "parse_model",
    "print_model",
]

KEYWORDS = {"const", "plate", "link", "optional", "observe", "from", "table", "sum"}
MAX_DEPTH = 200


class ModelError(ValueError):
    """Lexical, syntax, name or type error in a model, with position and code."""

    def __init__(self, code: str, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {code}: {message}")
        self.code = code
        self.message = message
        self.line = line
        self.col = col


Pos = tuple  # (line, col)


@dataclass(frozen=True)
class ConstDecl:
    name: str
    value: float
    pos: Pos = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class NodeDecl:
    name: str
    family: Optional[str] = None
    args: tuple = ()
    expr: Optional[Expr] = None
    pos: Pos = field(default=(0, 0), compare=False)

    @property
    def deterministic(self) -> bool:
        return self.expr is not None


@dataclass(frozen=True)
class PlateDecl:
    name: str
    size: Union[int, str]
    body: tuple = ()
    pos: Pos = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class LinkDecl:
    a: str
    b: str
    table: tuple = ()
    pos: Pos = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class OptionalDecl:
    src: str
    dst: str
    pos: Pos = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class ObserveDecl:
    name: str
    column: str
    pos: Pos = field(default=(0, 0), compare=False)


Statement = Union[ConstDecl, NodeDecl, PlateDecl, LinkDecl, OptionalDecl, ObserveDecl]


@dataclass(frozen=True)
class ModelSpec:
    """Parsed program; ``statements`` keeps declaration order and plate nesting."""

    statements: tuple = ()

    def walk(self):
        """Yield ``(statement, enclosing plate names)`` depth first."""

        def rec(stmts, plates):
            for s in stmts:
                yield s, plates
                if isinstance(s, PlateDecl):
                    yield from rec(s.body, plates + (s.name,))

        yield from rec(self.statements, ())


# ---------------------------------------------------------------------------
# lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>:=|--|->|<=|>=|==|!=|[~()\[\]{},=+\-*/^<>;])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # ident, number, string, op, newline, eof
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start, pos, depth = 1, 0, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise ModelError("lex", f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        s = m.group()
        if kind == "newline":
            if depth == 0 and tokens and tokens[-1].kind != "newline":
                tokens.append(Token("newline", "\n", line, col))
            line += 1
            line_start = m.end()
        elif kind == "op":
            if s in "([":
                depth += 1
            elif s in ")]":
                depth = max(0, depth - 1)
            tokens.append(Token("op", s, line, col))
        elif kind in ("number", "string", "ident"):
            tokens.append(Token(kind, s, line, col))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0
        self.depth = 0

    # token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, code: str, message: str, tok: Optional[Token] = None) -> ModelError:
        t = tok or self.tok
        return ModelError(code, message, t.line, t.col)

    def advance(self) -> Token:
        t = self.tok
        if t.kind != "eof":
            self.i += 1
        return t

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("op", "ident") and t.text == text

    def expect(self, text: str) -> Token:
        if not self.at(text):
            shown = "end of input" if self.tok.kind == "eof" else repr(self.tok.text)
            raise self.error("syntax", f"expected {text!r} but found {shown}")
        return self.advance()

    def ident(self, what: str = "identifier") -> Token:
        t = self.tok
        if t.kind != "ident" or t.text in KEYWORDS:
            shown = "end of input" if t.kind == "eof" else repr(t.text)
            raise self.error("syntax", f"expected {what} but found {shown}")
        return self.advance()

    def number(self) -> float:
        neg = False
        if self.at("-"):
            self.advance()
            neg = True
        t = self.tok
        if t.kind != "number":
            raise self.error("syntax", "expected a number")
        self.advance()
        v = float(t.text)
        if not math.isfinite(v):
            raise self.error("range", f"number {t.text} is out of range", t)
        return -v if neg else v

    def skip_newlines(self) -> None:
        while self.tok.kind == "newline" or self.at(";"):
            self.advance()

    def end_statement(self) -> None:
        if self.tok.kind in ("newline", "eof") or self.at(";") or self.at("}"):
            return
        raise self.error("syntax", f"unexpected {self.tok.text!r} after statement")

    # program
    def program(self, nested: bool) -> tuple:
        stmts = []
        self.skip_newlines()
        while not (self.tok.kind == "eof" or (nested and self.at("}"))):
            stmts.append(self.statement())
            self.end_statement()
            self.skip_newlines()
        return tuple(stmts)

    def statement(self) -> Statement:
        t = self.tok
        pos = (t.line, t.col)
        if self.at("const"):
            self.advance()
            name = self.ident("constant name").text
            self.expect("=")
            return ConstDecl(name, self.number(), pos)
        if self.at("plate"):
            self.advance()
            name = self.ident("plate name").text
            self.expect("[")
            st = self.tok
            if st.kind == "number":
                self.advance()
                v = float(st.text)
                if not v.is_integer() or v < 1 or not math.isfinite(v):
                    raise self.error("type", "plate size must be a positive integer", st)
                size: Union[int, str] = int(v)
            else:
                size = self.ident("plate size").text
            self.expect("]")
            self.skip_newlines()
            self.expect("{")
            self.depth += 1
            if self.depth > MAX_DEPTH:
                raise self.error("depth", "plates nested too deeply")
            body = self.program(nested=True)
            self.depth -= 1
            self.expect("}")
            return PlateDecl(name, size, body, pos)
        if self.at("link"):
            self.advance()
            a = self.ident("node name").text
            self.expect("--")
            b = self.ident("node name").text
            self.expect("table")
            self.expect("[")
            items = self.expr_list("]")
            self.expect("]")
            return LinkDecl(a, b, tuple(items), pos)
        if self.at("optional"):
            self.advance()
            src = self.ident("node name").text
            self.expect("->")
            dst = self.ident("node name").text
            return OptionalDecl(src, dst, pos)
        if self.at("observe"):
            self.advance()
            name = self.ident("node name").text
            self.expect("from")
            st = self.tok
            if st.kind != "string":
                raise self.error("syntax", "expected a quoted column name")
            self.advance()
            return ObserveDecl(name, _unquote(st.text), pos)
        name = self.ident("a statement").text
        if self.at("~"):
            self.advance()
            ft = self.tok
            fam = self.ident("family name").text
            if fam not in FAMILY_NAMES:
                raise self.error("name", f"unknown family '{fam}'", ft)
            self.expect("(")
            args = self.expr_list(")")
            self.expect(")")
            return NodeDecl(name, fam, tuple(args), None, pos)
        if self.at(":="):
            self.advance()
            return NodeDecl(name, None, (), self.expr(), pos)
        raise self.error("syntax", f"expected '~' or ':=' after '{name}'")

    # expressions
    def expr_list(self, close: str) -> list:
        items = []
        if self.at(close):
            return items
        items.append(self.expr())
        while self.at(","):
            self.advance()
            items.append(self.expr())
        return items

    def expr(self) -> Expr:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise self.error("depth", "expression nested too deeply")
        try:
            left = self.additive()
            if self.tok.kind == "op" and self.tok.text in ("<", "<=", ">", ">=", "==", "!="):
                op = self.advance().text
                left = Compare(op, left, self.additive())
            return left
        finally:
            self.depth -= 1

    def additive(self) -> Expr:
        left = self.term()
        while self.at("+") or self.at("-"):
            op = self.advance().text
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.at("*") or self.at("/"):
            op = self.advance().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.at("-"):
            self.advance()
            self.depth += 1
            if self.depth > MAX_DEPTH:
                raise self.error("depth", "expression nested too deeply")
            try:
                nxt = self.toks[self.i + 1] if self.i + 1 < len(self.toks) else self.tok
                if self.tok.kind == "number" and not (nxt.kind == "op" and nxt.text == "^"):
                    t = self.advance()
                    v = float(t.text)
                    if not math.isfinite(v):
                        raise self.error("range", f"number {t.text} is out of range", t)
                    return Const(-v)
                return Neg(self.unary())
            finally:
                self.depth -= 1
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.at("^"):
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "number":
            self.advance()
            v = float(t.text)
            if not math.isfinite(v):
                raise self.error("range", f"number {t.text} is out of range", t)
            return Const(v)
        if self.at("("):
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if self.at("["):
            self.advance()
            items = self.expr_list("]")
            if not items:
                raise self.error("syntax", "empty vector literal", t)
            self.expect("]")
            return Vector(tuple(items))
        if t.kind == "ident" and t.text == "sum":
            self.advance()
            self.expect("(")
            plate = self.ident("plate name").text
            self.expect(",")
            body = self.expr()
            self.expect(")")
            return PlateSum(plate, body)
        if t.kind == "ident" and t.text not in KEYWORDS:
            self.advance()
            if self.at("("):
                if t.text not in FUNCTIONS:
                    raise self.error("name", f"unknown function '{t.text}'", t)
                self.advance()
                args = self.expr_list(")")
                self.expect(")")
                if len(args) != FUNCTIONS[t.text]:
                    raise self.error(
                        "arity", f"{t.text} takes {FUNCTIONS[t.text]} argument(s), got {len(args)}", t
                    )
                return Call(t.text, tuple(args))
            if self.at("["):
                self.advance()
                index = self.expr_list("]")
                if not index:
                    raise self.error("syntax", "empty index", t)
                self.expect("]")
                return Ref(t.text, tuple(index))
            return Ref(t.text)
        shown = "end of input" if t.kind == "eof" else repr(t.text)
        raise self.error("syntax", f"expected an expression but found {shown}")


def _unquote(s: str) -> str:
    body = s[1:-1]
    return re.sub(r"\\(.)", r"\1", body)


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def parse_model(text: str) -> ModelSpec:
    """Parse model source; raises :class:`ModelError` with a position on failure."""
    if not isinstance(text, str):
        raise ModelError("type", "model source must be text", 0, 0)
    p = _Parser(text)
    stmts = p.program(nested=False)
    if p.tok.kind != "eof":
        raise p.error("syntax", f"unexpected {p.tok.text!r}")
    return ModelSpec(stmts)


# ---------------------------------------------------------------------------
# printer


def _num(v: float) -> str:
    return to_source(Const(v))


def print_model(spec: ModelSpec) -> str:
    """Canonical source text; ``parse_model(print_model(s)) == s``."""
    lines: list[str] = []

    def emit(stmts, indent):
        pad = "    " * indent
        for s in stmts:
            if isinstance(s, ConstDecl):
                lines.append(f"{pad}const {s.name} = {_num(s.value)}")
            elif isinstance(s, NodeDecl):
                if s.expr is not None:
                    lines.append(f"{pad}{s.name} := {to_source(s.expr)}")
                else:
                    args = ", ".join(to_source(a) for a in s.args)
                    lines.append(f"{pad}{s.name} ~ {s.family}({args})")
            elif isinstance(s, PlateDecl):
                lines.append(f"{pad}plate {s.name}[{s.size}] {{")
                emit(s.body, indent + 1)
                lines.append(f"{pad}}}")
            elif isinstance(s, LinkDecl):
                table = ", ".join(to_source(e) for e in s.table)
                lines.append(f"{pad}link {s.a} -- {s.b} table [{table}]")
            elif isinstance(s, OptionalDecl):
                lines.append(f"{pad}optional {s.src} -> {s.dst}")
            elif isinstance(s, ObserveDecl):
                lines.append(f"{pad}observe {s.name} from {_quote(s.column)}")

    emit(spec.statements, 0)
    return "\n".join(lines) + "\n"
