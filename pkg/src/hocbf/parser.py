"""Recursive-descent parser for polynomial expressions.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor ('*' factor)*
    factor := base ('^' uint)?
    base   := number | ident | '(' expr ')' | '-' base

Unary minus binds tighter than ``^``, so ``-x^2`` means ``(-x)^2``. The
printer therefore never emits a bare leading minus in front of a power.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import List, Tuple, Union

from .poly import Poly, VarSpace, to_string


class ParseError(ValueError):
    def __init__(self, message: str, pos: int, text: str = ""):
        self.pos = pos
        self.text = text
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        self.line, self.col = line, col
        super().__init__(f"{message} at line {line}, column {col}")


# -- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - *
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exp: int


Node = Union[Num, Var, Neg, BinOp, Pow]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*^()]))"
)


def tokenize(text: str) -> List[Tuple[str, str, int]]:
    out = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ParseError(f"unexpected character {text[bad]!r}", bad, text)
        kind = m.lastgroup
        start = m.start(kind)
        out.append((kind, m.group(kind), start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, msg, tok=None):
        tok = tok or self.peek()
        raise ParseError(msg, tok[2], self.text)

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[0] == "op" and self.peek()[1] == "*":
            self.take()
            node = BinOp("*", node, self.factor())
        return node

    def factor(self) -> Node:
        node = self.base()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            tok = self.peek()
            if tok[0] != "num" or not tok[1].isdigit():
                self.error("exponent must be a nonnegative integer", tok)
            self.take()
            node = Pow(node, int(tok[1]))
        return node

    def base(self) -> Node:
        kind, val, _ = tok = self.peek()
        if kind == "num":
            self.take()
            return Num(float(val))
        if kind == "id":
            self.take()
            return Var(val)
        if kind == "op" and val == "(":
            self.take()
            node = self.expr()
            if self.peek()[1] != ")":
                self.error("expected ')'")
            self.take()
            return node
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.base())
        if kind == "end":
            self.error("unexpected end of expression", tok)
        self.error(f"unexpected token {val!r}", tok)


def parse_ast(text: str) -> Node:
    if not text or not text.strip():
        raise ParseError("empty expression", 0, text or "")
    p = _Parser(text)
    node = p.expr()
    if p.peek()[0] != "end":
        p.error(f"unexpected token {p.peek()[1]!r}")
    return node


def lower(node: Node, space: VarSpace) -> Poly:
    """Convert an AST into a Poly over ``space``."""
    if isinstance(node, Num):
        return space.const(node.value)
    if isinstance(node, Var):
        return space.var(node.name)
    if isinstance(node, Neg):
        return -lower(node.arg, space)
    if isinstance(node, Pow):
        return lower(node.base, space) ** node.exp
    a, b = lower(node.left, space), lower(node.right, space)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    return a * b


def parse_poly(text: str, space: VarSpace) -> Poly:
    node = parse_ast(text)
    try:
        return lower(node, space)
    except ValueError as exc:  # unknown identifiers and degree overflow
        raise ParseError(str(exc), 0, text) from None


def format_ast(node: Node) -> str:
    """Print an AST so that ``parse_ast(format_ast(n))`` has the same value."""
    if isinstance(node, Num):
        v = node.value
        text = repr(float(abs(v)))
        return text if v >= 0 else f"(-{text})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{_wrap(node.arg)})"
    if isinstance(node, Pow):
        return f"{_wrap(node.base)}^{node.exp}"
    return f"({format_ast(node.left)} {node.op} {format_ast(node.right)})"


def _wrap(node: Node) -> str:
    if isinstance(node, (Var,)) or (isinstance(node, Num) and node.value >= 0):
        return format_ast(node)
    s = format_ast(node)
    return s if s.startswith("(") and _balanced_outer(s) else f"({s})"


def _balanced_outer(s: str) -> bool:
    depth = 0
    for k, ch in enumerate(s):
        depth += ch == "("
        depth -= ch == ")"
        if depth == 0 and k < len(s) - 1:
            return False
    return True


def format_poly(p: Poly) -> str:
    return to_string(p)


def evaluate_ast(node: Node, env) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return float(env[node.name])
    if isinstance(node, Neg):
        return -evaluate_ast(node.arg, env)
    if isinstance(node, Pow):
        return evaluate_ast(node.base, env) ** node.exp
    a, b = evaluate_ast(node.left, env), evaluate_ast(node.right, env)
    return a + b if node.op == "+" else a - b if node.op == "-" else a * b
