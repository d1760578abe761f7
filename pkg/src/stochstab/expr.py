"""Tiny arithmetic expression language for scenario coefficients.

Grammar (``^`` binds tighter than unary minus and is right-associative)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | '+' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' [expr (',' expr)*] ')' | '(' expr ')'

Functions: sin, cos, sqrt, abs, sign, norm (Euclidean norm of its
arguments), exp, log.  ``pi`` is predefined.  Expressions evaluate on numpy
arrays, so a compiled coefficient is batched over leading axes for free.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class ExpressionError(ValueError):
    def __init__(self, message: str, text: str, pos: int, where: str = ""):
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        self.line, self.column, self.where = line, col, where
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}{message} at line {line}, column {col}: {text!r}")


def _norm(*args):
    return np.sqrt(sum(np.asarray(a, float) ** 2 for a in args))


FUNCTIONS: dict = {
    "sin": (np.sin, 1),
    "cos": (np.cos, 1),
    "sqrt": (np.sqrt, 1),
    "abs": (np.abs, 1),
    "sign": (np.sign, 1),
    "exp": (np.exp, 1),
    "log": (np.log, 1),
    "norm": (_norm, None),
}
BUILTIN_CONSTANTS = {"pi": math.pi}

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
                    r"|([A-Za-z_][A-Za-z_0-9]*)|(\*\*|[-+*/^(),]))")


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple = ()
    value: object = None


def _tokenize(text: str, where: str):
    pos, out = 0, []
    while True:
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            rest = text[pos:]
            if rest.strip() == "":
                break
            bad = pos + (len(rest) - len(rest.lstrip()))
            raise ExpressionError(f"unexpected character {text[bad]!r}", text, bad, where)
        num, name, op = m.groups()
        start = m.start(m.lastindex)
        if num is not None:
            out.append(("num", float(num), start))
        elif name is not None:
            out.append(("name", name, start))
        else:
            out.append(("op", "^" if op == "**" else op, start))
        pos = m.end()
    out.append(("end", None, len(text)))
    return out


class _Parser:
    def __init__(self, text: str, where: str):
        self.text, self.where = text, where
        self.toks = _tokenize(text, where)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def fail(self, msg, tok):
        raise ExpressionError(msg, self.text, tok[2], self.where)

    def expect(self, op):
        tok = self.take()
        if tok[0] != "op" or tok[1] != op:
            self.fail(f"expected {op!r}", tok)

    def parse(self) -> Node:
        if self.peek()[0] == "end":
            self.fail("empty expression", self.peek())
        node = self.expr()
        if self.peek()[0] != "end":
            self.fail("unexpected token", self.peek())
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = Node(op, (node, self.term()))
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = Node(op, (node, self.unary()))
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] in "+-":
            self.take()
            inner = self.unary()
            return Node("neg", (inner,)) if tok[1] == "-" else inner
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Node("^", (base, self.unary()))
        return base

    def atom(self):
        tok = self.take()
        kind, val, _ = tok
        if kind == "num":
            return Node("num", value=val)
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    self.fail(f"unknown function {val!r}", tok)
                self.take()
                args = []
                if not (self.peek()[0] == "op" and self.peek()[1] == ")"):
                    args.append(self.expr())
                    while self.peek()[0] == "op" and self.peek()[1] == ",":
                        self.take()
                        args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[val][1]
                if (arity is not None and len(args) != arity) or (arity is None and not args):
                    self.fail(f"wrong number of arguments to {val}", tok)
                return Node("call", tuple(args), val)
            return Node("name", value=val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        self.fail("unexpected end of expression" if kind == "end" else f"unexpected token {val!r}", tok)


def parse(text: str, where: str = "") -> Node:
    return _Parser(str(text), where).parse()


def names_in(node: Node) -> set:
    if node.op == "name":
        return {node.value}
    out = set()
    for a in node.args:
        out |= names_in(a)
    return out


def evaluate(node: Node, env: Mapping[str, object]):
    op = node.op
    if op == "num":
        return node.value
    if op == "name":
        return env[node.value]
    if op == "call":
        return FUNCTIONS[node.value][0](*(evaluate(a, env) for a in node.args))
    if op == "neg":
        return -evaluate(node.args[0], env)
    a, b = (evaluate(x, env) for x in node.args)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    return np.power(a, b)


@dataclass(frozen=True)
class Compiled:
    text: str
    tree: Node


def compile_expr(text, symbols: Sequence[str], where: str = "") -> Compiled:
    """Parse and check every name resolves to a declared symbol."""
    if isinstance(text, (int, float)):
        text = repr(float(text))
    tree = parse(text, where)
    known = set(symbols) | set(BUILTIN_CONSTANTS)
    unknown = sorted(names_in(tree) - known)
    if unknown:
        pos = max(str(text).find(unknown[0]), 0)
        raise ExpressionError(f"unknown symbol {unknown[0]!r}", str(text), pos, where)
    return Compiled(str(text), tree)


def _broadcast(val, shape):
    return np.broadcast_to(np.asarray(val, float), shape)


def state_env(x, state_names, a=None, control_names=(), constants=None) -> dict:
    x = np.asarray(x, float)
    env = dict(BUILTIN_CONSTANTS)
    env.update(constants or {})
    for i, n in enumerate(state_names):
        env[n] = x[..., i]
    if a is not None:
        a = np.asarray(a, float)
        for i, n in enumerate(control_names):
            env[n] = a[..., i]
    return env


def vector_field(exprs: Sequence[Compiled], state_names, control_names=(), constants=None) -> Callable:
    """(x, a) -> stacked components, broadcast over leading axes."""

    def fn(x, a=None):
        env = state_env(x, state_names, a, control_names, constants)
        vals = [np.asarray(evaluate(e.tree, env), float) for e in exprs]
        shape = np.broadcast_shapes(*(v.shape for v in vals), np.shape(x)[:-1])
        return np.stack([_broadcast(v, shape) for v in vals], axis=-1)

    return fn


def matrix_field(rows: Sequence[Sequence[Compiled]], state_names, control_names=(), constants=None) -> Callable:
    """(x, a) -> array of shape (..., rows, cols)."""

    def fn(x, a=None):
        env = state_env(x, state_names, a, control_names, constants)
        vals = [[np.asarray(evaluate(e.tree, env), float) for e in row] for row in rows]
        shape = np.broadcast_shapes(*(v.shape for row in vals for v in row), np.shape(x)[:-1])
        return np.stack([np.stack([_broadcast(v, shape) for v in row], axis=-1) for row in vals], axis=-2)

    return fn


def scalar_field(expr: Compiled, state_names, constants=None) -> Callable:
    def fn(x):
        env = state_env(x, state_names, None, (), constants)
        return _broadcast(evaluate(expr.tree, env), np.shape(x)[:-1]).copy()

    return fn
