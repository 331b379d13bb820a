"""Tiny analytic-expression language for planted fields.

Grammar (recursive descent, no host-language evaluation)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := ("-" | "+") unary | atom
    atom   := NUMBER | "pi" | "x" | "y" | FUNC "(" expr ")" | "(" expr ")"
    FUNC   := "sin" | "cos"
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

FUNCTIONS = {"sin": np.sin, "cos": np.cos}
_TOKEN = re.compile(r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/()]))")


class ExpressionError(ConfigurationError):
    """Malformed expression; ``position`` is the character offset of the problem."""

    def __init__(self, message, text, position):
        super().__init__(f"{message} at column {position + 1} in {text!r}")
        self.text = text
        self.position = position


def tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens, pos = [], 0
    text = str(text)
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExpressionError(f"unexpected character {text[start]!r}", text, start)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


@dataclass(frozen=True)
class Expression:
    """Parsed expression; call with coordinate arrays."""

    text: str
    tree: tuple

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(_eval(self.tree, x, y), np.broadcast_shapes(x.shape, y.shape)).astype(float)

    def is_constant(self) -> bool:
        return not _uses_coords(self.tree)


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        tok = self.take()
        if tok[1] != value:
            raise ExpressionError(f"expected {value!r}, found {tok[1] or 'end of input'!r}", self.text, tok[2])

    def parse(self):
        tree = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExpressionError(f"unexpected {tok[1]!r}", self.text, tok[2])
        return tree

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = (op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = (op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("+", "-"):
            self.take()
            inner = self.unary()
            return ("neg", inner) if tok[1] == "-" else inner
        return self.atom()

    def atom(self):
        kind, value, pos = self.take()
        if kind == "num":
            return ("num", float(value))
        if kind == "name":
            if value == "pi":
                return ("num", float(np.pi))
            if value in ("x", "y"):
                return ("var", value)
            if value in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return ("call", value, arg)
            raise ExpressionError(f"unknown name {value!r}", self.text, pos)
        if value == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionError(f"unexpected {value or 'end of input'!r}", self.text, pos)


def _eval(node, x, y):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "var":
        return x if node[1] == "x" else y
    if tag == "neg":
        return -_eval(node[1], x, y)
    if tag == "call":
        return FUNCTIONS[node[1]](_eval(node[2], x, y))
    a, b = _eval(node[1], x, y), _eval(node[2], x, y)
    if tag == "+":
        return a + b
    if tag == "-":
        return a - b
    if tag == "*":
        return a * b
    return a / b


def _uses_coords(node):
    if node[0] == "var":
        return True
    return any(_uses_coords(c) for c in node[1:] if isinstance(c, tuple))


def parse_expression(text) -> Expression:
    """Parse ``text`` (a string or a plain number) into an :class:`Expression`."""
    if isinstance(text, bool):
        raise ExpressionError("booleans are not expressions", str(text), 0)
    if isinstance(text, (int, float)):
        text = repr(float(text))
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("empty expression", str(text), 0)
    return Expression(text, _Parser(text).parse())
