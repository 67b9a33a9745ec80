"""Tiny expression language for coefficient functions.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' atom)*
    atom   := NUMBER | VAR | FUNC '(' expr (',' expr)* ')' | '(' expr ')'

Same-precedence binary operators associate to the left, including ``^``.
Evaluation is vectorised over numpy arrays so one parsed tree can be applied
to every simulated path at once.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

VARIABLES = ("t", "x", "y", "z")
FUNCTIONS = {"exp": 1, "log": 1, "sqrt": 1, "abs": 1, "neg": 1, "min": 2, "max": 2}


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        self.offset = offset
        self.expected = tuple(expected)
        detail = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at byte {offset}{detail}")


class UnknownIdentifierError(ExprError):
    def __init__(self, name: str, offset: int):
        self.name = name
        self.offset = offset
        permitted = ", ".join(VARIABLES + tuple(FUNCTIONS))
        super().__init__(f"unknown identifier {name!r} at byte {offset}; permitted names: {permitted}")


class EvalError(ExprError):
    def __init__(self, message: str, subexpr: "Expr"):
        self.subexpr = subexpr
        super().__init__(f"{message} in {to_source(subexpr)}")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]


Expr = Union[Num, Var, BinOp, Neg, Call]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            offset = len(source[:pos].encode()) + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {source[pos:].lstrip()[:1]!r}", offset,
                                  ("number", "identifier", "operator"))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), len(source[:start].encode())))
        pos = m.end()
    tokens.append(("end", "", len(source.encode())))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, offset = self.take()
        if text != value or kind != "op":
            raise ExprSyntaxError(f"unexpected {text or 'end of input'!r}", offset, (value,))

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, offset = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {text!r}", offset, ("+", "-", "*", "/", "^", "end of input"))
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        left = self.atom()
        while self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            left = BinOp("^", left, self.atom())
        return left

    def atom(self) -> Expr:
        kind, text, offset = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text in VARIABLES:
                return Var(text)
            if text in FUNCTIONS:
                self.expect("(")
                args = [self.expr()]
                while self.peek()[0] == "op" and self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[text]:
                    raise ExprSyntaxError(f"{text} takes {FUNCTIONS[text]} argument(s), got {len(args)}", offset)
                return Call(text, tuple(args))
            raise UnknownIdentifierError(text, offset)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ExprSyntaxError(f"unexpected {text or 'end of input'!r}", offset,
                              ("number", "variable", "function", "(", "-"))


def parse(source: str) -> Expr:
    """Parse ``source`` into an immutable expression tree."""
    if isinstance(source, (int, float)):
        source = repr(float(source))
    return _Parser(source).parse()


def variables(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, Neg):
        return variables(e.operand)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    return set().union(*(variables(a) for a in e.args))


def to_source(e: Expr) -> str:
    """Fully parenthesised source text; reparses to the same tree."""
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_source(e.operand)})"
    if isinstance(e, BinOp):
        return f"({to_source(e.left)} {e.op} {to_source(e.right)})"
    return f"{e.func}({', '.join(to_source(a) for a in e.args)})"


def _eval(e: Expr, env: dict):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise EvalError(f"variable {e.name!r} not supplied", e) from None
    if isinstance(e, Neg):
        return -_eval(e.operand, env)
    if isinstance(e, BinOp):
        a = _eval(e.left, env)
        b = _eval(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if np.any(np.asarray(b) == 0):
                raise EvalError("division by zero", e)
            return a / b
        with np.errstate(all="ignore"):
            return np.power(a, b)
    args = [_eval(a, env) for a in e.args]
    f = e.func
    if f == "log":
        if np.any(np.asarray(args[0]) <= 0):
            raise EvalError("log of non-positive argument", e)
        return np.log(args[0])
    if f == "sqrt":
        if np.any(np.asarray(args[0]) < 0):
            raise EvalError("sqrt of negative argument", e)
        return np.sqrt(args[0])
    if f == "exp":
        return np.exp(args[0])
    if f == "abs":
        return np.abs(args[0])
    if f == "neg":
        return -args[0]
    if f == "min":
        return np.minimum(args[0], args[1])
    return np.maximum(args[0], args[1])


def evaluate(e: Expr, t=0.0, x=0.0, y=0.0, z=0.0):
    """Evaluate ``e`` at scalars or broadcastable arrays.

    Raises EvalError on domain errors or if the result contains NaN.
    """
    env = {"t": t, "x": x, "y": y, "z": z}
    with np.errstate(over="ignore", invalid="ignore"):
        out = _eval(e, env)
    if np.any(np.isnan(out)):
        raise EvalError("result is NaN", e)
    return out


def is_constant(e: Expr) -> bool:
    return not variables(e)
