"""Arithmetic expression trees with exact symbolic derivatives.

The expression language is deliberately a closed DSL: real constants, input
variables ``x<id>``, the binary operations ``+ - * /``, powers with a
constant exponent, and the unary operations negate, ``exp``, ``log``,
``sqrt`` and square.  Every node in this set has an exact differentiation
rule, so gradients of vertex functions never depend on a numeric step size.
Finite differences appear only in the test suite, as an independent check.

Expressions evaluate on floats or numpy arrays alike, which lets the
bootstrap simulator push a whole resampled population through a vertex
function in one call.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import DomainError, ExpressionSyntaxError

__all__ = [
    "Expr",
    "const",
    "variable",
    "add",
    "sub",
    "mul",
    "div",
    "power",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "parse_expression",
    "to_string",
    "evaluate",
    "derivative",
    "substitute",
    "expression_variables",
]

Value = Union[float, np.ndarray]

_UNARY_OPS = ("neg", "exp", "log", "sqrt", "square")
_BINARY_OPS = ("add", "sub", "mul", "div")


@dataclass(frozen=True)
class Expr:
    """One node of the arithmetic DSL.

    ``op`` is one of ``const``, ``var``, ``add``, ``sub``, ``mul``, ``div``,
    ``pow``, ``neg``, ``exp``, ``log``, ``sqrt``, ``square``.  For ``const``
    the number lives in ``value``; for ``pow`` the constant exponent lives in
    ``value`` and the base in ``args``; for ``var`` the referenced vertex id
    lives in ``var``.
    """

    op: str
    args: tuple["Expr", ...] = ()
    value: float | None = None
    var: int | None = None


def const(value: float) -> Expr:
    return Expr("const", value=float(value))


def variable(index: int) -> Expr:
    if index < 1:
        raise ValueError(f"variable index must be >= 1, got {index}")
    return Expr("var", var=int(index))


def _is_const(e: Expr, value: float | None = None) -> bool:
    return e.op == "const" and (value is None or e.value == value)


def add(u: Expr, v: Expr) -> Expr:
    if _is_const(u) and _is_const(v):
        return const(u.value + v.value)
    if _is_const(u, 0.0):
        return v
    if _is_const(v, 0.0):
        return u
    return Expr("add", (u, v))


def sub(u: Expr, v: Expr) -> Expr:
    if _is_const(u) and _is_const(v):
        return const(u.value - v.value)
    if _is_const(v, 0.0):
        return u
    if _is_const(u, 0.0):
        return neg(v)
    return Expr("sub", (u, v))


def mul(u: Expr, v: Expr) -> Expr:
    if _is_const(u) and _is_const(v):
        return const(u.value * v.value)
    if _is_const(u, 0.0) or _is_const(v, 0.0):
        return const(0.0)
    if _is_const(u, 1.0):
        return v
    if _is_const(v, 1.0):
        return u
    return Expr("mul", (u, v))


def div(u: Expr, v: Expr) -> Expr:
    if _is_const(v) and v.value != 0.0:
        if _is_const(u):
            return const(u.value / v.value)
        if v.value == 1.0:
            return u
    if _is_const(u, 0.0):
        # Sound for derivative construction: the quotient is identically zero
        # wherever the original expression is defined.
        return const(0.0)
    return Expr("div", (u, v))


def power(u: Expr, exponent: float) -> Expr:
    exponent = float(exponent)
    if exponent == 0.0:
        return const(1.0)
    if exponent == 1.0:
        return u
    if exponent == 2.0:
        return square(u)
    if _is_const(u):
        folded = _checked_pow(u.value, exponent)
        if folded is not None:
            return const(folded)
    return Expr("pow", (u,), value=exponent)


def neg(u: Expr) -> Expr:
    if _is_const(u):
        return const(-u.value)
    if u.op == "neg":
        return u.args[0]
    return Expr("neg", (u,))


def exp(u: Expr) -> Expr:
    if _is_const(u):
        return const(math.exp(u.value))
    return Expr("exp", (u,))


def log(u: Expr) -> Expr:
    if _is_const(u) and u.value > 0.0:
        return const(math.log(u.value))
    return Expr("log", (u,))


def sqrt(u: Expr) -> Expr:
    if _is_const(u) and u.value >= 0.0:
        return const(math.sqrt(u.value))
    return Expr("sqrt", (u,))


def square(u: Expr) -> Expr:
    if _is_const(u):
        return const(u.value * u.value)
    return Expr("square", (u,))


def _checked_pow(base: float, exponent: float) -> float | None:
    """Fold a constant power when it is defined; otherwise defer to runtime."""
    if base < 0.0 and exponent != int(exponent):
        return None
    if base == 0.0 and exponent < 0.0:
        return None
    return float(base) ** exponent


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(expr: Expr, env: Mapping[int, Value]) -> Value:
    """Evaluate ``expr`` on the given variable bindings.

    Bindings may be scalars or numpy arrays of a common shape.  Raises
    DomainError for log/sqrt/division/power arguments outside their domain;
    the offending check covers every element of an array binding.
    """
    op = expr.op
    if op == "const":
        return expr.value
    if op == "var":
        try:
            return env[expr.var]
        except KeyError:
            raise DomainError(f"no value bound for variable x{expr.var}") from None
    if op == "add":
        return evaluate(expr.args[0], env) + evaluate(expr.args[1], env)
    if op == "sub":
        return evaluate(expr.args[0], env) - evaluate(expr.args[1], env)
    if op == "mul":
        return evaluate(expr.args[0], env) * evaluate(expr.args[1], env)
    if op == "div":
        num = evaluate(expr.args[0], env)
        den = evaluate(expr.args[1], env)
        if np.any(np.asarray(den) == 0.0):
            raise DomainError("division by zero")
        return num / den
    if op == "pow":
        base = evaluate(expr.args[0], env)
        c = expr.value
        base_arr = np.asarray(base)
        if c != int(c) and np.any(base_arr < 0.0):
            raise DomainError(f"negative base for non-integer exponent {c}")
        if c < 0.0 and np.any(base_arr == 0.0):
            raise DomainError(f"zero base for negative exponent {c}")
        return base ** c
    if op == "neg":
        return -evaluate(expr.args[0], env)
    if op == "exp":
        return np.exp(evaluate(expr.args[0], env))
    if op == "log":
        a = evaluate(expr.args[0], env)
        if np.any(np.asarray(a) <= 0.0):
            raise DomainError("log of non-positive value")
        return np.log(a)
    if op == "sqrt":
        a = evaluate(expr.args[0], env)
        if np.any(np.asarray(a) < 0.0):
            raise DomainError("sqrt of negative value")
        return np.sqrt(a)
    if op == "square":
        a = evaluate(expr.args[0], env)
        return a * a
    raise ValueError(f"unknown expression op {op!r}")


# ---------------------------------------------------------------------------
# differentiation and substitution
# ---------------------------------------------------------------------------


def derivative(expr: Expr, wrt: int) -> Expr:
    """Exact partial derivative of ``expr`` with respect to ``x<wrt>``."""
    op = expr.op
    if op == "const":
        return const(0.0)
    if op == "var":
        return const(1.0 if expr.var == wrt else 0.0)
    if op == "add":
        return add(derivative(expr.args[0], wrt), derivative(expr.args[1], wrt))
    if op == "sub":
        return sub(derivative(expr.args[0], wrt), derivative(expr.args[1], wrt))
    if op == "mul":
        u, v = expr.args
        return add(mul(derivative(u, wrt), v), mul(u, derivative(v, wrt)))
    if op == "div":
        u, v = expr.args
        return div(
            sub(mul(derivative(u, wrt), v), mul(u, derivative(v, wrt))),
            square(v),
        )
    if op == "pow":
        (u,) = expr.args
        c = expr.value
        return mul(mul(const(c), power(u, c - 1.0)), derivative(u, wrt))
    if op == "neg":
        return neg(derivative(expr.args[0], wrt))
    if op == "exp":
        (u,) = expr.args
        return mul(exp(u), derivative(u, wrt))
    if op == "log":
        (u,) = expr.args
        return div(derivative(u, wrt), u)
    if op == "sqrt":
        (u,) = expr.args
        return div(derivative(u, wrt), mul(const(2.0), sqrt(u)))
    if op == "square":
        (u,) = expr.args
        return mul(mul(const(2.0), u), derivative(u, wrt))
    raise ValueError(f"unknown expression op {op!r}")


def substitute(expr: Expr, bindings: Mapping[int, Expr]) -> Expr:
    """Replace variable nodes by expressions (used to compose vertex functions)."""
    op = expr.op
    if op == "const":
        return expr
    if op == "var":
        return bindings.get(expr.var, expr)
    if op == "pow":
        return power(substitute(expr.args[0], bindings), expr.value)
    rebuilt = tuple(substitute(a, bindings) for a in expr.args)
    ctor = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "div": div,
        "neg": neg,
        "exp": exp,
        "log": log,
        "sqrt": sqrt,
        "square": square,
    }[op]
    return ctor(*rebuilt)


def expression_variables(expr: Expr) -> frozenset[int]:
    if expr.op == "var":
        return frozenset((expr.var,))
    out: frozenset[int] = frozenset()
    for a in expr.args:
        out |= expression_variables(a)
    return out


# ---------------------------------------------------------------------------
# parsing and printing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()])"
    r")"
)

_FUNCTIONS = {"exp": exp, "log": log, "sqrt": sqrt}
_VAR_RE = re.compile(r"^x(\d+)$")


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            rest = text[pos:].lstrip()
            if not rest:
                break
            raise ExpressionSyntaxError(f"unexpected character {rest[0]!r} in {text!r}")
        if m.lastgroup is not None:
            tokens.append((m.lastgroup, m.group(m.lastgroup)))
        pos = m.end()
    return tokens


class _Parser:
    """Recursive-descent parser for infix expressions over x<id> variables."""

    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect_op(self, symbol: str):
        kind, value = self.take()
        if kind != "op" or value != symbol:
            raise ExpressionSyntaxError(
                f"expected {symbol!r} in {self.text!r}, got {value!r}"
            )

    def parse(self) -> Expr:
        e = self.expr()
        kind, value = self.peek()
        if kind is not None:
            raise ExpressionSyntaxError(f"trailing input {value!r} in {self.text!r}")
        return e

    def expr(self) -> Expr:
        node = self.term()
        while True:
            kind, value = self.peek()
            if kind == "op" and value in "+-":
                self.take()
                rhs = self.term()
                node = add(node, rhs) if value == "+" else sub(node, rhs)
            else:
                return node

    def term(self) -> Expr:
        node = self.factor()
        while True:
            kind, value = self.peek()
            if kind == "op" and value in "*/":
                self.take()
                rhs = self.factor()
                node = mul(node, rhs) if value == "*" else div(node, rhs)
            else:
                return node

    def factor(self) -> Expr:
        kind, value = self.peek()
        if kind == "op" and value in "+-":
            self.take()
            inner = self.factor()
            return inner if value == "+" else neg(inner)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, value = self.peek()
        if kind == "op" and value == "^":
            self.take()
            return power(base, self.exponent_literal())
        return base

    def exponent_literal(self) -> float:
        sign = 1.0
        kind, value = self.peek()
        if kind == "op" and value in "+-":
            self.take()
            if value == "-":
                sign = -1.0
            kind, value = self.peek()
        if kind != "num":
            raise ExpressionSyntaxError(
                f"exponent must be a numeric literal in {self.text!r}"
            )
        self.take()
        return sign * float(value)

    def atom(self) -> Expr:
        kind, value = self.take()
        if kind == "num":
            return const(float(value))
        if kind == "ident":
            m = _VAR_RE.match(value)
            if m:
                return variable(int(m.group(1)))
            if value in _FUNCTIONS:
                self.expect_op("(")
                inner = self.expr()
                self.expect_op(")")
                return _FUNCTIONS[value](inner)
            raise ExpressionSyntaxError(f"unknown identifier {value!r} in {self.text!r}")
        if kind == "op" and value == "(":
            inner = self.expr()
            self.expect_op(")")
            return inner
        raise ExpressionSyntaxError(
            f"unexpected token {value!r} in {self.text!r}"
            if value is not None
            else f"unexpected end of input in {self.text!r}"
        )


def parse_expression(text: str) -> Expr:
    """Parse infix expression text into an Expr tree."""
    if not isinstance(text, str) or not text.strip():
        raise ExpressionSyntaxError("empty expression")
    return _Parser(text).parse()


_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 10, 20, 30, 40, 50


def _format_number(value: float) -> str:
    return repr(float(value))


def _fmt(expr: Expr) -> tuple[str, int]:
    op = expr.op
    if op == "const":
        s = _format_number(expr.value)
        return s, (_PREC_NEG if s.startswith("-") else _PREC_ATOM)
    if op == "var":
        return f"x{expr.var}", _PREC_ATOM
    if op in ("add", "sub"):
        ls, lp = _fmt(expr.args[0])
        rs, rp = _fmt(expr.args[1])
        if lp < _PREC_ADD:
            ls = f"({ls})"
        if rp <= _PREC_ADD:
            rs = f"({rs})"
        return f"{ls} {'+' if op == 'add' else '-'} {rs}", _PREC_ADD
    if op in ("mul", "div"):
        ls, lp = _fmt(expr.args[0])
        rs, rp = _fmt(expr.args[1])
        if lp < _PREC_MUL:
            ls = f"({ls})"
        if rp <= _PREC_MUL:
            rs = f"({rs})"
        return f"{ls}{'*' if op == 'mul' else '/'}{rs}", _PREC_MUL
    if op == "neg":
        s, p = _fmt(expr.args[0])
        if p < _PREC_NEG:
            s = f"({s})"
        return f"-{s}", _PREC_NEG
    if op in ("pow", "square"):
        s, p = _fmt(expr.args[0])
        if p < _PREC_ATOM:
            s = f"({s})"
        exponent = 2.0 if op == "square" else expr.value
        es = _format_number(exponent)
        if es.endswith(".0"):
            es = es[:-2]
        return f"{s}^{es}", _PREC_POW
    if op in ("exp", "log", "sqrt"):
        s, _ = _fmt(expr.args[0])
        return f"{op}({s})", _PREC_ATOM
    raise ValueError(f"unknown expression op {op!r}")


def to_string(expr: Expr) -> str:
    """Render an Expr as parseable infix text; parse(to_string(e)) == e."""
    return _fmt(expr)[0]
