"""Small arithmetic expression language for spatial fields.

Expressions are written over the slow coordinates ``x1, x2`` and the fast
coordinates ``X1, X2``, e.g. ``"0.25 + 0.05*sin(2*pi*x1)"``.  Grammar::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := primary ('^' unary)?          # right associative
    primary := NUMBER | VARIABLE | 'pi' | FUNC '(' expr ')' | '(' expr ')'

Evaluation works on Python floats and, element-wise, on numpy arrays.
Domain errors (division by zero, square root of a negative number,
non-finite results) raise :class:`EvaluationError` instead of producing NaN.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

VARIABLES = ("x1", "x2", "X1", "X2")
FUNCTIONS = ("sin", "cos", "exp", "sqrt")
CONSTANTS = {"pi": math.pi}

Number = Union[float, np.ndarray]


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


class EvaluationError(ExprError):
    """Unbound variable or a domain error during evaluation."""


# -- tree ---------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Num, Var, Const, Neg, BinOp, Call]


# -- tokenizer ----------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()])"
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def _advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def _error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        raise ExprSyntaxError(message, tok.pos, self.text)

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            if self.tok.text == ")":
                self._error("unbalanced parenthesis")
            self._error(f"unexpected token {self.tok.text!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.text in ("+", "-") and self.tok.kind == "op":
            op = self._advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.text in ("*", "/") and self.tok.kind == "op":
            op = self._advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            self._advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.primary()
        if self.tok.kind == "op" and self.tok.text == "^":
            self._advance()
            return BinOp("^", base, self.unary())
        return base

    def primary(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self._advance()
            return Num(float(tok.text))
        if tok.kind == "name":
            self._advance()
            if tok.text in VARIABLES:
                return Var(tok.text)
            if tok.text in CONSTANTS:
                return Const(tok.text)
            if tok.text in FUNCTIONS:
                if not (self.tok.kind == "op" and self.tok.text == "("):
                    self._error(f"expected '(' after {tok.text}")
                self._advance()
                arg = self.expr()
                self._expect_close()
                return Call(tok.text, arg)
            self._error(f"unknown identifier {tok.text!r}", tok)
        if tok.kind == "op" and tok.text == "(":
            self._advance()
            node = self.expr()
            self._expect_close()
            return node
        if tok.kind == "end":
            self._error("unexpected end of expression")
        self._error(f"unexpected token {tok.text!r}")

    def _expect_close(self):
        if not (self.tok.kind == "op" and self.tok.text == ")"):
            if self.tok.kind == "end":
                self._error("unbalanced parenthesis")
            self._error(f"expected ')' but found {self.tok.text!r}")
        self._advance()


# -- evaluation ---------------------------------------------------------


def _check(value, what: str):
    if np.ndim(value) == 0:
        if not math.isfinite(value):
            raise EvaluationError(f"domain error: {what} is not finite")
    elif not np.all(np.isfinite(value)):
        raise EvaluationError(f"domain error: {what} is not finite")
    return value


def _eval(node: Node, env: Mapping[str, Number]) -> Number:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvaluationError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Const):
        return CONSTANTS[node.name]
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, Call):
        arg = _eval(node.arg, env)
        scalar = np.ndim(arg) == 0
        if node.func == "sqrt":
            if np.any(np.asarray(arg) < 0):
                raise EvaluationError("domain error: sqrt of a negative number")
            return math.sqrt(arg) if scalar else np.sqrt(arg)
        if node.func == "exp":
            with np.errstate(over="ignore"):
                try:
                    out = math.exp(arg) if scalar else np.exp(arg)
                except OverflowError:
                    raise EvaluationError("domain error: exp overflow") from None
            return _check(out, "exp")
        fn = {"sin": (math.sin, np.sin), "cos": (math.cos, np.cos)}[node.func]
        return fn[0](arg) if scalar else fn[1](arg)
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if np.any(np.asarray(b) == 0):
                raise EvaluationError("domain error: division by zero")
            return a / b
        # '^'
        if np.any((np.asarray(a) < 0) & (np.asarray(b) != np.round(b))):
            raise EvaluationError("domain error: negative base with fractional exponent")
        if np.any((np.asarray(a) == 0) & (np.asarray(b) < 0)):
            raise EvaluationError("domain error: zero to a negative power")
        with np.errstate(over="ignore"):
            try:
                out = a**b if np.ndim(a) or np.ndim(b) else math.pow(a, b)
            except OverflowError:
                raise EvaluationError("domain error: power overflow") from None
        return _check(out, "power")
    raise TypeError(f"not an expression node: {node!r}")


def _variables(node: Node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Neg):
        return _variables(node.operand)
    if isinstance(node, Call):
        return _variables(node.arg)
    if isinstance(node, BinOp):
        return _variables(node.left) | _variables(node.right)
    return set()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_NEG_PREC = 3


def _fmt(node: Node) -> tuple[str, int]:
    if isinstance(node, Num):
        return repr(node.value), 5
    if isinstance(node, (Var, Const)):
        return node.name, 5
    if isinstance(node, Call):
        return f"{node.func}({_fmt(node.arg)[0]})", 5
    if isinstance(node, Neg):
        s, p = _fmt(node.operand)
        return "-" + (s if p >= _NEG_PREC else f"({s})"), _NEG_PREC
    prec = _PREC[node.op]
    ls, lp = _fmt(node.left)
    rs, rp = _fmt(node.right)
    if node.op == "^":
        # right associative; the exponent may be a unary minus
        if lp <= prec:
            ls = f"({ls})"
        if rp < _NEG_PREC:
            rs = f"({rs})"
    else:
        if lp < prec:
            ls = f"({ls})"
        if rp <= prec:
            rs = f"({rs})"
    return f"{ls}{node.op}{rs}", prec


@dataclass(frozen=True)
class FieldExpr:
    """Immutable parsed expression."""

    root: Node
    source: str = ""

    @property
    def variables(self) -> frozenset[str]:
        return frozenset(_variables(self.root))

    def evaluate(self, bindings: Mapping[str, Number] | None = None, **kwargs) -> Number:
        env = dict(bindings or {}, **kwargs)
        missing = self.variables - env.keys()
        if missing:
            raise EvaluationError(f"unbound variable {sorted(missing)[0]!r}")
        env = {k: (np.asarray(v, dtype=float) if np.ndim(v) else float(v)) for k, v in env.items()}
        value = _eval(self.root, env)
        shape = np.broadcast_shapes(*(np.shape(v) for v in env.values())) if env else ()
        if shape:
            value = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
        else:
            value = float(value)
        return value

    __call__ = evaluate

    def is_constant(self) -> bool:
        return not self.variables

    def __str__(self) -> str:
        return _fmt(self.root)[0]


def parse(text: str) -> FieldExpr:
    """Parse ``text`` into a :class:`FieldExpr`."""
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0, text)
    if not text.isascii():
        pos = next(i for i, ch in enumerate(text) if not ch.isascii())
        raise ExprSyntaxError("non-ASCII character", pos, text)
    return FieldExpr(_Parser(text).parse(), text)


def evaluate(expr: FieldExpr, bindings: Mapping[str, Number]) -> Number:
    return expr.evaluate(bindings)


def pretty(expr: FieldExpr) -> str:
    """Minimal-parenthesis rendering that reparses to an equivalent tree."""
    return str(expr)


def gradient_fd(expr: FieldExpr, var: str, bindings: Mapping[str, Number], step: float = 1e-5) -> Number:
    """Central difference ``(f(v+step) - f(v-step)) / (2 step)``."""
    if step <= 0:
        raise ValueError("step must be positive")
    if var not in VARIABLES:
        raise ValueError(f"unknown variable {var!r}")
    if var not in expr.variables:
        value = expr.evaluate(bindings)
        return np.zeros_like(value) if np.ndim(value) else 0.0
    env = dict(bindings)
    v = env[var]
    env[var] = v + step
    fp = expr.evaluate(env)
    env[var] = v - step
    fm = expr.evaluate(env)
    return (fp - fm) / (2.0 * step)


def as_expr(value) -> FieldExpr:
    """Coerce strings and numbers to a FieldExpr; FieldExpr instances pass through."""
    if isinstance(value, FieldExpr):
        return value
    if isinstance(value, (int, float)):
        return parse(repr(float(value)))
    return parse(value)
