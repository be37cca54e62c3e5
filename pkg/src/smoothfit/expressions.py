"""Small expression language for problem coefficients.

Coefficients are stored as expression trees over
``{+, -, *, /, ^, exp, log, abs, max, min, pos}`` in variables ``x1..xn``,
``a1..ad`` and named constants, so problem configs are serializable and runs
reproducible. Evaluation is numpy-vectorized. Directional derivatives are
computed by forward-mode differentiation of the tree (exact chain rule), with
explicit detection of kink points of ``abs``/``pos``/``max``/``min``.

Grammar (see docs/formats.md):

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" unary)?          # right-associative
    atom   := NUMBER | IDENT | IDENT "(" expr ("," expr)* ")" | "(" expr ")"
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = [
    "ExpressionError",
    "EvaluationDomainError",
    "NondifferentiableError",
    "Expression",
    "parse_expression",
]


class ExpressionError(ValueError):
    """Malformed expression text or invalid evaluation environment."""


class EvaluationDomainError(ExpressionError):
    """Evaluation hit a domain failure (log of negative, division by zero, ...)."""


class NondifferentiableError(ExpressionError):
    """A kink of abs/pos/max/min was hit with a non-zero tangent."""


_FUNCTIONS_1 = ("exp", "log", "abs", "pos")
_FUNCTIONS_2 = ("max", "min")

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>\*\*|[()+\-*/^,]))"
)

# switch-argument magnitude below which a kink with non-zero tangent is flagged
_KINK_TOL = 1e-12


@dataclass(frozen=True)
class _Node:
    op: str
    args: tuple

    def __str__(self) -> str:
        return _format(self)


class Expression:
    """Parsed expression; evaluate and differentiate against named variables."""

    def __init__(self, root: _Node, text: str):
        self._root = root
        self.text = text

    def __repr__(self) -> str:
        return f"Expression({self.text!r})"

    def variables(self) -> set[str]:
        out: set[str] = set()
        _collect_vars(self._root, out)
        return out

    def evaluate(self, env: Mapping[str, float | np.ndarray]):
        """Evaluate over an environment of scalars/arrays (numpy broadcasting)."""
        with np.errstate(divide="raise", invalid="raise"):
            try:
                val = _eval(self._root, env)
            except FloatingPointError as exc:
                raise EvaluationDomainError(
                    f"domain failure evaluating {self.text!r}: {exc}"
                ) from exc
        if np.ndim(val) == 0:
            return float(val)
        return np.asarray(val, dtype=float)

    def directional_derivative(self, env: Mapping[str, float | np.ndarray],
                               tangent: Mapping[str, float | np.ndarray]):
        """Forward-mode derivative along the given tangent of the variables.

        Variables absent from `tangent` are treated as held fixed. Raises
        NondifferentiableError when a switch point of abs/pos/max/min is hit
        with a non-zero incoming tangent.
        """
        with np.errstate(divide="raise", invalid="raise"):
            try:
                _, dot = _eval_jvp(self._root, env, tangent)
            except FloatingPointError as exc:
                raise EvaluationDomainError(
                    f"domain failure differentiating {self.text!r}: {exc}"
                ) from exc
        if np.ndim(dot) == 0:
            return float(dot)
        return np.asarray(dot, dtype=float)

    def univariate_jet(self, var: str, value: float,
                       env: Mapping[str, float] | None = None) -> tuple[float, float, float]:
        """(f, f', f'') of the expression seen as a function of one variable."""
        full = dict(env or {})
        full[var] = float(value)
        with np.errstate(divide="raise", invalid="raise"):
            try:
                f, d1, d2 = _eval_jet(self._root, full, var)
            except FloatingPointError as exc:
                raise EvaluationDomainError(
                    f"domain failure in jet of {self.text!r}: {exc}"
                ) from exc
        return float(f), float(d1), float(d2)


def parse_expression(text: str) -> Expression:
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("empty expression")
    tokens = _tokenize(text)
    parser = _Parser(tokens, text)
    root = parser.parse_expr()
    parser.expect_end()
    return Expression(root, text.strip())


# ---------------------------------------------------------------------------
# tokenizer / parser

def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            rest = text[pos:].strip()
            if not rest:
                break
            raise ExpressionError(f"cannot tokenize near {rest[:12]!r} in {text!r}")
        pos = m.end()
        if m.lastgroup == "num":
            tokens.append(("num", m.group("num")))
        elif m.lastgroup == "ident":
            tokens.append(("ident", m.group("ident")))
        else:
            op = m.group("op")
            tokens.append(("op", "^" if op == "**" else op))
    return tokens


class _Parser:
    def __init__(self, tokens, text):
        self.tokens = tokens
        self.text = text
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect_op(self, op):
        kind, val = self.take()
        if kind != "op" or val != op:
            raise ExpressionError(f"expected {op!r} in {self.text!r}")

    def expect_end(self):
        if self.pos != len(self.tokens):
            raise ExpressionError(f"trailing tokens after expression in {self.text!r}")

    def parse_expr(self) -> _Node:
        node = self.parse_term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            _, op = self.take()
            rhs = self.parse_term()
            node = _Node("add" if op == "+" else "sub", (node, rhs))
        return node

    def parse_term(self) -> _Node:
        node = self.parse_unary()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            _, op = self.take()
            rhs = self.parse_unary()
            node = _Node("mul" if op == "*" else "div", (node, rhs))
        return node

    def parse_unary(self) -> _Node:
        if self.peek() == ("op", "-"):
            self.take()
            return _Node("neg", (self.parse_unary(),))
        return self.parse_power()

    def parse_power(self) -> _Node:
        base = self.parse_atom()
        if self.peek() == ("op", "^"):
            self.take()
            exponent = self.parse_unary()
            return _Node("pow", (base, exponent))
        return base

    def parse_atom(self) -> _Node:
        kind, val = self.take()
        if kind == "num":
            return _Node("num", (float(val),))
        if kind == "ident":
            if self.peek() == ("op", "("):
                self.take()
                args = [self.parse_expr()]
                while self.peek() == ("op", ","):
                    self.take()
                    args.append(self.parse_expr())
                self.expect_op(")")
                if val in _FUNCTIONS_1:
                    if len(args) != 1:
                        raise ExpressionError(f"{val} takes 1 argument")
                elif val in _FUNCTIONS_2:
                    if len(args) != 2:
                        raise ExpressionError(f"{val} takes 2 arguments")
                else:
                    raise ExpressionError(f"unknown function {val!r}")
                return _Node(val, tuple(args))
            return _Node("var", (val,))
        if kind == "op" and val == "(":
            node = self.parse_expr()
            self.expect_op(")")
            return node
        raise ExpressionError(f"unexpected token {val!r} in {self.text!r}")


def _collect_vars(node: _Node, out: set[str]):
    if node.op == "var":
        out.add(node.args[0])
    elif node.op != "num":
        for a in node.args:
            _collect_vars(a, out)


def _format(node: _Node) -> str:
    op = node.op
    if op == "num":
        return repr(node.args[0])
    if op == "var":
        return node.args[0]
    if op == "neg":
        return f"-({_format(node.args[0])})"
    if op in ("add", "sub", "mul", "div", "pow"):
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}[op]
        return f"({_format(node.args[0])} {sym} {_format(node.args[1])})"
    inner = ", ".join(_format(a) for a in node.args)
    return f"{op}({inner})"


# ---------------------------------------------------------------------------
# evaluation

def _lookup(env: Mapping, name: str):
    try:
        return env[name]
    except KeyError:
        raise ExpressionError(f"unknown identifier {name!r}") from None


def _eval(node: _Node, env: Mapping):
    op = node.op
    if op == "num":
        return node.args[0]
    if op == "var":
        return np.asarray(_lookup(env, node.args[0]), dtype=float)
    if op == "neg":
        return -_eval(node.args[0], env)
    if op in ("add", "sub", "mul", "div", "pow"):
        a = _eval(node.args[0], env)
        b = _eval(node.args[1], env)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        if op == "mul":
            return a * b
        if op == "div":
            return a / b
        return np.power(a, b)
    a = _eval(node.args[0], env)
    if op == "exp":
        return np.exp(a)
    if op == "log":
        return np.log(a)
    if op == "abs":
        return np.abs(a)
    if op == "pos":
        return np.maximum(a, 0.0)
    b = _eval(node.args[1], env)
    if op == "max":
        return np.maximum(a, b)
    if op == "min":
        return np.minimum(a, b)
    raise ExpressionError(f"unknown node {op!r}")


def _kink_guard(arg, tangent, what: str):
    near = np.abs(arg) <= _KINK_TOL
    moving = np.abs(tangent) > _KINK_TOL
    if np.any(near & moving):
        raise NondifferentiableError(f"{what} evaluated at a switch point with non-zero tangent")


def _eval_jvp(node: _Node, env: Mapping, tan: Mapping):
    """Return (value, directional derivative) for the tangent seeding."""
    op = node.op
    if op == "num":
        return node.args[0], 0.0
    if op == "var":
        name = node.args[0]
        v = np.asarray(_lookup(env, name), dtype=float)
        d = np.asarray(tan.get(name, 0.0), dtype=float)
        return v, d
    if op == "neg":
        v, d = _eval_jvp(node.args[0], env, tan)
        return -v, -d
    if op in ("add", "sub", "mul", "div", "pow"):
        va, da = _eval_jvp(node.args[0], env, tan)
        vb, db = _eval_jvp(node.args[1], env, tan)
        if op == "add":
            return va + vb, da + db
        if op == "sub":
            return va - vb, da - db
        if op == "mul":
            return va * vb, da * vb + va * db
        if op == "div":
            return va / vb, (da * vb - va * db) / (vb * vb)
        val = np.power(va, vb)
        if _is_constant(node.args[1]):
            return val, vb * np.power(va, vb - 1.0) * da
        return val, val * (db * np.log(va) + vb * da / va)
    va, da = _eval_jvp(node.args[0], env, tan)
    if op == "exp":
        v = np.exp(va)
        return v, v * da
    if op == "log":
        return np.log(va), da / va
    if op == "abs":
        _kink_guard(va, da, "abs")
        return np.abs(va), np.sign(va) * da
    if op == "pos":
        _kink_guard(va, da, "pos")
        return np.maximum(va, 0.0), np.where(va > 0, da, 0.0)
    vb, db = _eval_jvp(node.args[1], env, tan)
    gap = va - vb
    if op == "max":
        _kink_guard(gap, da - db, "max")
        return np.maximum(va, vb), np.where(gap >= 0, da, db)
    if op == "min":
        _kink_guard(gap, da - db, "min")
        return np.minimum(va, vb), np.where(gap <= 0, da, db)
    raise ExpressionError(f"unknown node {op!r}")


def _is_constant(node: _Node) -> bool:
    if node.op == "num":
        return True
    if node.op == "var":
        return False
    return all(_is_constant(a) for a in node.args)


def _eval_jet(node: _Node, env: Mapping, var: str):
    """Second-order jet (f, f', f'') with respect to one scalar variable."""
    op = node.op
    if op == "num":
        return node.args[0], 0.0, 0.0
    if op == "var":
        name = node.args[0]
        v = float(_lookup(env, name))
        return (v, 1.0, 0.0) if name == var else (v, 0.0, 0.0)
    if op == "neg":
        f, d1, d2 = _eval_jet(node.args[0], env, var)
        return -f, -d1, -d2
    if op in ("add", "sub"):
        fa, da, dda = _eval_jet(node.args[0], env, var)
        fb, db, ddb = _eval_jet(node.args[1], env, var)
        s = 1.0 if op == "add" else -1.0
        return fa + s * fb, da + s * db, dda + s * ddb
    if op == "mul":
        fa, da, dda = _eval_jet(node.args[0], env, var)
        fb, db, ddb = _eval_jet(node.args[1], env, var)
        return fa * fb, da * fb + fa * db, dda * fb + 2.0 * da * db + fa * ddb
    if op == "div":
        fa, da, dda = _eval_jet(node.args[0], env, var)
        fb, db, ddb = _eval_jet(node.args[1], env, var)
        f = fa / fb
        d1 = (da - f * db) / fb
        d2 = (dda - 2.0 * d1 * db - f * ddb) / fb
        return f, d1, d2
    if op == "pow":
        fa, da, dda = _eval_jet(node.args[0], env, var)
        if _is_constant(node.args[1]):
            p = _eval(node.args[1], {})
            f = fa**p
            d1 = p * fa ** (p - 1.0) * da if p != 0 else 0.0
            d2 = p * (p - 1.0) * fa ** (p - 2.0) * da * da + p * fa ** (p - 1.0) * dda
            return f, d1, d2
        # general u^v via exp(v log u)
        fb, db, ddb = _eval_jet(node.args[1], env, var)
        lg, lg1, lg2 = np.log(fa), da / fa, (dda - da * da / fa) / fa
        e = fb * lg
        e1 = db * lg + fb * lg1
        e2 = ddb * lg + 2.0 * db * lg1 + fb * lg2
        f = np.exp(e)
        return f, f * e1, f * (e2 + e1 * e1)
    if op == "exp":
        fa, da, dda = _eval_jet(node.args[0], env, var)
        f = np.exp(fa)
        return f, f * da, f * (dda + da * da)
    if op == "log":
        fa, da, dda = _eval_jet(node.args[0], env, var)
        return np.log(fa), da / fa, (dda - da * da / fa) / fa
    if op == "abs":
        fa, da, dda = _eval_jet(node.args[0], env, var)
        if abs(fa) <= _KINK_TOL and (abs(da) > _KINK_TOL or abs(dda) > _KINK_TOL):
            raise NondifferentiableError("abs jet at a switch point")
        s = 1.0 if fa >= 0 else -1.0
        return abs(fa), s * da, s * dda
    if op == "pos":
        fa, da, dda = _eval_jet(node.args[0], env, var)
        if abs(fa) <= _KINK_TOL and (abs(da) > _KINK_TOL or abs(dda) > _KINK_TOL):
            raise NondifferentiableError("pos jet at a switch point")
        if fa > 0:
            return fa, da, dda
        return 0.0, 0.0, 0.0
    if op in ("max", "min"):
        ja = _eval_jet(node.args[0], env, var)
        jb = _eval_jet(node.args[1], env, var)
        gap = ja[0] - jb[0]
        if abs(gap) <= _KINK_TOL and (abs(ja[1] - jb[1]) > _KINK_TOL):
            raise NondifferentiableError(f"{op} jet at a switch point")
        if op == "max":
            return ja if gap >= 0 else jb
        return ja if gap <= 0 else jb
    raise ExpressionError(f"unknown node {op!r}")
