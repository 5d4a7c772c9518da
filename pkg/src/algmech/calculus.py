"""Expression language and derivative-evaluation contract.

Expressions are small immutable ASTs built by :func:`parse` or by the
folding constructors (:func:`add`, :func:`mul`, ...).  A :class:`SmoothField`
maps named input vectors to a scalar, vector, matrix or 3-array and returns
values together with first and second partial derivatives.  Expression
backed fields propagate second-order forward-mode jets through code that is
generated once per field; opaque callables fall back to central differences.
"""
from __future__ import annotations

import itertools
import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt")
REJECTED_FUNCTIONS = ("abs", "sign", "min", "max", "floor", "ceil")


class ExpressionError(ValueError):
    """Problem with an expression source, carrying a 1-based position."""

    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"{message} (line {line}, column {column})")
        self.message = message
        self.line = line
        self.column = column


class ParseError(ExpressionError):
    pass


class UnknownIdentifierError(ParseError):
    pass


class ArityError(ParseError):
    pass


class EvaluationError(ArithmeticError):
    """Non-finite or undefined intermediate value."""

    def __init__(self, message: str, subexpression: str | None = None):
        super().__init__(message if subexpression is None else f"{message}: {subexpression}")
        self.subexpression = subexpression


# --------------------------------------------------------------------------
# AST


class Expr:
    """Base class of expression nodes (hash cached per node)."""

    __slots__ = ()

    def __hash__(self) -> int:
        h = self.__dict__.get("_hash")
        if h is None:
            h = hash((type(self).__name__,) + self._key())
            object.__setattr__(self, "_hash", h)
        return h

    def _key(self) -> tuple:
        raise NotImplementedError

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True, eq=True)
class Num(Expr):
    value: float

    def _key(self):
        return (self.value,)

    __hash__ = Expr.__hash__


@dataclass(frozen=True, eq=True)
class Var(Expr):
    name: str

    def _key(self):
        return (self.name,)

    __hash__ = Expr.__hash__


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    arg: Expr

    def _key(self):
        return (hash(self.arg),)

    __hash__ = Expr.__hash__


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def _key(self):
        return (self.op, hash(self.left), hash(self.right))

    __hash__ = Expr.__hash__


@dataclass(frozen=True, eq=True)
class Pow(Expr):
    base: Expr
    exponent: int

    def _key(self):
        return (hash(self.base), self.exponent)

    __hash__ = Expr.__hash__


@dataclass(frozen=True, eq=True)
class Call(Expr):
    func: str
    arg: Expr

    def _key(self):
        return (self.func, hash(self.arg))

    __hash__ = Expr.__hash__


Expression = Expr
ZERO = Num(0.0)
ONE = Num(1.0)


def as_expr(value: Expr | float | int | str, variables: Iterable[str] | None = None) -> Expr:
    """Coerce numbers and source strings to expressions."""
    if isinstance(value, Expr):
        return value
    if isinstance(value, str):
        return parse(value, variables if variables is not None else _AnyName())
    return Num(float(value))


class _AnyName:
    def __contains__(self, item):
        return True


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r\n]+)"
    r"|(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
    r"|(?P<minus>−)"
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(source: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        col = pos - line_start + 1
        if kind == "ws":
            for k, ch in enumerate(text):
                if ch == "\n":
                    line += 1
                    line_start = pos + k + 1
        elif kind == "minus":
            toks.append(_Tok("op", "-", line, col))
        else:
            toks.append(_Tok(kind, text, line, col))
        pos = m.end()
    toks.append(_Tok("end", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, source: str, variables):
        self.toks = _tokenize(source)
        self.i = 0
        self.variables = variables

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def fail(self, tok: _Tok, message: str, cls=ParseError):
        raise cls(message, tok.line, tok.column)

    def expect(self, text: str) -> _Tok:
        tok = self.take()
        if tok.text != text or tok.kind != "op":
            what = "end of input" if tok.kind == "end" else repr(tok.text)
            self.fail(tok, f"expected {text!r}, found {what}")
        return tok

    def parse(self) -> Expr:
        if self.peek().kind == "end":
            self.fail(self.peek(), "empty expression")
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            self.fail(tok, f"unexpected {tok.text!r}")
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.take().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.take().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "-":
            self.take()
            return Neg(self.unary())
        return self.factor()

    def factor(self) -> Expr:
        base = self.base()
        tok = self.peek()
        if tok.kind == "op" and tok.text == "^":
            self.take()
            sign = 1
            if self.peek().kind == "op" and self.peek().text == "-":
                self.take()
                sign = -1
            num = self.take()
            if num.kind != "num" or not num.text.isdigit():
                self.fail(num, "exponent must be an integer literal")
            return Pow(base, sign * int(num.text))
        return base

    def base(self) -> Expr:
        tok = self.take()
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "id":
            name = tok.text
            if name in REJECTED_FUNCTIONS:
                self.fail(tok, f"non-smooth function {name!r} is not supported")
            if name in FUNCTIONS:
                nxt = self.peek()
                if not (nxt.kind == "op" and nxt.text == "("):
                    self.fail(tok, f"function {name!r} takes one parenthesised argument", ArityError)
                self.take()
                if self.peek().kind == "op" and self.peek().text == ")":
                    self.fail(self.peek(), f"function {name!r} takes exactly one argument", ArityError)
                arg = self.expr()
                close = self.peek()
                if close.kind == "op" and close.text == ",":
                    self.fail(close, f"function {name!r} takes exactly one argument", ArityError)
                self.expect(")")
                return Call(name, arg)
            if name not in self.variables:
                self.fail(tok, f"unknown identifier {name!r}", UnknownIdentifierError)
            return Var(name)
        what = "end of input" if tok.kind == "end" else repr(tok.text)
        self.fail(tok, f"unexpected {what}")


def parse(source: str, variables: Iterable[str]) -> Expr:
    """Parse ``source`` over the declared variable names."""
    if not isinstance(variables, (set, frozenset, dict, _AnyName)):
        variables = set(variables)
    return _Parser(source, variables).parse()


def variable_names(**groups: int) -> list[str]:
    """``variable_names(x=2, y=1)`` -> ``['x1', 'x2', 'y1']``."""
    return [f"{g}{i + 1}" for g, k in groups.items() for i in range(k)]


# --------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return 3
    if isinstance(e, Pow):
        return 4
    if isinstance(e, Num) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return 0
    return 5


def _num_text(v: float) -> str:
    if not math.isfinite(v):
        raise EvaluationError("non-finite literal", repr(v))
    text = repr(float(v))
    return f"({text})" if text.startswith("-") else text


def to_source(e: Expr) -> str:
    """Print an expression so that :func:`parse` rebuilds an equal tree."""
    if isinstance(e, Num):
        return _num_text(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_source(e.arg)})"
    if isinstance(e, Neg):
        inner = to_source(e.arg)
        return "-" + (f"({inner})" if _prec(e.arg) < 3 else inner)
    if isinstance(e, Pow):
        inner = to_source(e.base)
        if _prec(e.base) < 5:
            inner = f"({inner})"
        return f"{inner}^{e.exponent}"
    p = _PREC[e.op]
    left = to_source(e.left)
    right = to_source(e.right)
    if _prec(e.left) < p:
        left = f"({left})"
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {e.op} {right}" if p == 1 else f"{left}*{right}" if e.op == "*" else f"{left}/{right}"


# --------------------------------------------------------------------------
# folding constructors, free variables, differentiation, substitution


def _isnum(e: Expr, value: float | None = None) -> bool:
    return isinstance(e, Num) and (value is None or e.value == value)


def add(a: Expr, b: Expr) -> Expr:
    if _isnum(a, 0.0):
        return b
    if _isnum(b, 0.0):
        return a
    if _isnum(a) and _isnum(b):
        return Num(a.value + b.value)
    if isinstance(b, Neg):
        return BinOp("-", a, b.arg)
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _isnum(b, 0.0):
        return a
    if _isnum(a, 0.0):
        return neg(b)
    if _isnum(a) and _isnum(b):
        return Num(a.value - b.value)
    if isinstance(b, Neg):
        return BinOp("+", a, b.arg)
    return BinOp("-", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def mul(a: Expr, b: Expr) -> Expr:
    if _isnum(a, 0.0) or _isnum(b, 0.0):
        return ZERO
    if _isnum(a, 1.0):
        return b
    if _isnum(b, 1.0):
        return a
    if _isnum(a, -1.0):
        return neg(b)
    if _isnum(b, -1.0):
        return neg(a)
    if _isnum(a) and _isnum(b):
        return Num(a.value * b.value)
    if _isnum(b):
        a, b = b, a
    if _isnum(a):
        if isinstance(b, BinOp) and b.op == "*" and _isnum(b.left):
            return mul(Num(a.value * b.left.value), b.right)
        if isinstance(b, Neg):
            return mul(Num(-a.value), b.arg)
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _isnum(a, 0.0):
        return ZERO
    if _isnum(b, 1.0):
        return a
    if _isnum(a) and _isnum(b) and b.value != 0.0:
        return Num(a.value / b.value)
    return BinOp("/", a, b)


def power(a: Expr, n: int) -> Expr:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if _isnum(a) and not (a.value == 0.0 and n < 0):
        return Num(a.value**n)
    return Pow(a, n)


_NUMERIC = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
}


def call(func: str, a: Expr) -> Expr:
    if func not in FUNCTIONS:
        raise ValueError(f"unknown function {func!r}")
    if _isnum(a):
        try:
            return Num(_NUMERIC[func](a.value))
        except (ValueError, OverflowError):
            pass
    return Call(func, a)


def total(terms: Iterable[Expr]) -> Expr:
    out = ZERO
    for t in terms:
        out = add(out, t)
    return out


def free_variables(e: Expr) -> frozenset[str]:
    fv = e.__dict__.get("_free")
    if fv is not None:
        return fv
    if isinstance(e, Num):
        fv = frozenset()
    elif isinstance(e, Var):
        fv = frozenset((e.name,))
    elif isinstance(e, BinOp):
        fv = free_variables(e.left) | free_variables(e.right)
    elif isinstance(e, (Neg, Call)):
        fv = free_variables(e.arg)
    else:
        fv = free_variables(e.base)
    object.__setattr__(e, "_free", fv)
    return fv


def diff(e: Expr, name: str) -> Expr:
    """Symbolic partial derivative with constant folding."""
    memo: dict[int, Expr] = {}

    def d(u: Expr) -> Expr:
        if name not in free_variables(u):
            return ZERO
        key = id(u)
        if key in memo:
            return memo[key]
        if isinstance(u, Var):
            out = ONE
        elif isinstance(u, Neg):
            out = neg(d(u.arg))
        elif isinstance(u, BinOp):
            a, b = u.left, u.right
            if u.op == "+":
                out = add(d(a), d(b))
            elif u.op == "-":
                out = sub(d(a), d(b))
            elif u.op == "*":
                out = add(mul(d(a), b), mul(a, d(b)))
            else:
                out = sub(div(d(a), b), div(mul(a, d(b)), power(b, 2)))
        elif isinstance(u, Pow):
            n = u.exponent
            out = mul(mul(Num(float(n)), power(u.base, n - 1)), d(u.base))
        else:
            a, da = u.arg, d(u.arg)
            if u.func == "sin":
                out = mul(call("cos", a), da)
            elif u.func == "cos":
                out = neg(mul(call("sin", a), da))
            elif u.func == "tan":
                out = mul(add(ONE, power(call("tan", a), 2)), da)
            elif u.func == "exp":
                out = mul(call("exp", a), da)
            elif u.func == "log":
                out = div(da, a)
            else:
                out = div(da, mul(Num(2.0), call("sqrt", a)))
        memo[key] = out
        return out

    return d(e)


def substitute(e: Expr, mapping: Mapping[str, Expr | float]) -> Expr:
    """Replace variables, re-folding constants on the way up."""
    repl = {k: as_expr(v) for k, v in mapping.items()}
    keys = frozenset(repl)
    memo: dict[int, Expr] = {}

    def s(u: Expr) -> Expr:
        if not (free_variables(u) & keys):
            return u
        key = id(u)
        if key in memo:
            return memo[key]
        if isinstance(u, Var):
            out = repl[u.name]
        elif isinstance(u, Neg):
            out = neg(s(u.arg))
        elif isinstance(u, BinOp):
            a, b = s(u.left), s(u.right)
            out = {"+": add, "-": sub, "*": mul, "/": div}[u.op](a, b)
        elif isinstance(u, Pow):
            out = power(s(u.base), u.exponent)
        else:
            out = call(u.func, s(u.arg))
        memo[key] = out
        return out

    return s(e)


def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """Plain float evaluation (no derivatives)."""
    fn = compile_jet([e], sorted(free_variables(e)), 0)
    vals, _, _ = fn(np.array([env[n] for n in sorted(free_variables(e))], dtype=float))
    return float(vals[0])


# --------------------------------------------------------------------------
# compiled second-order forward mode


class _Emitter:
    """Straight-line code for value/gradient/Hessian propagation."""

    def __init__(self, names: Sequence[str], order: int):
        self.index = {n: i for i, n in enumerate(names)}
        self.order = order
        self.lines: list[str] = []
        self.count = itertools.count()
        self.memo: dict[Expr, tuple] = {}
        self.subexprs: list[str] = []

    def tmp(self, code: str) -> str:
        name = f"t{next(self.count)}"
        self.lines.append(f"    {name} = {code}")
        return name

    @staticmethod
    def lit(v: float) -> str:
        text = repr(float(v))
        return f"({text})" if text.startswith("-") else text

    @staticmethod
    def prod(*factors):
        if any(f is None for f in factors):
            return None
        fs = [f for f in factors if f != "1.0"]
        if not fs:
            return "1.0"
        return "*".join(fs)

    def combine(self, terms) -> str | None:
        """Sum of (sign, code) pairs, zero terms dropped."""
        parts = [(s, c) for s, c in terms if c is not None]
        if not parts:
            return None
        if len(parts) == 1 and parts[0][0] == "+" and "*" not in parts[0][1] and "/" not in parts[0][1]:
            return parts[0][1]
        code = ""
        for k, (s, c) in enumerate(parts):
            if k == 0:
                code = c if s == "+" else f"-{c}"
            else:
                code += f" {s} {c}"
        return self.tmp(code)

    def check(self, cond: str, k: int, what: str):
        self.lines.append(f"    if {cond}: raise _Err({k}, {what!r})")

    def node(self, e: Expr):
        got = self.memo.get(e)
        if got is not None:
            return got
        out = self._node(e)
        self.memo[e] = out
        return out

    def _node(self, e: Expr):
        first, second = self.order >= 1, self.order >= 2
        if isinstance(e, Num):
            return self.lit(e.value), {}, {}
        if isinstance(e, Var):
            if e.name not in self.index:
                raise UnknownIdentifierError(f"unknown identifier {e.name!r}")
            i = self.index[e.name]
            return self.tmp(f"a[{i}]"), ({i: "1.0"} if first else {}), {}
        if isinstance(e, Neg):
            v, g, h = self.node(e.arg)
            return (
                self.tmp(f"-{v}"),
                {i: self.tmp(f"-{c}") for i, c in g.items()},
                {ij: self.tmp(f"-{c}") for ij, c in h.items()},
            )
        if isinstance(e, BinOp):
            va, ga, ha = self.node(e.left)
            vb, gb, hb = self.node(e.right)
            deps = sorted(set(ga) | set(gb))
            pairs = [(i, j) for i in deps for j in deps if i <= j] if second else []
            if e.op in "+-":
                s = e.op
                v = self.tmp(f"{va} {s} {vb}")
                g = {i: self.combine([("+", ga.get(i)), (s, gb.get(i))]) for i in deps}
                h = {ij: self.combine([("+", ha.get(ij)), (s, hb.get(ij))]) for ij in pairs}
            elif e.op == "*":
                v = self.tmp(f"{va}*{vb}")
                g = {i: self.combine([("+", self.prod(va, gb.get(i))), ("+", self.prod(vb, ga.get(i)))]) for i in deps}
                h = {
                    (i, j): self.combine(
                        [
                            ("+", self.prod(va, hb.get((i, j)))),
                            ("+", self.prod(vb, ha.get((i, j)))),
                            ("+", self.prod(ga.get(i), gb.get(j))),
                            ("+", self.prod(ga.get(j), gb.get(i))),
                        ]
                    )
                    for i, j in pairs
                }
            else:
                k = self._register(e)
                self.check(f"{vb} == 0.0", k, "division by zero")
                v = self.tmp(f"{va}/{vb}")
                g = {}
                for i in deps:
                    num = self.combine([("+", ga.get(i)), ("-", self.prod(v, gb.get(i)))])
                    g[i] = None if num is None else self.tmp(f"{num}/{vb}")
                h = {}
                for i, j in pairs:
                    num = self.combine(
                        [
                            ("+", ha.get((i, j))),
                            ("-", self.prod(v, hb.get((i, j)))),
                            ("-", self.prod(g.get(i), gb.get(j))),
                            ("-", self.prod(g.get(j), gb.get(i))),
                        ]
                    )
                    h[(i, j)] = None if num is None else self.tmp(f"{num}/{vb}")
            return v, {i: c for i, c in g.items() if c is not None}, {ij: c for ij, c in h.items() if c is not None}
        # unary maps: value, first and second derivative in terms of u
        arg = e.base if isinstance(e, Pow) else e.arg
        vu, gu, hu = self.node(arg)
        has = bool(gu)
        k = self._register(e)
        if isinstance(e, Pow):
            n = e.exponent
            if n < 0:
                self.check(f"{vu} == 0.0", k, "zero raised to a negative power")
            v = self.tmp(f"{vu}**{n}")
            f1 = self.tmp(f"{n}*{vu}**{n - 1}") if first and has else None
            f2 = self.tmp(f"{n * (n - 1)}*{vu}**{n - 2}" if n != 2 else "2.0") if second and has else None
        else:
            fn = e.func
            if fn == "log":
                self.check(f"{vu} <= 0.0", k, "log of non-positive value")
            if fn == "sqrt":
                self.check(f"{vu} < 0.0" if not (first and has) else f"{vu} <= 0.0", k, "sqrt outside its smooth domain")
            v = self.tmp(f"_m.{fn}({vu})")
            f1 = f2 = None
            if first and has:
                f1 = self.tmp(
                    {
                        "sin": f"_m.cos({vu})",
                        "cos": f"-_m.sin({vu})",
                        "tan": f"1.0 + {v}*{v}",
                        "exp": v,
                        "log": f"1.0/{vu}",
                        "sqrt": f"0.5/{v}",
                    }[fn]
                )
            if second and has:
                f2 = self.tmp(
                    {
                        "sin": f"-{v}",
                        "cos": f"-{v}",
                        "tan": f"2.0*{v}*{f1}",
                        "exp": v,
                        "log": f"-{f1}*{f1}",
                        "sqrt": f"-0.5*{f1}/{vu}",
                    }[fn]
                )
        g = {i: self.tmp(f"{f1}*{c}") if c != "1.0" else f1 for i, c in gu.items()} if f1 else {}
        h = {}
        if f2 is not None:
            deps = sorted(gu)
            for i in deps:
                for j in deps:
                    if i <= j:
                        h[(i, j)] = self.combine(
                            [("+", self.prod(f1, hu.get((i, j)))), ("+", self.prod(f2, gu[i], gu[j]))]
                        )
            h = {ij: c for ij, c in h.items() if c is not None}
        return v, g, h

    def _register(self, e: Expr) -> int:
        self.subexprs.append(to_source(e))
        return len(self.subexprs) - 1


class _Err(Exception):
    def __init__(self, k: int, what: str):
        self.k = k
        self.what = what


def compile_jet(exprs: Sequence[Expr], names: Sequence[str], order: int) -> Callable:
    """Return ``f(a) -> (values, grads, hessians)`` for flat input ``a``.

    ``grads`` has shape (len(exprs), len(names)) and ``hessians`` shape
    (len(exprs), len(names), len(names)); both are None below the order.
    """
    em = _Emitter(names, order)
    nv = len(names)
    outs = [em.node(e) for e in exprs]
    vals = ", ".join(v for v, _, _ in outs)
    body = list(em.lines)
    body.append(f"    vals = ({vals}{',' if len(outs) == 1 else ''})")
    if order >= 1:
        gl = []
        for _, g, _ in outs:
            gl.extend(g.get(i, "0.0") for i in range(nv))
        body.append(f"    grads = ({', '.join(gl)}{',' if len(gl) == 1 else ''})")
    else:
        body.append("    grads = None")
    if order >= 2:
        hl = []
        for _, _, h in outs:
            for i in range(nv):
                for j in range(nv):
                    hl.append(h.get((min(i, j), max(i, j)), "0.0"))
        body.append(f"    hess = ({', '.join(hl)}{',' if len(hl) == 1 else ''})")
    else:
        body.append("    hess = None")
    body.append("    return vals, grads, hess")
    src = "def _jet(a):\n" + "\n".join(body) + "\n"
    scope = {"_m": math, "_Err": _Err}
    exec(compile(src, "<algmech-jet>", "exec"), scope)
    raw = scope["_jet"]
    subexprs = em.subexprs
    n_out = len(exprs)

    def fn(a):
        a = [float(v) for v in a]
        try:
            vals, grads, hess = raw(a)
        except _Err as err:
            raise EvaluationError(err.what, subexprs[err.k]) from None
        except (OverflowError, ValueError, ZeroDivisionError) as err:
            raise EvaluationError(f"evaluation failed ({err})") from None
        v = np.array(vals, dtype=float)
        g = None if grads is None else np.array(grads, dtype=float).reshape(n_out, nv)
        h = None if hess is None else np.array(hess, dtype=float).reshape(n_out, nv, nv)
        return v, g, h

    return fn


# --------------------------------------------------------------------------
# fields


@dataclass(frozen=True)
class FieldJet:
    """Value with optional first/second partials over the flattened inputs.

    ``grad`` has shape ``value.shape + (N,)`` and ``hess`` shape
    ``value.shape + (N, N)`` where N is the total input length.
    ``tolerance`` is 0 for exact (forward-mode) derivatives.
    """

    value: np.ndarray
    grad: np.ndarray | None
    hess: np.ndarray | None
    slices: Mapping[str, slice]
    tolerance: float = 0.0

    def d(self, name: str) -> np.ndarray:
        return self.grad[..., self.slices[name]]

    def dd(self, a: str, b: str) -> np.ndarray:
        return self.hess[..., self.slices[a], self.slices[b]]


def _slices(inputs: Sequence[tuple[str, int]]) -> dict[str, slice]:
    out, k = {}, 0
    for name, n in inputs:
        out[name] = slice(k, k + n)
        k += n
    return out


class SmoothField(ABC):
    """Function of named input vectors with a derivative contract up to order 2."""

    shape: tuple[int, ...]
    inputs: tuple[tuple[str, int], ...]

    @property
    def size(self) -> int:
        return sum(n for _, n in self.inputs)

    @property
    def slices(self) -> dict[str, slice]:
        return _slices(self.inputs)

    @property
    def exact(self) -> bool:
        return False

    def flat_point(self, *parts) -> np.ndarray:
        if len(parts) != len(self.inputs):
            raise ValueError(f"expected {len(self.inputs)} input blocks, got {len(parts)}")
        arrs = []
        for (name, n), part in zip(self.inputs, parts):
            arr = np.atleast_1d(np.asarray(part, dtype=float)).ravel()
            if arr.size != n:
                raise ValueError(f"input {name!r} has length {arr.size}, expected {n}")
            arrs.append(arr)
        return np.concatenate(arrs) if arrs else np.zeros(0)

    def jet(self, *parts, order: int = 0) -> FieldJet:
        return self.jet_flat(self.flat_point(*parts), order)

    def __call__(self, *parts) -> np.ndarray:
        return self.jet(*parts, order=0).value

    @abstractmethod
    def jet_flat(self, a: np.ndarray, order: int) -> FieldJet: ...


def _shape_size(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape)) if shape else 1


@dataclass(frozen=True, eq=False)
class ExprField(SmoothField):
    """Field whose components are expressions (row-major over ``shape``)."""

    shape: tuple[int, ...]
    inputs: tuple[tuple[str, int], ...]
    exprs: tuple[Expr, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "inputs", tuple((str(n), int(k)) for n, k in self.inputs))
        object.__setattr__(self, "exprs", tuple(as_expr(e) for e in self.exprs))
        if len(self.exprs) != _shape_size(self.shape):
            raise ValueError(f"{len(self.exprs)} expressions for shape {self.shape}")
        declared = set(self.names)
        for e in self.exprs:
            extra = free_variables(e) - declared
            if extra:
                raise UnknownIdentifierError(f"unknown identifier {sorted(extra)[0]!r}")

    @property
    def names(self) -> list[str]:
        return variable_names(**dict(self.inputs))

    @property
    def exact(self) -> bool:
        return True

    def expr_array(self) -> np.ndarray:
        arr = np.empty(len(self.exprs), dtype=object)
        arr[:] = list(self.exprs)
        return arr.reshape(self.shape) if self.shape else arr.reshape(())

    def _fn(self, order: int):
        fn = self._cache.get(order)
        if fn is None:
            fn = compile_jet(self.exprs, self.names, order)
            self._cache[order] = fn
        return fn

    def jet_flat(self, a, order: int) -> FieldJet:
        if order not in (0, 1, 2):
            raise ValueError("derivative order must be 0, 1 or 2")
        v, g, h = self._fn(order)(a)
        n = self.size
        return FieldJet(
            v.reshape(self.shape),
            None if g is None else g.reshape(self.shape + (n,)),
            None if h is None else h.reshape(self.shape + (n, n)),
            self.slices,
        )

    def partial(self, name: str) -> "ExprField":
        """Symbolic partials with respect to an input block (shape + (len,))."""
        sl = self.slices[name]
        vars_ = self.names[sl]
        out = [diff(e, v) for e in self.exprs for v in vars_]
        return ExprField(self.shape + (len(vars_),), self.inputs, tuple(out))

    @classmethod
    def from_sources(
        cls,
        sources,
        inputs: Sequence[tuple[str, int]],
        shape: tuple[int, ...] = (),
        params: Mapping[str, float] | None = None,
    ) -> "ExprField":
        params = dict(params or {})
        names = variable_names(**dict(inputs))
        allowed = set(names) | set(params)
        flat = list(np.asarray(sources, dtype=object).ravel()) if shape else [sources]
        exprs = []
        for src in flat:
            e = parse(src, allowed) if isinstance(src, str) else as_expr(src)
            if params:
                e = substitute(e, params)
            exprs.append(e)
        return cls(tuple(shape), tuple(inputs), tuple(exprs))


@dataclass(frozen=True, eq=False)
class CallableField(SmoothField):
    """Opaque field; derivatives by central differences.

    First derivatives use h = cbrt(eps)*max(1,|a_i|); second derivatives use
    h = eps**0.25*max(1,|a_i|) to balance truncation against cancellation.
    """

    shape: tuple[int, ...]
    inputs: tuple[tuple[str, int], ...]
    func: Callable[..., np.ndarray]

    def _eval(self, a):
        sl = self.slices
        parts = [a[sl[name]] for name, _ in self.inputs]
        out = np.asarray(self.func(*parts), dtype=float).reshape(self.shape)
        if not np.all(np.isfinite(out)):
            raise EvaluationError("non-finite value from opaque field", f"at {list(a)}")
        return out

    def jet_flat(self, a, order: int) -> FieldJet:
        a = np.asarray(a, dtype=float)
        n = a.size
        v = self._eval(a)
        g = h = None
        tol = 0.0
        if order >= 1:
            eps = np.finfo(float).eps
            g = np.zeros(self.shape + (n,))
            for i in range(n):
                step = eps ** (1 / 3) * max(1.0, abs(a[i]))
                e = np.zeros(n)
                e[i] = step
                g[..., i] = (self._eval(a + e) - self._eval(a - e)) / (2 * step)
            tol = eps ** (2 / 3)
        if order >= 2:
            eps = np.finfo(float).eps
            h = np.zeros(self.shape + (n, n))
            steps = [eps**0.25 * max(1.0, abs(a[i])) for i in range(n)]
            for i in range(n):
                ei = np.zeros(n)
                ei[i] = steps[i]
                h[..., i, i] = (self._eval(a + ei) - 2 * v + self._eval(a - ei)) / steps[i] ** 2
                for j in range(i + 1, n):
                    ej = np.zeros(n)
                    ej[j] = steps[j]
                    val = (
                        self._eval(a + ei + ej)
                        - self._eval(a + ei - ej)
                        - self._eval(a - ei + ej)
                        + self._eval(a - ei - ej)
                    ) / (4 * steps[i] * steps[j])
                    h[..., i, j] = val
                    h[..., j, i] = val
            tol = eps**0.5
        return FieldJet(v, g, h, self.slices, tol)


def constant_field(values, inputs: Sequence[tuple[str, int]]) -> ExprField:
    arr = np.asarray(values, dtype=float)
    return ExprField(arr.shape, tuple(inputs), tuple(Num(float(v)) for v in arr.ravel()))


def evaluate_with_derivatives(field_: SmoothField, point, order: int = 0) -> FieldJet:
    """Evaluate a field at ``point`` (flat array or name -> array mapping)."""
    if isinstance(point, Mapping):
        parts = [point[name] for name, _ in field_.inputs]
        return field_.jet(*parts, order=order)
    a = np.atleast_1d(np.asarray(point, dtype=float))
    if a.size != field_.size:
        raise ValueError(f"point has length {a.size}, field expects {field_.size}")
    return field_.jet_flat(a, order)
