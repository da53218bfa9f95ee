"""Expression trees for vector fields, resets, guards and goal predicates.

A single node type covers arithmetic and predicates.  Trees are immutable
and hash-consed by structure, so common subexpressions collapse when a tree
is compiled to a :class:`Tape` (a straight-line program shared by the point
code generator and the interval Taylor kernels).

Grammar accepted by :func:`parse` (whitespace-insensitive)::

    pred   := conj ('or' conj)*
    conj   := neg ('and' neg)*
    neg    := 'not' neg | cmp
    cmp    := sum (('<' | '<=' | '>' | '>=' | '=' | '==') sum)?
    sum    := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' ['-'] INT)?
    atom   := NUMBER | NAME | 'exp' '(' pred ')' | '(' pred ')' | 'true' | 'false'

Names must be declared (state dimensions, clocks, parameters or constants);
anything else is rejected with its line and column.
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ModelParseError, PidReachError
from .interval import Box, Interval, as_interval

ARITH_OPS = {"const", "var", "add", "sub", "mul", "div", "neg", "pow", "exp", "pos", "pwc"}
PRED_OPS = {"lt", "le", "gt", "ge", "eq", "and", "or", "not", "true", "false"}


class Expr:
    """Immutable expression node; build with the helpers below or operators."""

    __slots__ = ("op", "args", "val", "_hash")

    def __init__(self, op: str, args: tuple = (), val=None):
        self.op = op
        self.args = args
        self.val = val
        self._hash = hash((op, args, val))

    # structural identity
    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, Expr) or self._hash != other._hash:
            return False
        return self.op == other.op and self.val == other.val and self.args == other.args

    def __reduce__(self):
        return (Expr, (self.op, self.args, self.val))

    @property
    def is_pred(self) -> bool:
        return self.op in PRED_OPS

    def __repr__(self) -> str:
        return to_str(self)

    # arithmetic sugar
    def __add__(self, o):
        return add(self, lift(o))

    def __radd__(self, o):
        return add(lift(o), self)

    def __sub__(self, o):
        return sub(self, lift(o))

    def __rsub__(self, o):
        return sub(lift(o), self)

    def __mul__(self, o):
        return mul(self, lift(o))

    def __rmul__(self, o):
        return mul(lift(o), self)

    def __truediv__(self, o):
        return div(self, lift(o))

    def __rtruediv__(self, o):
        return div(lift(o), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n: int):
        return power(self, n)

    # comparisons build predicates; == stays structural equality
    def __lt__(self, o):
        return Expr("lt", (self, lift(o)))

    def __le__(self, o):
        return Expr("le", (self, lift(o)))

    def __gt__(self, o):
        return Expr("gt", (self, lift(o)))

    def __ge__(self, o):
        return Expr("ge", (self, lift(o)))


def const(x: float) -> Expr:
    return Expr("const", (), float(x))


def var(name: str) -> Expr:
    return Expr("var", (), name)


ZERO = const(0.0)
ONE = const(1.0)
TRUE = Expr("true")
FALSE = Expr("false")


def lift(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, str):
        return var(x)
    return const(x)


def _is_const(e: Expr, v: float | None = None) -> bool:
    return e.op == "const" and (v is None or e.val == v)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return const(a.val + b.val)
    return Expr("add", (a, b))


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if _is_const(a) and _is_const(b):
        return const(a.val - b.val)
    return Expr("sub", (a, b))


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return const(a.val * b.val)
    return Expr("mul", (a, b))


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    return Expr("div", (a, b))


def neg(a: Expr) -> Expr:
    if _is_const(a):
        return const(-a.val)
    if a.op == "neg":
        return a.args[0]
    return Expr("neg", (a,))


def power(a: Expr, n: int) -> Expr:
    if int(n) != n:
        raise PidReachError("only integer powers are supported")
    n = int(n)
    if n == 0:
        return ONE
    if n == 1:
        return a
    if _is_const(a):
        return const(a.val ** n)
    return Expr("pow", (a,), n)


def exp(a: Expr) -> Expr:
    a = lift(a)
    if _is_const(a):
        return const(math.exp(a.val))
    return Expr("exp", (a,))


def pos(a: Expr) -> Expr:
    """``max(a, 0)``; used for nonnegative control clamping."""
    return Expr("pos", (lift(a),))


def piecewise(x: Expr, breaks: Iterable[float], values: Iterable[float]) -> Expr:
    """Right-continuous step function: ``values[i]`` on ``[breaks[i-1], breaks[i])``."""
    breaks, values = tuple(float(b) for b in breaks), tuple(float(v) for v in values)
    if len(values) != len(breaks) + 1:
        raise PidReachError("piecewise needs len(values) == len(breaks) + 1")
    if list(breaks) != sorted(breaks):
        raise PidReachError("piecewise breakpoints must be increasing")
    if len(values) == 1:
        return const(values[0])
    return Expr("pwc", (lift(x),), (breaks, values))


def and_(*ps: Expr) -> Expr:
    ps = tuple(p for p in ps if p.op != "true")
    if any(p.op == "false" for p in ps):
        return FALSE
    if not ps:
        return TRUE
    return ps[0] if len(ps) == 1 else Expr("and", ps)


def or_(*ps: Expr) -> Expr:
    ps = tuple(p for p in ps if p.op != "false")
    if any(p.op == "true" for p in ps):
        return TRUE
    if not ps:
        return FALSE
    return ps[0] if len(ps) == 1 else Expr("or", ps)


def not_(p: Expr) -> Expr:
    if p.op == "true":
        return FALSE
    if p.op == "false":
        return TRUE
    return Expr("not", (p,))


def eq(a, b) -> Expr:
    return Expr("eq", (lift(a), lift(b)))


# ---------------------------------------------------------------------------
# traversal helpers
# ---------------------------------------------------------------------------

def free_vars(e: Expr) -> set[str]:
    out: set[str] = set()
    seen: set[int] = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n.op == "var":
            out.add(n.val)
        stack.extend(n.args)
    return out


def subs(e: Expr, mapping: Mapping[str, Expr | float]) -> Expr:
    """Substitute variables; rebuilds through the simplifying constructors."""
    m = {k: lift(v) for k, v in mapping.items()}
    memo: dict[int, Expr] = {}

    def go(n: Expr) -> Expr:
        r = memo.get(id(n))
        if r is not None:
            return r
        if n.op == "var":
            r = m.get(n.val, n)
        elif not n.args:
            r = n
        else:
            r = _rebuild(n, tuple(go(a) for a in n.args))
        memo[id(n)] = r
        return r

    return go(e)


def _rebuild(n: Expr, args: tuple) -> Expr:
    op = n.op
    if op == "add":
        return add(*args)
    if op == "sub":
        return sub(*args)
    if op == "mul":
        return mul(*args)
    if op == "div":
        return div(*args)
    if op == "neg":
        return neg(args[0])
    if op == "pow":
        return power(args[0], n.val)
    if op == "exp":
        return exp(args[0])
    if op == "and":
        return and_(*args)
    if op == "or":
        return or_(*args)
    if op == "not":
        return not_(args[0])
    return Expr(op, args, n.val)


def diff(e: Expr, v: str) -> Expr:
    """Symbolic derivative with respect to variable ``v``."""
    memo: dict[int, Expr] = {}

    def d(n: Expr) -> Expr:
        r = memo.get(id(n))
        if r is not None:
            return r
        op = n.op
        if op == "const":
            r = ZERO
        elif op == "var":
            r = ONE if n.val == v else ZERO
        elif op == "add":
            r = add(d(n.args[0]), d(n.args[1]))
        elif op == "sub":
            r = sub(d(n.args[0]), d(n.args[1]))
        elif op == "mul":
            a, b = n.args
            r = add(mul(d(a), b), mul(a, d(b)))
        elif op == "div":
            a, b = n.args
            r = div(sub(mul(d(a), b), mul(a, d(b))), power(b, 2))
        elif op == "neg":
            r = neg(d(n.args[0]))
        elif op == "pow":
            a = n.args[0]
            r = mul(mul(const(n.val), power(a, n.val - 1)), d(a))
        elif op == "exp":
            r = mul(n, d(n.args[0]))
        elif op == "pwc":
            r = ZERO  # almost everywhere
        elif op == "pos":
            raise PidReachError("max(., 0) is not differentiable")
        else:
            raise PidReachError(f"cannot differentiate predicate node {op!r}")
        memo[id(n)] = r
        return r

    return d(e)


_BIN_SYM = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_CMP_SYM = {"lt": "<", "le": "<=", "gt": ">", "ge": ">=", "eq": "="}
_PREC = {"or": 1, "and": 2, "not": 3, "lt": 4, "le": 4, "gt": 4, "ge": 4, "eq": 4,
         "add": 5, "sub": 5, "mul": 6, "div": 6, "neg": 7, "pow": 8}


def to_str(e: Expr) -> str:
    """Render back to the input grammar (round-trips through :func:`parse`)."""

    def go(n: Expr, parent: int = 0) -> str:
        op = n.op
        if op == "const":
            s = repr(n.val)
            return f"({s})" if n.val < 0 and parent else s
        if op == "var":
            return n.val
        if op in ("true", "false"):
            return op
        if op == "exp":
            return f"exp({go(n.args[0])})"
        if op == "pos":
            return f"pos({go(n.args[0])})"
        if op == "pwc":
            breaks, values = n.val
            return f"pwc({go(n.args[0])}; {list(breaks)}; {list(values)})"
        p = _PREC[op]
        if op in _BIN_SYM:
            a, b = n.args
            rb = p + (1 if op in ("sub", "div") else 0)
            s = f"{go(a, p)} {_BIN_SYM[op]} {go(b, rb)}"
        elif op in _CMP_SYM:
            s = f"{go(n.args[0], p + 1)} {_CMP_SYM[op]} {go(n.args[1], p + 1)}"
        elif op == "neg":
            s = f"-{go(n.args[0], p)}"
        elif op == "pow":
            s = f"{go(n.args[0], p + 1)}^{n.val}" if n.val >= 0 else f"{go(n.args[0], p + 1)}^({n.val})"
        elif op == "not":
            s = f"not {go(n.args[0], p)}"
        else:  # and / or
            s = f" {op} ".join(go(a, p + 1) for a in n.args)
        return f"({s})" if p < parent or (p == parent and op in ("neg", "pow")) else s

    return go(e)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<ws>\s+)|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op><=|>=|==|[-+*/^()<>=,])"
)

_KEYWORDS = {"and", "or", "not", "true", "false"}
_FUNCS = {"exp"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    i, line, col = 0, 1, 1
    while i < len(src):
        m = _TOKEN_RE.match(src, i)
        if not m:
            raise ModelParseError(f"unexpected character {src[i]!r}", line, col, src)
        text = m.group()
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, text, line, col))
        nl = text.count("\n")
        if nl:
            line += nl
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        i = m.end()
    toks.append(_Tok("end", "", line, col))
    return toks


class _Parser:
    def __init__(self, src: str, names: Mapping[str, Expr | None]):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0
        self.names = names

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        raise ModelParseError(msg, tok.line, tok.col, self.src)

    def expect(self, text: str) -> _Tok:
        t = self.peek()
        if t.text != text:
            self.error(f"expected {text!r}, found {t.text or 'end of input'!r}")
        return self.take()

    def parse(self) -> Expr:
        e = self.pred()
        if self.peek().kind != "end":
            self.error(f"unexpected {self.peek().text!r}")
        return e

    def _need(self, e: Expr, want_pred: bool, tok: _Tok) -> Expr:
        if e.is_pred != want_pred:
            self.error("expected a condition" if want_pred else "expected a numeric expression", tok)
        return e

    def pred(self) -> Expr:
        tok = self.peek()
        e = self.conj()
        if self.peek().text == "or":
            parts = [self._need(e, True, tok)]
            while self.peek().text == "or":
                self.take()
                t = self.peek()
                parts.append(self._need(self.conj(), True, t))
            e = or_(*parts)
        return e

    def conj(self) -> Expr:
        tok = self.peek()
        e = self.negation()
        if self.peek().text == "and":
            parts = [self._need(e, True, tok)]
            while self.peek().text == "and":
                self.take()
                t = self.peek()
                parts.append(self._need(self.negation(), True, t))
            e = and_(*parts)
        return e

    def negation(self) -> Expr:
        if self.peek().text == "not":
            self.take()
            t = self.peek()
            return not_(self._need(self.negation(), True, t))
        return self.cmp()

    def cmp(self) -> Expr:
        tok = self.peek()
        a = self.sum()
        t = self.peek()
        ops = {"<": "lt", "<=": "le", ">": "gt", ">=": "ge", "=": "eq", "==": "eq"}
        if t.text in ops:
            self.take()
            self._need(a, False, tok)
            t2 = self.peek()
            b = self._need(self.sum(), False, t2)
            return Expr(ops[t.text], (a, b))
        return a

    def sum(self) -> Expr:
        tok = self.peek()
        e = self.term()
        while self.peek().text in ("+", "-"):
            op = self.take().text
            self._need(e, False, tok)
            t = self.peek()
            r = self._need(self.term(), False, t)
            e = add(e, r) if op == "+" else sub(e, r)
        return e

    def term(self) -> Expr:
        tok = self.peek()
        e = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.take().text
            self._need(e, False, tok)
            t = self.peek()
            r = self._need(self.unary(), False, t)
            e = mul(e, r) if op == "*" else div(e, r)
        return e

    def unary(self) -> Expr:
        if self.peek().text == "-":
            self.take()
            t = self.peek()
            return neg(self._need(self.unary(), False, t))
        if self.peek().text == "+":
            self.take()
        return self.power()

    def power(self) -> Expr:
        tok = self.peek()
        e = self.atom()
        if self.peek().text == "^":
            self.take()
            self._need(e, False, tok)
            sign = 1
            paren = False
            if self.peek().text == "(":
                self.take()
                paren = True
            if self.peek().text == "-":
                self.take()
                sign = -1
            t = self.take()
            if t.kind != "num" or not re.fullmatch(r"\d+", t.text):
                self.error("exponent must be an integer literal", t)
            if paren:
                self.expect(")")
            n = sign * int(t.text)
            e = power(e, n) if n >= 0 else div(ONE, power(e, -n))
        return e

    def atom(self) -> Expr:
        t = self.take()
        if t.kind == "num":
            return const(float(t.text))
        if t.kind == "name":
            if t.text in ("true", "false"):
                return TRUE if t.text == "true" else FALSE
            if t.text in _KEYWORDS:
                self.error(f"unexpected keyword {t.text!r}", t)
            if t.text in _FUNCS:
                self.expect("(")
                t2 = self.peek()
                arg = self._need(self.pred(), False, t2)
                self.expect(")")
                return exp(arg)
            if t.text not in self.names:
                self.error(f"unknown identifier {t.text!r}", t)
            bound = self.names[t.text]
            return bound if bound is not None else var(t.text)
        if t.text == "(":
            e = self.pred()
            self.expect(")")
            return e
        self.error(f"unexpected {t.text or 'end of input'!r}", t)


def parse(src: str, names: Iterable[str] | Mapping[str, Expr | None]) -> Expr:
    """Parse ``src``.  ``names`` lists the admissible identifiers; a mapping may
    bind some of them to expressions (e.g. named constants)."""
    if not isinstance(src, str):
        return lift(src)
    if not isinstance(names, Mapping):
        names = {n: None for n in names}
    return _Parser(src, names).parse()


# ---------------------------------------------------------------------------
# box (interval) and point evaluation
# ---------------------------------------------------------------------------

class Truth(enum.Enum):
    """Three-valued result of evaluating a predicate over a box."""

    TRUE = "true"
    FALSE = "false"
    MAYBE = "maybe"

    def __and__(self, other: "Truth") -> "Truth":
        if self is Truth.FALSE or other is Truth.FALSE:
            return Truth.FALSE
        if self is Truth.TRUE and other is Truth.TRUE:
            return Truth.TRUE
        return Truth.MAYBE

    def __or__(self, other: "Truth") -> "Truth":
        if self is Truth.TRUE or other is Truth.TRUE:
            return Truth.TRUE
        if self is Truth.FALSE and other is Truth.FALSE:
            return Truth.FALSE
        return Truth.MAYBE

    def __invert__(self) -> "Truth":
        if self is Truth.MAYBE:
            return self
        return Truth.FALSE if self is Truth.TRUE else Truth.TRUE


def _pwc_interval(x: Interval, breaks, values) -> Interval:
    idx_lo = int(np.searchsorted(breaks, x.lo, side="right"))
    idx_hi = int(np.searchsorted(breaks, x.hi, side="right"))
    vs = values[idx_lo: idx_hi + 1]
    return Interval(min(vs), max(vs))


def eval_interval(e: Expr, env: Mapping[str, Interval]):
    """Interval value of an arithmetic node, or :class:`Truth` for a predicate."""
    memo: dict[int, object] = {}

    def go(n: Expr):
        key = id(n)
        if key in memo:
            return memo[key]
        op = n.op
        if op == "const":
            r = Interval.point(n.val)
        elif op == "var":
            try:
                r = as_interval(env[n.val])
            except KeyError:
                raise PidReachError(f"no value for variable {n.val!r}") from None
        elif op == "add":
            r = go(n.args[0]) + go(n.args[1])
        elif op == "sub":
            r = go(n.args[0]) - go(n.args[1])
        elif op == "mul":
            a, b = n.args
            r = go(a).sqr() if a is b or a == b else go(a) * go(b)
        elif op == "div":
            r = go(n.args[0]) / go(n.args[1])
        elif op == "neg":
            r = -go(n.args[0])
        elif op == "pow":
            r = go(n.args[0]) ** n.val
        elif op == "exp":
            r = go(n.args[0]).exp()
        elif op == "pos":
            a = go(n.args[0])
            r = Interval._raw(max(a.lo, 0.0), max(a.hi, 0.0))
        elif op == "pwc":
            r = _pwc_interval(go(n.args[0]), *n.val)
        elif op == "true":
            r = Truth.TRUE
        elif op == "false":
            r = Truth.FALSE
        elif op in ("lt", "le", "gt", "ge", "eq"):
            r = _cmp_interval(op, go(n.args[0]), go(n.args[1]))
        elif op == "and":
            r = Truth.TRUE
            for a in n.args:
                r = r & go(a)
                if r is Truth.FALSE:
                    break
        elif op == "or":
            r = Truth.FALSE
            for a in n.args:
                r = r | go(a)
                if r is Truth.TRUE:
                    break
        elif op == "not":
            r = ~go(n.args[0])
        else:
            raise PidReachError(f"unknown node {op!r}")
        memo[key] = r
        return r

    return go(e)


def _cmp_interval(op: str, a: Interval, b: Interval) -> Truth:
    if op in ("gt", "ge"):
        a, b = b, a
        op = "lt" if op == "gt" else "le"
    if op == "lt":
        if a.hi < b.lo:
            return Truth.TRUE
        if a.lo >= b.hi:
            return Truth.FALSE
        return Truth.MAYBE
    if op == "le":
        if a.hi <= b.lo:
            return Truth.TRUE
        if a.lo > b.hi:
            return Truth.FALSE
        return Truth.MAYBE
    # eq
    if a.is_degenerate() and b.is_degenerate() and a.lo == b.lo:
        return Truth.TRUE
    if not a.intersects(b):
        return Truth.FALSE
    return Truth.MAYBE


def eval_box(e: Expr, box: Box, extra: Mapping[str, Interval] | None = None):
    env = dict(box.items())
    if extra:
        env.update(extra)
    return eval_interval(e, env)


def eval_point(e: Expr, env: Mapping[str, float]):
    """Float (or bool) value of ``e`` at a point.  Not used in hot loops."""
    memo: dict[int, object] = {}

    def go(n: Expr):
        key = id(n)
        if key in memo:
            return memo[key]
        op = n.op
        a = [go(x) for x in n.args]
        if op == "const":
            r = n.val
        elif op == "var":
            r = float(env[n.val])
        elif op == "add":
            r = a[0] + a[1]
        elif op == "sub":
            r = a[0] - a[1]
        elif op == "mul":
            r = a[0] * a[1]
        elif op == "div":
            r = a[0] / a[1]
        elif op == "neg":
            r = -a[0]
        elif op == "pow":
            r = a[0] ** n.val
        elif op == "exp":
            r = math.exp(a[0])
        elif op == "pos":
            r = max(a[0], 0.0)
        elif op == "pwc":
            breaks, values = n.val
            r = values[int(np.searchsorted(breaks, a[0], side="right"))]
        elif op == "true":
            r = True
        elif op == "false":
            r = False
        elif op == "lt":
            r = a[0] < a[1]
        elif op == "le":
            r = a[0] <= a[1]
        elif op == "gt":
            r = a[0] > a[1]
        elif op == "ge":
            r = a[0] >= a[1]
        elif op == "eq":
            r = a[0] == a[1]
        elif op == "and":
            r = all(a)
        elif op == "or":
            r = any(a)
        elif op == "not":
            r = not a[0]
        else:
            raise PidReachError(f"unknown node {op!r}")
        memo[key] = r
        return r

    return go(e)


# ---------------------------------------------------------------------------
# tapes
# ---------------------------------------------------------------------------

OP_VAR, OP_CONST, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_NEG, OP_SQR, OP_EXP, OP_POS, OP_PWC = range(11)
_OPCODE = {"add": OP_ADD, "sub": OP_SUB, "mul": OP_MUL, "div": OP_DIV, "neg": OP_NEG,
           "exp": OP_EXP, "pos": OP_POS, "pwc": OP_PWC}


@dataclass
class Tape:
    """Straight-line program: slot ``i`` holds ``ops[i](slot a[i], slot b[i])``.

    The first ``n_vars`` slots are the input variables in ``var_names`` order.
    ``val`` holds constants; for ``OP_PWC`` it indexes the step tables.
    """

    var_names: tuple[str, ...]
    ops: np.ndarray
    a: np.ndarray
    b: np.ndarray
    val: np.ndarray
    outputs: np.ndarray
    pw_off: np.ndarray
    pw_len: np.ndarray
    pw_breaks: np.ndarray
    pw_values: np.ndarray
    _src_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    @property
    def n_slots(self) -> int:
        return len(self.ops)

    def has_op(self, code: int) -> bool:
        return bool(np.any(self.ops == code))

    def kernel_args(self):
        return (self.ops, self.a, self.b, self.val, self.outputs,
                self.pw_off, self.pw_len, self.pw_breaks, self.pw_values)


def compile_tape(outputs: Iterable[Expr], var_names: Iterable[str]) -> Tape:
    var_names = tuple(var_names)
    index = {n: i for i, n in enumerate(var_names)}
    ops, a_, b_, val = [], [], [], []
    slots: dict = {}
    pw_tables: list[tuple[tuple, tuple]] = []
    for i, n in enumerate(var_names):
        ops.append(OP_VAR)
        a_.append(i)
        b_.append(-1)
        val.append(0.0)

    def emit(code, a=-1, b=-1, v=0.0):
        key = (code, a, b, v)
        s = slots.get(key)
        if s is None:
            s = len(ops)
            ops.append(code)
            a_.append(a)
            b_.append(b)
            val.append(v)
            slots[key] = s
        return s

    memo: dict[Expr, int] = {}

    def go(n: Expr) -> int:
        s = memo.get(n)
        if s is not None:
            return s
        op = n.op
        if op == "var":
            if n.val not in index:
                raise PidReachError(f"variable {n.val!r} is not an input of this tape")
            s = index[n.val]
        elif op == "const":
            s = emit(OP_CONST, v=float(n.val))
        elif op in ("add", "sub", "mul", "div"):
            x, y = go(n.args[0]), go(n.args[1])
            if op == "mul" and x == y:
                s = emit(OP_SQR, x)
            else:
                if op in ("add", "mul") and x > y:
                    x, y = y, x
                s = emit(_OPCODE[op], x, y)
        elif op in ("neg", "exp", "pos"):
            s = emit(_OPCODE[op], go(n.args[0]))
        elif op == "pow":
            s = _emit_pow(emit, go(n.args[0]), n.val)
        elif op == "pwc":
            x = go(n.args[0])
            pw_tables.append(n.val)
            s = emit(OP_PWC, x, -1, float(len(pw_tables) - 1))
        else:
            raise PidReachError(f"predicate node {op!r} cannot be compiled to an arithmetic tape")
        memo[n] = s
        return s

    outs = [go(e) for e in outputs]
    # pw_off[2k] / pw_off[2k+1]: offsets of table k in pw_breaks / pw_values
    packed, ln, brk, vflat = [], [], [], []
    for breaks, values in pw_tables:
        packed.extend((len(brk), len(vflat)))
        ln.append(len(breaks))
        brk.extend(breaks)
        vflat.extend(values)
    return Tape(
        var_names=var_names,
        ops=np.asarray(ops, dtype=np.int64),
        a=np.asarray(a_, dtype=np.int64),
        b=np.asarray(b_, dtype=np.int64),
        val=np.asarray(val, dtype=np.float64),
        outputs=np.asarray(outs, dtype=np.int64),
        pw_off=np.asarray(packed or [0, 0], dtype=np.int64),
        pw_len=np.asarray(ln or [0], dtype=np.int64),
        pw_breaks=np.asarray(brk or [0.0], dtype=np.float64),
        pw_values=np.asarray(vflat or [0.0], dtype=np.float64),
    )


def _emit_pow(emit, x: int, n: int) -> int:
    result = -1
    base = x
    while n:
        if n & 1:
            result = base if result < 0 else emit(OP_MUL, min(result, base), max(result, base))
        n >>= 1
        if n:
            base = emit(OP_SQR, base)
    return result


# ---------------------------------------------------------------------------
# code generation for point evaluation (numpy or numba)
# ---------------------------------------------------------------------------

def _slot_src(tape: Tape, lines: list[str], prefix: str, vec: str) -> None:
    for i in range(tape.n_slots):
        code = tape.ops[i]
        a, b = tape.a[i], tape.b[i]
        s = f"{prefix}{i}"
        if code == OP_VAR:
            rhs = f"{vec}[{a}]"
        elif code == OP_CONST:
            rhs = repr(float(tape.val[i]))
        elif code == OP_ADD:
            rhs = f"{prefix}{a} + {prefix}{b}"
        elif code == OP_SUB:
            rhs = f"{prefix}{a} - {prefix}{b}"
        elif code == OP_MUL:
            rhs = f"{prefix}{a} * {prefix}{b}"
        elif code == OP_DIV:
            rhs = f"{prefix}{a} / {prefix}{b}"
        elif code == OP_NEG:
            rhs = f"-{prefix}{a}"
        elif code == OP_SQR:
            rhs = f"{prefix}{a} * {prefix}{a}"
        elif code == OP_EXP:
            rhs = f"np.exp({prefix}{a})"
        elif code == OP_POS:
            rhs = f"np.maximum({prefix}{a}, 0.0)"
        elif code == OP_PWC:
            k = int(tape.val[i])
            bo, vo = tape.pw_off[2 * k], tape.pw_off[2 * k + 1]
            nb = tape.pw_len[k]
            terms = [repr(float(tape.pw_values[vo]))]
            for j in range(nb):
                step = float(tape.pw_values[vo + j + 1] - tape.pw_values[vo + j])
                terms.append(f"{step!r} * ({prefix}{a} >= {float(tape.pw_breaks[bo + j])!r})")
            rhs = " + ".join(terms)
        else:  # pragma: no cover
            raise PidReachError(f"bad opcode {code}")
        lines.append(f"{s} = {rhs}")


def pred_src(p: Expr, operand_slot) -> str:
    """Source for predicate ``p``; ``operand_slot(expr)`` names compiled operands."""
    op = p.op
    if op == "true":
        return "True"
    if op == "false":
        return "False"
    if op in _CMP_SYM:
        sym = "==" if op == "eq" else _CMP_SYM[op]
        return f"({operand_slot(p.args[0])} {sym} {operand_slot(p.args[1])})"
    if op == "not":
        return f"np.logical_not({pred_src(p.args[0], operand_slot)})"
    fn = "np.logical_and" if op == "and" else "np.logical_or"
    acc = pred_src(p.args[0], operand_slot)
    for a in p.args[1:]:
        acc = f"{fn}({acc}, {pred_src(a, operand_slot)})"
    return acc


def pred_operands(p: Expr) -> list[Expr]:
    out: list[Expr] = []
    stack = [p]
    while stack:
        n = stack.pop()
        if n.op in _CMP_SYM:
            out.extend(n.args)
        elif n.op in ("and", "or", "not"):
            stack.extend(n.args)
    return out


def mode_function_source(name: str, per_mode_exprs: list[list[Expr]],
                         per_mode_preds: list[list[Expr]] | None,
                         var_names: tuple[str, ...], vec: str = "v") -> str:
    """Source of ``def name(mode, v, out[, flags])`` dispatching on ``mode``.

    ``out[j]`` receives expression ``j`` of the active mode and ``flags[j]``
    predicate ``j``.  The body only uses ``+ - * /``, ``np.exp``,
    ``np.maximum`` and ``np.logical_*`` so it runs unchanged on floats under
    numba and on row arrays (``v`` of shape ``(n, N)``) under numpy.
    """
    with_flags = per_mode_preds is not None
    sig = f"def {name}(mode, {vec}, out, flags):" if with_flags else f"def {name}(mode, {vec}, out):"
    lines = [sig]
    for m, exprs in enumerate(per_mode_exprs):
        preds = per_mode_preds[m] if with_flags else []
        operands: list[Expr] = []
        for p in preds:
            operands.extend(pred_operands(p))
        tape = compile_tape(list(exprs) + operands, var_names)
        body: list[str] = []
        _slot_src(tape, body, "s", vec)
        for j in range(len(exprs)):
            body.append(f"out[{j}] = s{tape.outputs[j]}")
        if with_flags:
            slot_of = {e: f"s{tape.outputs[len(exprs) + k]}" for k, e in enumerate(operands)}
            for j, p in enumerate(preds):
                body.append(f"flags[{j}] = {pred_src(p, slot_of.__getitem__)}")
        kw = "if" if m == 0 else "elif"
        lines.append(f"    {kw} mode == {m}:")
        lines.extend("        " + ln for ln in body)
        if not body:
            lines.append("        pass")
    lines.append("    return 0")
    return "\n".join(lines) + "\n"


def build_function(src: str, name: str):
    ns: dict = {"np": np}
    exec(compile(src, f"<generated {name}>", "exec"), ns)
    return ns[name]
