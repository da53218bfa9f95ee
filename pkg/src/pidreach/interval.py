"""Closed real intervals with outward rounding, and named boxes.

Rounding is emulated without touching the FPU mode: every endpoint is
computed in round-to-nearest, and an error-free transformation (TwoSum /
Dekker's TwoProduct) tells which side of the exact result the float landed
on.  The endpoint is then moved by one ulp only when that is needed, so
exact operations such as ``[1,2] + [3,4]`` stay exact and everything else
is rounded outward by at most ``ULP_SLACK`` ulp.  Library transcendental
functions (``exp``) are always nudged by ``ULP_SLACK``; glibc's ``exp`` is
accurate to better than one ulp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from ._jit import jit
from .errors import DegenerateDimension, DivisionByZeroInterval, PidReachError

ULP_SLACK = 1
# Abramowitz & Stegun 7.1.26
ERF_ABS_ERROR = 1.5e-7
_ERF_P = 0.3275911
_ERF_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)

_SPLITTER = 134217729.0  # 2**27 + 1
_SAFE_HI = 1e290
_SAFE_LO = 1e-280
_INF = math.inf


@jit(cache=True)
def next_up(x):
    return np.nextafter(x, _INF)


@jit(cache=True)
def next_down(x):
    return np.nextafter(x, -_INF)


@jit(cache=True)
def _two_sum_err(a, b, s):
    bb = s - a
    return (a - (s - bb)) + (b - bb)


@jit(cache=True)
def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


@jit(cache=True)
def _two_prod_err(a, b, p):
    ah, al = _split(a)
    bh, bl = _split(b)
    return ((ah * bh - p) + ah * bl + al * bh) + al * bl


@jit(cache=True)
def add_down(a, b):
    s = a + b
    if not math.isfinite(s):
        return s if s == s else -_INF
    if _two_sum_err(a, b, s) < 0.0:
        return next_down(s)
    return s


@jit(cache=True)
def add_up(a, b):
    s = a + b
    if not math.isfinite(s):
        return s if s == s else _INF
    if _two_sum_err(a, b, s) > 0.0:
        return next_up(s)
    return s


@jit(cache=True)
def _prod_safe(a, b, p):
    aa = abs(a)
    ab = abs(b)
    ap = abs(p)
    return aa < _SAFE_HI and ab < _SAFE_HI and ap < _SAFE_HI and ap > _SAFE_LO


@jit(cache=True)
def mul_down(a, b):
    if a == 0.0 or b == 0.0:
        return 0.0
    p = a * b
    if p != p:
        return -_INF
    if not math.isfinite(p):
        return p
    if _prod_safe(a, b, p):
        if _two_prod_err(a, b, p) < 0.0:
            return next_down(p)
        return p
    return next_down(p)


@jit(cache=True)
def mul_up(a, b):
    if a == 0.0 or b == 0.0:
        return 0.0
    p = a * b
    if p != p:
        return _INF
    if not math.isfinite(p):
        return p
    if _prod_safe(a, b, p):
        if _two_prod_err(a, b, p) > 0.0:
            return next_up(p)
        return p
    return next_up(p)


@jit(cache=True)
def _div_residual_sign(a, b, q):
    # sign of a/b - q, or 2 when it cannot be decided exactly
    if not math.isfinite(q) or q == 0.0 or not _prod_safe(q, b, a):
        return 2
    p = q * b
    e = _two_prod_err(q, b, p)
    r = (a - p) - e
    if r == 0.0:
        return 0
    s = 1 if r > 0.0 else -1
    return s if b > 0.0 else -s


@jit(cache=True)
def div_down(a, b):
    if a == 0.0:
        return 0.0
    q = a / b
    s = _div_residual_sign(a, b, q)
    if s >= 0 and s != 2:
        return q
    return next_down(q)


@jit(cache=True)
def div_up(a, b):
    if a == 0.0:
        return 0.0
    q = a / b
    s = _div_residual_sign(a, b, q)
    if s <= 0:
        return q
    return next_up(q)


@jit(cache=True)
def imul(alo, ahi, blo, bhi):
    lo = min(mul_down(alo, blo), mul_down(alo, bhi), mul_down(ahi, blo), mul_down(ahi, bhi))
    hi = max(mul_up(alo, blo), mul_up(alo, bhi), mul_up(ahi, blo), mul_up(ahi, bhi))
    return lo, hi


@jit(cache=True)
def idiv(alo, ahi, blo, bhi):
    lo = min(div_down(alo, blo), div_down(alo, bhi), div_down(ahi, blo), div_down(ahi, bhi))
    hi = max(div_up(alo, blo), div_up(alo, bhi), div_up(ahi, blo), div_up(ahi, bhi))
    return lo, hi


@jit(cache=True)
def isqr(alo, ahi):
    if alo >= 0.0:
        return max(mul_down(alo, alo), 0.0), mul_up(ahi, ahi)
    if ahi <= 0.0:
        return max(mul_down(ahi, ahi), 0.0), mul_up(alo, alo)
    m = max(-alo, ahi)
    return 0.0, mul_up(m, m)


@jit(cache=True)
def iexp(alo, ahi):
    lo = math.exp(alo)
    hi = math.exp(ahi)
    if alo != 0.0:
        lo = next_down(lo)
    if ahi != 0.0:
        hi = next_up(hi)
    # keep the bounds on the right side of exp(0) = 1 (monotone in the input)
    if ahi <= 0.0:
        hi = min(hi, 1.0)
    if alo >= 0.0:
        lo = max(lo, 1.0)
    return max(lo, 0.0), hi


def _erf_approx(x: float) -> float:
    ax = abs(x)
    t = 1.0 / (1.0 + _ERF_P * ax)
    a1, a2, a3, a4, a5 = _ERF_A
    poly = t * (a1 + t * (a2 + t * (a3 + t * (a4 + t * a5))))
    y = 1.0 - poly * math.exp(-ax * ax)
    return y if x >= 0 else -y


# evaluation rounding of the approximation is far below this
_ERF_SLACK = ERF_ABS_ERROR + 1e-14


@dataclass(frozen=True)
class Interval:
    """Closed interval ``[lo, hi]``.

    Unbounded endpoints are only accepted with ``unbounded=True``; the ODE
    machinery rejects them.
    """

    lo: float
    hi: float

    def __init__(self, lo, hi=None, unbounded: bool = False):
        if hi is None:
            hi = lo
        lo = float(lo)
        hi = float(hi)
        if lo != lo or hi != hi:
            raise PidReachError("interval endpoint is NaN")
        if lo > hi:
            raise PidReachError(f"empty interval [{lo}, {hi}]")
        if not unbounded and (math.isinf(lo) or math.isinf(hi)):
            raise PidReachError("unbounded interval; pass unbounded=True to allow it")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def _raw(cls, lo: float, hi: float) -> "Interval":
        obj = object.__new__(cls)
        object.__setattr__(obj, "lo", float(lo))
        object.__setattr__(obj, "hi", float(hi))
        return obj

    @classmethod
    def point(cls, x: float) -> "Interval":
        return cls._raw(x, x)

    # --- queries ---------------------------------------------------------
    @property
    def width(self) -> float:
        return float(add_up(self.hi, -self.lo))

    @property
    def mid(self) -> float:
        if self.lo == self.hi:
            return self.lo
        m = self.lo + 0.5 * (self.hi - self.lo)
        return min(max(m, self.lo), self.hi)

    @property
    def mag(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    @property
    def mig(self) -> float:
        if self.lo <= 0.0 <= self.hi:
            return 0.0
        return min(abs(self.lo), abs(self.hi))

    def is_bounded(self) -> bool:
        return math.isfinite(self.lo) and math.isfinite(self.hi)

    def is_degenerate(self) -> bool:
        return self.lo == self.hi

    def contains(self, x) -> bool:
        if isinstance(x, Interval):
            return self.lo <= x.lo and x.hi <= self.hi
        return self.lo <= x <= self.hi

    __contains__ = contains

    def subset(self, other: "Interval") -> bool:
        return other.lo <= self.lo and self.hi <= other.hi

    def intersects(self, other: "Interval") -> bool:
        return self.lo <= other.hi and other.lo <= self.hi

    def intersect(self, other: "Interval") -> "Interval | None":
        lo, hi = max(self.lo, other.lo), min(self.hi, other.hi)
        return Interval._raw(lo, hi) if lo <= hi else None

    def hull(self, other: "Interval") -> "Interval":
        return Interval._raw(min(self.lo, other.lo), max(self.hi, other.hi))

    def inflate(self, r: float) -> "Interval":
        return Interval._raw(add_down(self.lo, -r), add_up(self.hi, r))

    def __iter__(self):
        yield self.lo
        yield self.hi

    def __repr__(self) -> str:
        return f"[{self.lo!r}, {self.hi!r}]"

    # --- arithmetic ------------------------------------------------------
    def __add__(self, other):
        o = as_interval(other)
        return Interval._raw(add_down(self.lo, o.lo), add_up(self.hi, o.hi))

    __radd__ = __add__

    def __sub__(self, other):
        o = as_interval(other)
        return Interval._raw(add_down(self.lo, -o.hi), add_up(self.hi, -o.lo))

    def __rsub__(self, other):
        return as_interval(other) - self

    def __mul__(self, other):
        o = as_interval(other)
        return Interval._raw(*imul(self.lo, self.hi, o.lo, o.hi))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_interval(other)
        if o.lo <= 0.0 <= o.hi:
            raise DivisionByZeroInterval(f"divisor {o!r} contains zero")
        return Interval._raw(*idiv(self.lo, self.hi, o.lo, o.hi))

    def __rtruediv__(self, other):
        return as_interval(other) / self

    def __neg__(self):
        return Interval._raw(-self.hi, -self.lo)

    def __pow__(self, n: int):
        return pow_int(self, n)

    def exp(self) -> "Interval":
        return Interval._raw(*iexp(self.lo, self.hi))

    def sqr(self) -> "Interval":
        return Interval._raw(*isqr(self.lo, self.hi))

    def erf(self) -> "Interval":
        lo = max(-1.0, _erf_approx(self.lo) - _ERF_SLACK)
        hi = min(1.0, _erf_approx(self.hi) + _ERF_SLACK)
        return Interval._raw(lo, hi)


def as_interval(x) -> Interval:
    if isinstance(x, Interval):
        return x
    if isinstance(x, tuple) and len(x) == 2:
        return Interval(*x)
    return Interval.point(float(x))


def pow_int(a: Interval, n: int) -> Interval:
    """``a**n`` for integer ``n`` by repeated squaring."""
    n = int(n)
    if n == 0:
        return Interval.point(1.0)
    if n < 0:
        return Interval.point(1.0) / pow_int(a, -n)
    if n % 2 == 0:
        base = Interval._raw(a.mig, a.mag)
    else:
        # odd powers are increasing: enclose each endpoint separately
        lo = _pow_pos(Interval.point(a.lo), n).lo
        hi = _pow_pos(Interval.point(a.hi), n).hi
        return Interval._raw(lo, hi)
    return _pow_pos(base, n)


def _pow_pos(base: Interval, n: int) -> Interval:
    result = Interval.point(1.0)
    while n:
        if n & 1:
            result = result * base
        n >>= 1
        if n:
            base = base.sqr()
    return result


BINARY_OPS = ("add", "sub", "mul", "div")
UNARY_OPS = ("neg", "exp", "sqr", "pow_int", "erf")


def iv_binary(a: Interval, b: Interval, op: str) -> Interval:
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    raise ValueError(f"unknown binary op {op!r}")


def iv_unary(a: Interval, fn: str, n: int | None = None) -> Interval:
    if fn == "neg":
        return -a
    if fn == "exp":
        return a.exp()
    if fn == "sqr":
        return a.sqr()
    if fn == "pow_int":
        if n is None:
            raise ValueError("pow_int needs an exponent")
        return pow_int(a, n)
    if fn == "erf":
        return a.erf()
    raise ValueError(f"unknown unary op {fn!r}")


def erf_point(x: float) -> float:
    """The rational approximation itself (not an enclosure)."""
    return _erf_approx(x)


class Box(Mapping):
    """Ordered mapping ``name -> Interval``.

    A box with zero dimensions is allowed and stands for the single point of
    an empty parameter space (measure one).
    """

    __slots__ = ("_names", "_ivs", "_index")

    def __init__(self, dims: Mapping[str, Interval] | Iterable[tuple[str, Interval]] = ()):
        items = list(dims.items()) if isinstance(dims, Mapping) else list(dims)
        self._names = tuple(k for k, _ in items)
        self._ivs = tuple(as_interval(v) for _, v in items)
        if len(set(self._names)) != len(self._names):
            raise PidReachError("duplicate dimension in box")
        self._index = {k: i for i, k in enumerate(self._names)}

    @classmethod
    def from_bounds(cls, bounds: Mapping[str, tuple[float, float] | float]) -> "Box":
        out = []
        for k, v in bounds.items():
            if isinstance(v, Interval):
                out.append((k, v))
            elif isinstance(v, (tuple, list)):
                out.append((k, Interval(v[0], v[1])))
            else:
                out.append((k, Interval.point(v)))
        return cls(out)

    def __getitem__(self, key: str) -> Interval:
        return self._ivs[self._index[key]]

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Box):
            return NotImplemented
        return self._names == other._names and self._ivs == other._ivs

    def __hash__(self) -> int:
        return hash((self._names, self._ivs))

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v!r}" for k, v in zip(self._names, self._ivs))
        return "{" + inner + "}"

    def __getstate__(self):
        return (self._names, self._ivs)

    def __setstate__(self, state):
        names, ivs = state
        self._names, self._ivs = names, ivs
        self._index = {k: i for i, k in enumerate(names)}

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def intervals(self) -> tuple[Interval, ...]:
        return self._ivs

    def widths(self) -> dict[str, float]:
        return {k: v.width for k, v in zip(self._names, self._ivs)}

    def max_width(self) -> float:
        return max((v.width for v in self._ivs), default=0.0)

    def midpoint(self) -> dict[str, float]:
        return {k: v.mid for k, v in zip(self._names, self._ivs)}

    def lo(self) -> np.ndarray:
        return np.array([v.lo for v in self._ivs], dtype=float)

    def hi(self) -> np.ndarray:
        return np.array([v.hi for v in self._ivs], dtype=float)

    def replace(self, **dims) -> "Box":
        new = dict(zip(self._names, self._ivs))
        for k, v in dims.items():
            if k not in new:
                raise KeyError(k)
            new[k] = as_interval(v)
        return Box(new)

    def merge(self, other: "Box") -> "Box":
        return Box(list(self.items()) + [(k, v) for k, v in other.items() if k not in self._index])

    def select(self, names: Iterable[str]) -> "Box":
        return Box([(k, self[k]) for k in names])

    def contains_point(self, point: Mapping[str, float]) -> bool:
        return all(self[k].contains(point[k]) for k in self._names)

    def subset(self, other: "Box") -> bool:
        return all(self[k].subset(other[k]) for k in self._names)

    def hull(self, other: "Box") -> "Box":
        return Box([(k, self[k].hull(other[k])) for k in self._names])

    def intersect(self, other: "Box") -> "Box | None":
        out = []
        for k in self._names:
            iv = self[k].intersect(other[k])
            if iv is None:
                return None
            out.append((k, iv))
        return Box(out)

    def split(self, dim: str) -> tuple["Box", "Box"]:
        return box_split(self, dim)


def box_split(b: Box, dim: str) -> tuple[Box, Box]:
    """Bisect ``b`` at the midpoint of ``dim``."""
    iv = b[dim]
    if not iv.lo < iv.hi:
        raise DegenerateDimension(f"cannot split {dim!r}: zero width")
    m = iv.mid
    if not iv.lo < m < iv.hi:
        raise DegenerateDimension(f"cannot split {dim!r}: width below float resolution")
    return b.replace(**{dim: Interval._raw(iv.lo, m)}), b.replace(**{dim: Interval._raw(m, iv.hi)})


def hull_all(boxes: Iterable[Box]) -> Box:
    it = iter(boxes)
    out = next(it)
    for b in it:
        out = out.hull(b)
    return out
