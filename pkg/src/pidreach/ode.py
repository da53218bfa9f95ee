"""Validated integration of parametric ODEs with interval Taylor steps.

Each step of size ``h`` works in three passes over the compiled field:

1. a-priori box ``B`` for the whole step from Picard iteration
   ``B <- X + [0, h] f(B)``;
2. Taylor coefficients of order ``K + 1`` on ``B`` give the Lagrange
   remainder ``h^(K+1) x_[K+1](B)``;
3. coefficients of order ``K`` at the box centre and their gradients over
   the box give the mean-value form
   ``x(h) in T(z_c) + J_T(Z) (Z - z_c) + R``, intersected with the plain
   interval Taylor form and with ``B``.

The mean-value form is what keeps contracting dynamics contracting (a plain
interval Taylor step widens even ``x' = -x``).  With ``wrapping="qr"`` the
set is also carried as ``centre + A r + s`` with ``A`` re-orthogonalised
every step (Lohner's method), which stops the box growth of rotating or
feedback-coupled dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ._taylor import (FLAG_DIVZERO, FLAG_NONSMOOTH, _v_add, _v_dn, _v_mul, _v_up, iv_matmul,
                      iv_poly, taylor_coeffs)
from .errors import EnclosureBlowup, OutOfHorizon, PidReachError
from .expr import Expr, compile_tape, const, free_vars, lift, parse
from .interval import Box, Interval, as_interval


@dataclass(frozen=True)
class OdeConfig:
    taylor_order: int = 5
    step_hint: float = 1.0
    max_halvings: int = 20
    max_picard_iters: int = 12
    # a step fails when some width exceeds width_ceiling * max(1, |midpoint|)
    width_ceiling: float = 1e6
    # remainder width allowed per unit time, relative to max(1, |x|)
    target_width: float = 1e-8
    max_steps: int = 200_000
    # "qr": carry the set in a re-orthogonalised frame; "none": plain mean-value boxes
    wrapping: str = "qr"
    backend: str | None = None

    def __post_init__(self):
        if self.taylor_order < 1:
            raise PidReachError("taylor_order must be >= 1")
        if not self.step_hint > 0:
            raise PidReachError("step_hint must be positive")
        if self.wrapping not in ("qr", "none"):
            raise PidReachError("wrapping must be 'qr' or 'none'")


@dataclass
class VectorField:
    """``d states / dt = rhs``; expressions may use ``params`` and ``time_var``.

    ``time_var`` names a clock that is added as an extra integrated dimension
    (derivative one) when any right-hand side refers to it.
    """

    states: tuple[str, ...]
    rhs: tuple[Expr, ...]
    params: tuple[str, ...] = ()
    time_var: str | None = "t"
    lipschitz_hint: float | None = None
    _tapes: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.states = tuple(self.states)
        self.params = tuple(self.params)
        self.rhs = tuple(lift(e) for e in self.rhs)
        if len(self.rhs) != len(self.states):
            raise PidReachError("one right-hand side per state is required")
        known = set(self.states) | set(self.params)
        if self.time_var:
            known.add(self.time_var)
        for name, e in zip(self.states, self.rhs):
            extra = free_vars(e) - known
            if extra:
                raise PidReachError(f"d{name}/dt uses undeclared names {sorted(extra)}")

    @classmethod
    def from_strings(cls, rhs: Mapping[str, str], params: Iterable[str] = (),
                     consts: Mapping[str, float] | None = None, time_var: str | None = "t"):
        states = tuple(rhs)
        names: dict = {n: None for n in states}
        names.update({p: None for p in params})
        if time_var:
            names[time_var] = None
        for k, v in (consts or {}).items():
            names[k] = const(v)
        exprs = tuple(parse(src, names) for src in rhs.values())
        return cls(states, exprs, tuple(params), time_var)

    @property
    def dim(self) -> int:
        return len(self.states)

    @property
    def uses_time(self) -> bool:
        return bool(self.time_var) and any(self.time_var in free_vars(e) for e in self.rhs)

    def eval(self, state: Box, params: Box | None = None, t: Interval | float = 0.0) -> Box:
        """Interval derivative over the given boxes."""
        from .expr import eval_interval

        env = dict(state.items())
        if params is not None:
            env.update(params.items())
        if self.time_var:
            env[self.time_var] = as_interval(t)
        return Box([(n, eval_interval(e, env)) for n, e in zip(self.states, self.rhs)])

    def tape(self, dyn: tuple[str, ...], params: tuple[str, ...]):
        key = (dyn, params)
        tp = self._tapes.get(key)
        if tp is None:
            outs = list(self.rhs) + [const(1.0)] * (len(dyn) - len(self.states))
            tp = compile_tape(outs, dyn + params)
            self._tapes[key] = tp
        return tp


@dataclass(frozen=True, eq=False)
class FlowEnclosure:
    """Sequence of step enclosures tiling ``[0, horizon]`` (time since start).

    ``times[i]`` are the step boundaries; ``node_lo/hi[i]`` enclose the state
    at ``times[i]`` and ``step_lo/hi[i]`` the state over
    ``[times[i], times[i + 1]]``.
    """

    names: tuple[str, ...]
    start: Box
    horizon: float
    times: np.ndarray
    node_lo: np.ndarray
    node_hi: np.ndarray
    step_lo: np.ndarray
    step_hi: np.ndarray
    low_order_steps: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def _box(self, lo, hi) -> Box:
        return Box([(n, Interval._raw(l, h)) for n, l, h in zip(self.names, lo, hi)])

    @property
    def steps(self) -> list[tuple[Interval, Box]]:
        return [(Interval._raw(self.times[i], self.times[i + 1]), self._box(self.step_lo[i], self.step_hi[i]))
                for i in range(self.n_steps)]

    @property
    def final(self) -> Box:
        return self._box(self.node_lo[-1], self.node_hi[-1])

    def node(self, i: int) -> Box:
        return self._box(self.node_lo[i], self.node_hi[i])

    def hull(self) -> Box:
        return self._box(self.step_lo.min(axis=0), self.step_hi.max(axis=0))


def eval_flow_at(flow: FlowEnclosure, t) -> Box:
    """Hull of the step boxes whose time interval meets ``t``."""
    t = as_interval(t)
    if t.lo < 0.0 or t.hi > flow.horizon:
        raise OutOfHorizon(f"time {t!r} outside [0, {flow.horizon}]")
    times = flow.times
    if t.lo == t.hi:
        i = int(np.searchsorted(times, t.lo))
        if i < len(times) and times[i] == t.lo:
            return flow.node(i)
    first = max(int(np.searchsorted(times, t.lo, side="right")) - 1, 0)
    last = min(int(np.searchsorted(times, t.hi, side="left")), flow.n_steps)
    first = min(first, flow.n_steps - 1)
    last = max(last, first + 1)
    lo = flow.step_lo[first:last].min(axis=0)
    hi = flow.step_hi[first:last].max(axis=0)
    return flow._box(lo, hi)


# ---------------------------------------------------------------------------
# vectorised interval helpers (endpoint arrays, outward rounded)

def _iv_pow(hl, hh, n):
    pl, ph = np.float64(1.0), np.float64(1.0)
    for _ in range(n):
        pl, ph = _v_mul(pl, ph, np.float64(hl), np.float64(hh))
    return np.float64(pl), np.float64(ph)


def _mv(al, ah, xl, xh, backend=None):
    lo, hi = iv_matmul(al, ah, xl[:, None], xh[:, None], backend)
    return lo[:, 0], hi[:, 0]


def _mid(lo, hi):
    m = lo + 0.5 * (hi - lo)
    return np.where(lo == hi, lo, np.minimum(np.maximum(m, lo), hi))


@dataclass
class _SetRep:
    """``z in centre + A r + s`` with ``r in [rl, rh]`` and ``s in [sl, sh]``;
    ``box`` is an interval hull of that set."""

    centre: np.ndarray
    A: np.ndarray
    rl: np.ndarray
    rh: np.ndarray
    sl: np.ndarray
    sh: np.ndarray
    box_l: np.ndarray
    box_h: np.ndarray

    @classmethod
    def from_box(cls, lo, hi):
        c = _mid(lo, hi)
        rl, rh = _v_add(lo, hi, -c, -c)
        n = len(lo)
        return cls(c, np.eye(n), rl, rh, np.zeros(n), np.zeros(n), lo.copy(), hi.copy())


class _Stepper:
    """Step machinery for one (field, dims, params) combination.

    The set being propagated lives in ``z = (integrated dims, wide params)``;
    parameters are carried along with zero derivative so their correlation
    with the state is not lost.
    """

    def __init__(self, fld: VectorField, dyn: tuple[str, ...], params: tuple[str, ...],
                 p_lo, p_hi, cfg: OdeConfig):
        self.cfg = cfg
        self.tape = fld.tape(dyn, params)
        self.n_dyn = len(dyn)
        self.p_lo = np.asarray(p_lo, dtype=float)
        self.p_hi = np.asarray(p_hi, dtype=float)
        p_wide = self.p_lo < self.p_hi
        wide_idx = np.flatnonzero(p_wide)
        self.wide_idx = wide_idx
        self.seed = np.full(len(dyn) + len(params), -1, dtype=np.int64)
        self.seed[:self.n_dyn] = np.arange(self.n_dyn)
        self.seed[self.n_dyn + wide_idx] = self.n_dyn + np.arange(len(wide_idx))
        self.nz = self.n_dyn + len(wide_idx)
        self.no_seed = np.full_like(self.seed, -1)
        self._buf = {}

    # z <-> tape inputs
    def z_box(self, x_lo, x_hi):
        return (np.concatenate([x_lo, self.p_lo[self.wide_idx]]),
                np.concatenate([x_hi, self.p_hi[self.wide_idx]]))

    def _params(self, zl, zh):
        pl, ph = self.p_lo.copy(), self.p_hi.copy()
        pl[self.wide_idx] = zl[self.n_dyn:]
        ph[self.wide_idx] = zh[self.n_dyn:]
        return pl, ph

    def _run(self, zl, zh, order, seeded):
        pl, ph = self._params(zl, zh)
        n = self.n_dyn
        key = (order, seeded)
        flag, lo, hi = taylor_coeffs(
            self.tape, n, np.concatenate([zl[:n], pl]), np.concatenate([zh[:n], ph]),
            self.seed if seeded else self.no_seed, order, self.nz if seeded else 0,
            out=self._buf.get(key), backend=self.cfg.backend)
        self._buf[key] = (lo, hi)
        return flag, lo, hi

    def deriv(self, zl, zh):
        flag, lo, hi = self._run(zl, zh, 0, False)
        if flag & FLAG_DIVZERO:
            return None
        out = self.tape.outputs[:self.n_dyn]
        return lo[out, 0, 0], hi[out, 0, 0]

    def apriori(self, zl, zh, h):
        n = self.n_dyn
        x_lo, x_hi = zl[:n], zh[:n]
        f = self.deriv(zl, zh)
        if f is None:
            return None
        hz = (np.zeros(n), np.full(n, h))
        bl, bh = _v_add(x_lo, x_hi, *_v_mul(*hz, f[0], f[1]))
        for _ in range(self.cfg.max_picard_iters):
            pad = 0.1 * (bh - bl) + 1e-12 * (1.0 + np.maximum(np.abs(bl), np.abs(bh)))
            bl, bh = _v_dn(bl - pad), _v_up(bh + pad)
            f = self.deriv(np.concatenate([bl, zl[n:]]), np.concatenate([bh, zh[n:]]))
            if f is None or not (np.all(np.isfinite(f[0])) and np.all(np.isfinite(f[1]))):
                return None
            nl, nh = _v_add(x_lo, x_hi, *_v_mul(*hz, f[0], f[1]))
            if np.all(nl >= bl) and np.all(nh <= bh):
                return nl, nh, f
            bl, bh = np.minimum(bl, nl), np.maximum(bh, nh)
        return None

    def step(self, rep: _SetRep, t0: float, t1: float):
        """One step from ``t0`` to ``t1``.  Returns ``None`` on failure, else
        ``(new_rep, step_lo, step_hi, ok_tol, low_order)``."""
        cfg = self.cfg
        be = cfg.backend
        K = cfg.taylor_order
        n, nz = self.n_dyn, self.nz
        if not t1 > t0:
            return None
        d = t1 - t0
        hl, hh = (np.float64(d), np.float64(d)) if t0 == 0.0 else (_v_dn(np.float64(d)), _v_up(np.float64(d)))
        zl, zh = rep.box_l, rep.box_h
        apr = self.apriori(zl, zh, hh)
        if apr is None:
            return None
        bl, bh, fB = apr
        zbl, zbh = np.concatenate([bl, zl[n:]]), np.concatenate([bh, zh[n:]])
        flag, lo, hi = self._run(zbl, zbh, K + 1, False)
        if flag & FLAG_DIVZERO:
            return None
        if flag & FLAG_NONSMOOTH:
            # only first-order information is valid: x(h) in X + h f(B)
            nl, nh = _v_add(zl[:n], zh[:n], *_v_mul(np.full(n, hl), np.full(n, hh), fB[0], fB[1]))
            nl, nh = np.maximum(nl, bl), np.minimum(nh, bh)
            new = _SetRep.from_box(np.concatenate([nl, zl[n:]]), np.concatenate([nh, zh[n:]]))
            return new, bl, bh, True, True
        rl, rh = lo[:n, K + 1, 0], hi[:n, K + 1, 0]
        rem_l, rem_h = _v_mul(rl, rh, *_iv_pow(hl, hh, K + 1))
        srem_l, srem_h = _v_mul(rl, rh, *_iv_pow(0.0, hh, K + 1))
        scale = np.maximum(1.0, np.maximum(np.abs(zl[:n]), np.abs(zh[:n])))
        ok_tol = bool(np.all(rem_h - rem_l <= cfg.target_width * scale * hh))

        zc = rep.centre
        # the mean-value segment runs from the centre to any point of the set
        gl, gh = np.minimum(zl, zc), np.maximum(zh, zc)
        flag_c, clo, chi = self._run(zc, zc, K, False)
        flag_g, glo, ghi = self._run(gl, gh, K, True)
        if (flag_c | flag_g) & (FLAG_DIVZERO | FLAG_NONSMOOTH):
            return None
        c_l, c_h = clo[:n, :, 0].T, chi[:n, :, 0].T                      # (K+1, n)
        v_l, v_h = glo[:n, :, 0].T, ghi[:n, :, 0].T
        j_l = np.transpose(glo[:n, :, 1:], (1, 0, 2))                    # (K+1, n, nz)
        j_h = np.transpose(ghi[:n, :, 1:], (1, 0, 2))
        dz_l, dz_h = _v_add(gl, gh, -zc, -zc)
        eye = np.eye(nz)[n:]

        # node at t1 -------------------------------------------------------
        tl, th = iv_poly(c_l, c_h, hl, hh, be)
        vl, vh = _v_add(tl, th, rem_l, rem_h)
        vl, vh = np.concatenate([vl, zc[n:]]), np.concatenate([vh, zc[n:]])
        Jl, Jh = iv_poly(j_l, j_h, hl, hh, be)
        Jl, Jh = np.vstack([Jl, eye]), np.vstack([Jh, eye])
        # direct mean-value form and plain Taylor form
        dl, dh = _v_add(vl, vh, *_mv(Jl, Jh, dz_l, dz_h, be))
        pl_, ph_ = iv_poly(v_l, v_h, hl, hh, be)
        pl_, ph_ = _v_add(pl_, ph_, rem_l, rem_h)
        box_l = np.maximum(dl, np.concatenate([np.maximum(pl_, bl), zl[n:]]))
        box_h = np.minimum(dh, np.concatenate([np.minimum(ph_, bh), zh[n:]]))
        if cfg.wrapping == "qr":
            new = self._qr_update(rep, vl, vh, Jl, Jh, box_l, box_h)
        else:
            new = _SetRep.from_box(box_l, box_h)
        if new is None or np.any(new.box_l > new.box_h):
            return None

        # enclosure over [t0, t1] ------------------------------------------
        sl0 = np.float64(0.0)
        tl, th = iv_poly(c_l, c_h, sl0, hh, be)
        tl, th = _v_add(tl, th, srem_l, srem_h)
        Jl, Jh = iv_poly(j_l, j_h, sl0, hh, be)
        sl, sh = _v_add(tl, th, *_mv(Jl, Jh, dz_l, dz_h, be))
        pl_, ph_ = iv_poly(v_l, v_h, sl0, hh, be)
        pl_, ph_ = _v_add(pl_, ph_, srem_l, srem_h)
        sl = np.maximum(np.maximum(sl, pl_), bl)
        sh = np.minimum(np.minimum(sh, ph_), bh)
        if np.any(sl > sh):
            return None
        return new, sl, sh, ok_tol, False

    def _qr_update(self, rep: _SetRep, vl, vh, Jl, Jh, box_l, box_h):
        be = self.cfg.backend
        centre = _mid(vl, vh)
        wl, wh = _v_add(vl, vh, -centre, -centre)
        # J A (interval) and the new orthogonal frame from its midpoint
        MAl, MAh = iv_matmul(Jl, Jh, rep.A, rep.A, be)
        B = _mid(MAl, MAh)
        # Two frames: plain Lohner (keeps rotations exact) and one
        # orthogonalised after scaling every dim by its width (keeps dims of
        # wildly different size apart).  Both are sound; keep the tighter.
        w = box_h - box_l
        w = np.maximum(w, 1e-12 * np.maximum(1.0, np.abs(centre)))
        best, best_vol = None, np.inf
        for D in (np.ones_like(w), np.exp2(np.round(np.log2(w)))):
            new = self._frame(rep, B, D, centre, wl, wh, MAl, MAh, Jl, Jh)
            if new is None:
                continue
            hl, hh = new[1]
            vol = float(np.sum(np.log2(np.maximum(hh - hl, 1e-300) / w)))
            if vol < best_vol:
                best, best_vol = new, vol
        if best is None:
            return None
        (Q, rl, rh, sl, sh), (hl, hh) = best
        return _SetRep(centre, Q, rl, rh, sl, sh, np.maximum(hl, box_l), np.minimum(hh, box_h))

    def _frame(self, rep, B, D, centre, wl, wh, MAl, MAh, Jl, Jh):
        """Re-express the set in the frame ``A = D Q``, ``Q`` orthogonal in
        the scaled coordinates.  Powers of two keep ``A`` and ``C = A^-1``
        exact."""
        nz = self.nz
        be = self.cfg.backend
        Bs = B / D[:, None]
        widths = rep.rh - rep.rl
        order = np.argsort(-(np.linalg.norm(Bs, axis=0) * np.maximum(widths, 1e-300)), kind="stable")
        Q, _ = np.linalg.qr(Bs[:, order])
        if not np.all(np.isfinite(Q)):
            return None
        C = Q.T / D[None, :]
        Q = Q * D[:, None]
        CMl, CMh = iv_matmul(C, C, MAl, MAh, be)
        rl, rh = _mv(CMl, CMh, rep.rl, rep.rh, be)
        rl, rh = _v_add(rl, rh, *_mv(C, C, wl, wh, be))
        CJl, CJh = iv_matmul(C, C, Jl, Jh, be)
        rl, rh = _v_add(rl, rh, *_mv(CJl, CJh, rep.sl, rep.sh, be))
        # the set of z - centre, boxed naively; only feeds the tiny residual term
        stl, sth = _v_add(wl, wh, *_mv(MAl, MAh, rep.rl, rep.rh, be))
        stl, sth = _v_add(stl, sth, *_mv(Jl, Jh, rep.sl, rep.sh, be))
        QCl, QCh = iv_matmul(Q, Q, C, C, be)
        El, Eh = _v_add(np.eye(nz), np.eye(nz), -QCh, -QCl)
        sl, sh = _mv(El, Eh, stl, sth, be)
        # hull of centre + Q r + s
        hl, hh = _v_add(*_mv(Q, Q, rl, rh, be), sl, sh)
        hl, hh = _v_add(hl, hh, centre, centre)
        return (Q, rl, rh, sl, sh), (hl, hh)


def _check_box(b: Box, what: str):
    for k, v in b.items():
        if not v.is_bounded():
            raise PidReachError(f"{what} dimension {k!r} is unbounded")


def enclose_flow(fld: VectorField, x0: Box, params: Box | None = None, horizon: float = 1.0,
                 cfg: OdeConfig | None = None, t0=0.0) -> FlowEnclosure:
    """Enclose all solutions from ``x0`` (and every parameter in ``params``)
    over ``[0, horizon]``.  ``t0`` is the initial value of ``fld.time_var``."""
    cfg = cfg or OdeConfig()
    params = params if params is not None else Box()
    if not horizon > 0:
        raise PidReachError("horizon must be positive")
    _check_box(x0, "initial")
    _check_box(params, "parameter")
    missing = [s for s in fld.states if s not in x0]
    if missing:
        raise PidReachError(f"initial box lacks {missing}")
    dyn = fld.states
    x_lo = np.array([x0[s].lo for s in dyn])
    x_hi = np.array([x0[s].hi for s in dyn])
    names = dyn
    if fld.uses_time and fld.time_var not in fld.states:
        t0 = as_interval(t0)
        dyn = dyn + (fld.time_var,)
        x_lo = np.append(x_lo, t0.lo)
        x_hi = np.append(x_hi, t0.hi)
    used = set().union(*(free_vars(e) for e in fld.rhs)) if fld.rhs else set()
    absent = [p for p in fld.params if p not in params and p in used]
    if absent:
        raise PidReachError(f"no value for parameters {absent}")
    pnames = tuple(p for p in fld.params if p in params)
    p_lo = np.array([params[p].lo for p in pnames])
    p_hi = np.array([params[p].hi for p in pnames])
    stepper = _Stepper(fld, dyn, pnames, p_lo, p_hi, cfg)
    times, nodes_l, nodes_h, st_l, st_h, low = _integrate(stepper, x_lo, x_hi, float(horizon), cfg)
    n = len(names)
    return FlowEnclosure(names, x0.select(names), float(horizon), times,
                         nodes_l[:, :n], nodes_h[:, :n], st_l[:, :n], st_h[:, :n], low)


def _integrate(stepper: _Stepper, x_lo, x_hi, horizon: float, cfg: OdeConfig):
    n = stepper.n_dyn
    rep = _SetRep.from_box(*stepper.z_box(x_lo, x_hi))
    times = [0.0]
    nodes_l, nodes_h = [x_lo.copy()], [x_hi.copy()]
    st_l, st_h = [], []
    t = 0.0
    h = min(cfg.step_hint, horizon)
    low = 0
    n_steps = 0
    h_min = cfg.step_hint / 2.0 ** cfg.max_halvings
    while t < horizon:
        if n_steps >= cfg.max_steps:
            raise EnclosureBlowup(f"more than {cfg.max_steps} steps before t={horizon}")
        shrunk = False
        while True:
            h_try = min(h, horizon - t)
            t1 = t + h_try
            # land exactly on the horizon when close
            if horizon - t1 < 1e-9 * max(1.0, horizon):
                t1 = horizon
            at_floor = h_try <= h_min
            res = stepper.step(rep, t, t1)
            if res is not None:
                new, sl, sh, ok_tol, lo_order = res
                nl, nh = new.box_l[:n], new.box_h[:n]
                bad = _too_wide(nl, nh, cfg) or not (np.all(np.isfinite(nl)) and np.all(np.isfinite(nh)))
                if not bad and (ok_tol or at_floor):
                    break
                if bad and at_floor:
                    raise EnclosureBlowup(f"enclosure width exceeds the ceiling at t={t:.6g}")
            elif at_floor:
                raise EnclosureBlowup(f"a-priori enclosure failed to contract at t={t:.6g}")
            h = max(h_try / 2.0, h_min)
            shrunk = True
        low += int(lo_order)
        times.append(t1)
        nodes_l.append(nl)
        nodes_h.append(nh)
        st_l.append(sl)
        st_h.append(sh)
        rep = new
        t = t1
        n_steps += 1
        h = h_try if shrunk else min(2.0 * h_try, cfg.step_hint)
    return (np.asarray(times), np.asarray(nodes_l), np.asarray(nodes_h),
            np.asarray(st_l).reshape(len(st_l), -1), np.asarray(st_h).reshape(len(st_h), -1), low)


def _too_wide(lo, hi, cfg: OdeConfig) -> bool:
    scale = np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    with np.errstate(invalid="ignore", over="ignore"):
        return bool(np.any(hi - lo > cfg.width_ceiling * scale))
