"""Interval Taylor-coefficient kernels over a compiled :class:`~pidreach.expr.Tape`.

``taylor_coeffs`` fills ``lo/hi[slot, k, g]``: the k-th Taylor coefficient in
time of every tape slot along the ODE solution, where ``g = 0`` is the value
and ``g >= 1`` are partial derivatives with respect to the seeded inputs.
The first ``n_dyn`` tape variables are the integrated dimensions; output
``j`` of the tape is the time derivative of dimension ``j``.

Rounding: every computed endpoint is moved one ulp outward unless the
operation is exact by construction (an operand is an exact zero).  Library
``exp`` gets ``EXP_ULPS``.  The numba and numpy variants perform the same
operations in the same order.

Return flags: bit 0 set when a nonsmooth node (``pos``, step function) is
ambiguous on the evaluation box, bit 1 on division by an interval that
contains zero.
"""
from __future__ import annotations

import math

import numpy as np

from ._jit import USING_NUMBA, njit
from .expr import (OP_ADD, OP_CONST, OP_DIV, OP_EXP, OP_MUL, OP_NEG, OP_POS, OP_PWC,
                   OP_SQR, OP_SUB)

EXP_ULPS = 4
FLAG_NONSMOOTH = 1
FLAG_DIVZERO = 2
_INF = math.inf


@njit(cache=True, inline="always")
def _dn(x):
    return np.nextafter(x, -_INF)


@njit(cache=True, inline="always")
def _up(x):
    return np.nextafter(x, _INF)


@njit(cache=True, inline="always")
def _add_dn(x, y):
    if x == 0.0:
        return y
    if y == 0.0:
        return x
    return _dn(x + y)


@njit(cache=True, inline="always")
def _add_up(x, y):
    if x == 0.0:
        return y
    if y == 0.0:
        return x
    return _up(x + y)


@njit(cache=True, inline="always")
def _imul(al, ah, bl, bh):
    if (al == 0.0 and ah == 0.0) or (bl == 0.0 and bh == 0.0):
        return 0.0, 0.0
    p1 = al * bl
    p2 = al * bh
    p3 = ah * bl
    p4 = ah * bh
    return _dn(min(min(p1, p2), min(p3, p4))), _up(max(max(p1, p2), max(p3, p4)))


@njit(cache=True, inline="always")
def _idiv(al, ah, bl, bh):
    if al == 0.0 and ah == 0.0:
        return 0.0, 0.0
    p1 = al / bl
    p2 = al / bh
    p3 = ah / bl
    p4 = ah / bh
    return _dn(min(min(p1, p2), min(p3, p4))), _up(max(max(p1, p2), max(p3, p4)))


@njit(cache=True, inline="always")
def _iscale(al, ah, c):
    # [al, ah] * c for a positive float c
    if c == 1.0:
        return al, ah
    lo = al * c
    hi = ah * c
    return (_dn(lo) if lo != 0.0 else 0.0), (_up(hi) if hi != 0.0 else 0.0)


@njit(cache=True, inline="always")
def _isqr(al, ah):
    if al >= 0.0:
        lo, hi = al * al, ah * ah
    elif ah <= 0.0:
        lo, hi = ah * ah, al * al
    else:
        m = max(-al, ah)
        return 0.0, _up(m * m)
    return (_dn(lo) if lo != 0.0 else 0.0), (_up(hi) if hi != 0.0 else 0.0)


@njit(cache=True, inline="always")
def _iexp(al, ah):
    lo = math.exp(al)
    hi = math.exp(ah)
    for _ in range(EXP_ULPS):
        lo = _dn(lo)
        hi = _up(hi)
    if ah <= 0.0:
        hi = min(hi, 1.0)
    if al >= 0.0:
        lo = max(lo, 1.0)
    return max(lo, 0.0), hi


@njit(cache=True)
def _taylor_nb(ops, a, b, val, pw_off, pw_len, pw_breaks, pw_values,
               n_dyn, dyn_src, x_lo, x_hi, seed, order, lo, hi):
    ng1 = lo.shape[2]
    n_vars = x_lo.shape[0]
    n_slots = ops.shape[0]
    lo[:, :, :] = 0.0
    hi[:, :, :] = 0.0
    flag = 0
    for v in range(n_vars):
        lo[v, 0, 0] = x_lo[v]
        hi[v, 0, 0] = x_hi[v]
        if seed[v] >= 0:
            lo[v, 0, 1 + seed[v]] = 1.0
            hi[v, 0, 1 + seed[v]] = 1.0
    for k in range(order + 1):
        for s in range(n_vars, n_slots):
            op = ops[s]
            x = a[s]
            y = b[s]
            if op == OP_CONST:
                if k == 0:
                    lo[s, 0, 0] = val[s]
                    hi[s, 0, 0] = val[s]
            elif op == OP_ADD:
                for g in range(ng1):
                    lo[s, k, g] = _add_dn(lo[x, k, g], lo[y, k, g])
                    hi[s, k, g] = _add_up(hi[x, k, g], hi[y, k, g])
            elif op == OP_SUB:
                for g in range(ng1):
                    lo[s, k, g] = _add_dn(lo[x, k, g], -hi[y, k, g])
                    hi[s, k, g] = _add_up(hi[x, k, g], -lo[y, k, g])
            elif op == OP_NEG:
                for g in range(ng1):
                    lo[s, k, g] = -hi[x, k, g]
                    hi[s, k, g] = -lo[x, k, g]
            elif op == OP_MUL:
                for g in range(ng1):
                    accl = 0.0
                    acch = 0.0
                    for i in range(k + 1):
                        j = k - i
                        pl, ph = _imul(lo[x, i, g], hi[x, i, g], lo[y, j, 0], hi[y, j, 0])
                        if g > 0:
                            ql, qh = _imul(lo[x, i, 0], hi[x, i, 0], lo[y, j, g], hi[y, j, g])
                            pl = _add_dn(pl, ql)
                            ph = _add_up(ph, qh)
                        accl = _add_dn(accl, pl)
                        acch = _add_up(acch, ph)
                    lo[s, k, g] = accl
                    hi[s, k, g] = acch
            elif op == OP_SQR:
                # value
                accl = 0.0
                acch = 0.0
                for i in range((k + 1) // 2):
                    pl, ph = _imul(lo[x, i, 0], hi[x, i, 0], lo[x, k - i, 0], hi[x, k - i, 0])
                    accl = _add_dn(accl, _iscale(pl, ph, 2.0)[0])
                    acch = _add_up(acch, _iscale(pl, ph, 2.0)[1])
                if k % 2 == 0:
                    pl, ph = _isqr(lo[x, k // 2, 0], hi[x, k // 2, 0])
                    accl = _add_dn(accl, pl)
                    acch = _add_up(acch, ph)
                lo[s, k, 0] = accl
                hi[s, k, 0] = acch
                for g in range(1, ng1):
                    accl = 0.0
                    acch = 0.0
                    for i in range(k + 1):
                        pl, ph = _imul(lo[x, i, g], hi[x, i, g], lo[x, k - i, 0], hi[x, k - i, 0])
                        accl = _add_dn(accl, pl)
                        acch = _add_up(acch, ph)
                    lo[s, k, g], hi[s, k, g] = _iscale(accl, acch, 2.0)
            elif op == OP_DIV:
                bl0 = lo[y, 0, 0]
                bh0 = hi[y, 0, 0]
                if bl0 <= 0.0 <= bh0:
                    return flag | 2
                for g in range(ng1):
                    nl = lo[x, k, g]
                    nh = hi[x, k, g]
                    i0 = 1 if g == 0 else 0
                    for i in range(i0, k + 1):
                        # subtract d(b_i) * c_{k-i}
                        pl, ph = _imul(lo[y, i, g], hi[y, i, g], lo[s, k - i, 0], hi[s, k - i, 0])
                        nl = _add_dn(nl, -ph)
                        nh = _add_up(nh, -pl)
                    if g > 0:
                        for i in range(1, k + 1):
                            pl, ph = _imul(lo[y, i, 0], hi[y, i, 0], lo[s, k - i, g], hi[s, k - i, g])
                            nl = _add_dn(nl, -ph)
                            nh = _add_up(nh, -pl)
                    lo[s, k, g], hi[s, k, g] = _idiv(nl, nh, bl0, bh0)
            elif op == OP_EXP:
                if k == 0:
                    el, eh = _iexp(lo[x, 0, 0], hi[x, 0, 0])
                    lo[s, 0, 0] = el
                    hi[s, 0, 0] = eh
                    for g in range(1, ng1):
                        lo[s, 0, g], hi[s, 0, g] = _imul(el, eh, lo[x, 0, g], hi[x, 0, g])
                else:
                    for g in range(ng1):
                        accl = 0.0
                        acch = 0.0
                        for i in range(1, k + 1):
                            pl, ph = _imul(lo[x, i, g], hi[x, i, g], lo[s, k - i, 0], hi[s, k - i, 0])
                            if g > 0:
                                ql, qh = _imul(lo[x, i, 0], hi[x, i, 0], lo[s, k - i, g], hi[s, k - i, g])
                                pl = _add_dn(pl, ql)
                                ph = _add_up(ph, qh)
                            pl, ph = _iscale(pl, ph, float(i))
                            accl = _add_dn(accl, pl)
                            acch = _add_up(acch, ph)
                        lo[s, k, g], hi[s, k, g] = _idiv(accl, acch, float(k), float(k))
            elif op == OP_POS:
                al = lo[x, 0, 0]
                ah = hi[x, 0, 0]
                if al >= 0.0:
                    for g in range(ng1):
                        lo[s, k, g] = lo[x, k, g]
                        hi[s, k, g] = hi[x, k, g]
                elif ah > 0.0:
                    flag |= 1
                    for g in range(ng1):
                        lo[s, k, g] = min(lo[x, k, g], 0.0)
                        hi[s, k, g] = max(hi[x, k, g], 0.0)
                    if k == 0:
                        lo[s, 0, 0] = 0.0
            elif op == OP_PWC:
                if k == 0:
                    t = int(val[s])
                    bo = pw_off[2 * t]
                    vo = pw_off[2 * t + 1]
                    nb = pw_len[t]
                    il = 0
                    ih = 0
                    for j in range(nb):
                        if lo[x, 0, 0] >= pw_breaks[bo + j]:
                            il = j + 1
                        if hi[x, 0, 0] >= pw_breaks[bo + j]:
                            ih = j + 1
                    if il != ih:
                        flag |= 1
                    vl = pw_values[vo + il]
                    vh = vl
                    for j in range(il, ih + 1):
                        vl = min(vl, pw_values[vo + j])
                        vh = max(vh, pw_values[vo + j])
                    lo[s, 0, 0] = vl
                    hi[s, 0, 0] = vh
        if k < order:
            for j in range(n_dyn):
                src = dyn_src[j]
                for g in range(ng1):
                    lo[j, k + 1, g], hi[j, k + 1, g] = _idiv(lo[src, k, g], hi[src, k, g],
                                                             float(k + 1), float(k + 1))
    return flag


# --- numpy variant ---------------------------------------------------------

def _v_dn(x):
    return np.nextafter(x, -_INF)


def _v_up(x):
    return np.nextafter(x, _INF)


def _v_add(xl, xh, yl, yh):
    lo = np.where(xl == 0.0, yl, np.where(yl == 0.0, xl, _v_dn(xl + yl)))
    hi = np.where(xh == 0.0, yh, np.where(yh == 0.0, xh, _v_up(xh + yh)))
    return lo, hi


def _v_mul(al, ah, bl, bh):
    with np.errstate(invalid="ignore"):
        p1, p2, p3, p4 = al * bl, al * bh, ah * bl, ah * bh
    lo = _v_dn(np.minimum(np.minimum(p1, p2), np.minimum(p3, p4)))
    hi = _v_up(np.maximum(np.maximum(p1, p2), np.maximum(p3, p4)))
    zero = ((al == 0.0) & (ah == 0.0)) | ((bl == 0.0) & (bh == 0.0))
    return np.where(zero, 0.0, lo), np.where(zero, 0.0, hi)


def _v_div(al, ah, bl, bh):
    p1, p2, p3, p4 = al / bl, al / bh, ah / bl, ah / bh
    lo = _v_dn(np.minimum(np.minimum(p1, p2), np.minimum(p3, p4)))
    hi = _v_up(np.maximum(np.maximum(p1, p2), np.maximum(p3, p4)))
    zero = (al == 0.0) & (ah == 0.0)
    return np.where(zero, 0.0, lo), np.where(zero, 0.0, hi)


def _v_scale(al, ah, c):
    if c == 1.0:
        return al, ah
    lo, hi = al * c, ah * c
    return np.where(lo != 0.0, _v_dn(lo), 0.0), np.where(hi != 0.0, _v_up(hi), 0.0)


def _v_sqr(al, ah):
    lo = np.where(al >= 0.0, al * al, np.where(ah <= 0.0, ah * ah, 0.0))
    m = np.maximum(-al, ah)
    hi = np.where(al >= 0.0, ah * ah, np.where(ah <= 0.0, al * al, m * m))
    return np.where(lo != 0.0, _v_dn(lo), 0.0), np.where(hi != 0.0, _v_up(hi), 0.0)


def _v_exp(al, ah):
    lo, hi = np.exp(al), np.exp(ah)
    for _ in range(EXP_ULPS):
        lo, hi = _v_dn(lo), _v_up(hi)
    hi = np.where(ah <= 0.0, np.minimum(hi, 1.0), hi)
    lo = np.where(al >= 0.0, np.maximum(lo, 1.0), lo)
    return np.maximum(lo, 0.0), hi


def _taylor_np(ops, a, b, val, pw_off, pw_len, pw_breaks, pw_values,
               n_dyn, dyn_src, x_lo, x_hi, seed, order, lo, hi):
    ng1 = lo.shape[2]
    n_vars = x_lo.shape[0]
    n_slots = ops.shape[0]
    lo[...] = 0.0
    hi[...] = 0.0
    flag = 0
    lo[:n_vars, 0, 0] = x_lo
    hi[:n_vars, 0, 0] = x_hi
    for v in range(n_vars):
        if seed[v] >= 0:
            lo[v, 0, 1 + seed[v]] = 1.0
            hi[v, 0, 1 + seed[v]] = 1.0
    ops = ops.tolist()
    a = a.tolist()
    b = b.tolist()
    for k in range(order + 1):
        for s in range(n_vars, n_slots):
            op, x, y = ops[s], a[s], b[s]
            if op == OP_CONST:
                if k == 0:
                    lo[s, 0, 0] = hi[s, 0, 0] = val[s]
            elif op == OP_ADD:
                lo[s, k], hi[s, k] = _v_add(lo[x, k], hi[x, k], lo[y, k], hi[y, k])
            elif op == OP_SUB:
                lo[s, k], hi[s, k] = _v_add(lo[x, k], hi[x, k], -hi[y, k], -lo[y, k])
            elif op == OP_NEG:
                lo[s, k], hi[s, k] = -hi[x, k], -lo[x, k]
            elif op == OP_MUL:
                accl = np.zeros(ng1)
                acch = np.zeros(ng1)
                for i in range(k + 1):
                    j = k - i
                    pl, ph = _v_mul(lo[x, i], hi[x, i], lo[y, j, 0], hi[y, j, 0])
                    ql, qh = _v_mul(lo[x, i, 0], hi[x, i, 0], lo[y, j], hi[y, j])
                    ql[0] = qh[0] = 0.0
                    pl, ph = _v_add(pl, ph, ql, qh)
                    accl, acch = _v_add(accl, acch, pl, ph)
                lo[s, k], hi[s, k] = accl, acch
            elif op == OP_SQR:
                accl = np.zeros(1)
                acch = np.zeros(1)
                for i in range((k + 1) // 2):
                    pl, ph = _v_mul(lo[x, i, :1], hi[x, i, :1], lo[x, k - i, :1], hi[x, k - i, :1])
                    pl, ph = _v_scale(pl, ph, 2.0)
                    accl, acch = _v_add(accl, acch, pl, ph)
                if k % 2 == 0:
                    pl, ph = _v_sqr(lo[x, k // 2, :1], hi[x, k // 2, :1])
                    accl, acch = _v_add(accl, acch, pl, ph)
                lo[s, k, 0], hi[s, k, 0] = accl[0], acch[0]
                if ng1 > 1:
                    accl = np.zeros(ng1 - 1)
                    acch = np.zeros(ng1 - 1)
                    for i in range(k + 1):
                        pl, ph = _v_mul(lo[x, i, 1:], hi[x, i, 1:], lo[x, k - i, 0], hi[x, k - i, 0])
                        accl, acch = _v_add(accl, acch, pl, ph)
                    lo[s, k, 1:], hi[s, k, 1:] = _v_scale(accl, acch, 2.0)
            elif op == OP_DIV:
                bl0, bh0 = lo[y, 0, 0], hi[y, 0, 0]
                if bl0 <= 0.0 <= bh0:
                    return flag | FLAG_DIVZERO
                # value first: gradient terms use c_k
                nl, nh = lo[x, k, :1].copy(), hi[x, k, :1].copy()
                for i in range(1, k + 1):
                    pl, ph = _v_mul(lo[y, i, :1], hi[y, i, :1], lo[s, k - i, 0], hi[s, k - i, 0])
                    nl, nh = _v_add(nl, nh, -ph, -pl)
                cl, ch = _v_div(nl, nh, bl0, bh0)
                lo[s, k, 0], hi[s, k, 0] = cl[0], ch[0]
                if ng1 > 1:
                    nl, nh = lo[x, k, 1:].copy(), hi[x, k, 1:].copy()
                    for i in range(0, k + 1):
                        pl, ph = _v_mul(lo[y, i, 1:], hi[y, i, 1:], lo[s, k - i, 0], hi[s, k - i, 0])
                        nl, nh = _v_add(nl, nh, -ph, -pl)
                    for i in range(1, k + 1):
                        pl, ph = _v_mul(lo[y, i, 0], hi[y, i, 0], lo[s, k - i, 1:], hi[s, k - i, 1:])
                        nl, nh = _v_add(nl, nh, -ph, -pl)
                    lo[s, k, 1:], hi[s, k, 1:] = _v_div(nl, nh, bl0, bh0)
            elif op == OP_EXP:
                if k == 0:
                    el, eh = _v_exp(lo[x, 0, :1], hi[x, 0, :1])
                    lo[s, 0, 0], hi[s, 0, 0] = el[0], eh[0]
                    if ng1 > 1:
                        lo[s, 0, 1:], hi[s, 0, 1:] = _v_mul(el, eh, lo[x, 0, 1:], hi[x, 0, 1:])
                else:
                    accl = np.zeros(ng1)
                    acch = np.zeros(ng1)
                    for i in range(1, k + 1):
                        pl, ph = _v_mul(lo[x, i], hi[x, i], lo[s, k - i, 0], hi[s, k - i, 0])
                        ql, qh = _v_mul(lo[x, i, 0], hi[x, i, 0], lo[s, k - i], hi[s, k - i])
                        ql[0] = qh[0] = 0.0
                        pl, ph = _v_add(pl, ph, ql, qh)
                        pl, ph = _v_scale(pl, ph, float(i))
                        accl, acch = _v_add(accl, acch, pl, ph)
                    lo[s, k], hi[s, k] = _v_div(accl, acch, float(k), float(k))
            elif op == OP_POS:
                al, ah = lo[x, 0, 0], hi[x, 0, 0]
                if al >= 0.0:
                    lo[s, k], hi[s, k] = lo[x, k], hi[x, k]
                elif ah > 0.0:
                    flag |= FLAG_NONSMOOTH
                    lo[s, k] = np.minimum(lo[x, k], 0.0)
                    hi[s, k] = np.maximum(hi[x, k], 0.0)
                    if k == 0:
                        lo[s, 0, 0] = 0.0
            elif op == OP_PWC:
                if k == 0:
                    t = int(val[s])
                    bo, vo, nb = pw_off[2 * t], pw_off[2 * t + 1], pw_len[t]
                    brk = pw_breaks[bo:bo + nb]
                    il = int(np.sum(lo[x, 0, 0] >= brk))
                    ih = int(np.sum(hi[x, 0, 0] >= brk))
                    if il != ih:
                        flag |= FLAG_NONSMOOTH
                    vals = pw_values[vo + il: vo + ih + 1]
                    lo[s, 0, 0], hi[s, 0, 0] = vals.min(), vals.max()
        if k < order:
            src = np.asarray(dyn_src)
            lo[:n_dyn, k + 1], hi[:n_dyn, k + 1] = _v_div(lo[src, k], hi[src, k],
                                                        float(k + 1), float(k + 1))
    return flag


def taylor_coeffs(tape, n_dyn: int, x_lo, x_hi, seed, order: int, ng: int,
                  out=None, backend: str | None = None):
    """Run the Taylor recurrence; returns ``(flag, lo, hi)``.

    ``seed[v]`` is the gradient component seeded by input ``v`` (or -1) and
    ``ng`` the number of gradient components.
    """
    shape = (tape.n_slots, order + 1, ng + 1)
    if out is not None and out[0].shape == shape:
        lo, hi = out
    else:
        lo, hi = np.empty(shape), np.empty(shape)
    dyn_src = tape.outputs[:n_dyn]
    use_nb = USING_NUMBA if backend is None else backend == "numba"
    fn = _taylor_nb if use_nb else _taylor_np
    flag = fn(tape.ops, tape.a, tape.b, tape.val, tape.pw_off, tape.pw_len, tape.pw_breaks,
              tape.pw_values, n_dyn, dyn_src, np.ascontiguousarray(x_lo, dtype=np.float64),
              np.ascontiguousarray(x_hi, dtype=np.float64), np.asarray(seed, dtype=np.int64),
              order, lo, hi)
    return int(flag), lo, hi


# --- small interval linear algebra used by the integrator -----------------

@njit(cache=True)
def _mm_nb(al, ah, bl, bh):
    n, m = al.shape
    p = bl.shape[1]
    lo = np.zeros((n, p))
    hi = np.zeros((n, p))
    for j in range(m):
        for i in range(n):
            for k in range(p):
                pl, ph = _imul(al[i, j], ah[i, j], bl[j, k], bh[j, k])
                lo[i, k] = _add_dn(lo[i, k], pl)
                hi[i, k] = _add_up(hi[i, k], ph)
    return lo, hi


@njit(cache=True)
def _poly_nb(cl, ch, hl, hh):
    # cl: (K+1, m); Horner in the interval h = [hl, hh]
    K1, m = cl.shape
    lo = cl[K1 - 1].copy()
    hi = ch[K1 - 1].copy()
    for i in range(K1 - 2, -1, -1):
        for j in range(m):
            pl, ph = _imul(lo[j], hi[j], hl, hh)
            lo[j] = _add_dn(pl, cl[i, j])
            hi[j] = _add_up(ph, ch[i, j])
    return lo, hi


def _mm_np(al, ah, bl, bh):
    accl = np.zeros((al.shape[0], bl.shape[1]))
    acch = np.zeros_like(accl)
    for j in range(al.shape[1]):
        pl, ph = _v_mul(al[:, j, None], ah[:, j, None], bl[None, j, :], bh[None, j, :])
        accl, acch = _v_add(accl, acch, pl, ph)
    return accl, acch


def _poly_np(cl, ch, hl, hh):
    accl, acch = cl[-1].copy(), ch[-1].copy()
    for i in range(cl.shape[0] - 2, -1, -1):
        accl, acch = _v_mul(accl, acch, hl, hh)
        accl, acch = _v_add(accl, acch, cl[i], ch[i])
    return accl, acch


def iv_matmul(al, ah, bl, bh, backend: str | None = None):
    """Interval matrix product (point matrices pass the same array twice)."""
    use_nb = USING_NUMBA if backend is None else backend == "numba"
    args = [np.ascontiguousarray(x, dtype=np.float64) for x in (al, ah, bl, bh)]
    return (_mm_nb if use_nb else _mm_np)(*args)


def iv_poly(cl, ch, hl, hh, backend: str | None = None):
    """Horner evaluation of ``sum_i c[i] h^i`` for coefficient arrays ``c[i]``."""
    use_nb = USING_NUMBA if backend is None else backend == "numba"
    shape = cl.shape[1:]
    k1 = cl.shape[0]
    fl = np.ascontiguousarray(cl.reshape(k1, -1), dtype=np.float64)
    fh = np.ascontiguousarray(ch.reshape(k1, -1), dtype=np.float64)
    lo, hi = (_poly_nb if use_nb else _poly_np)(fl, fh, float(hl), float(hh))
    return lo.reshape(shape), hi.reshape(shape)
