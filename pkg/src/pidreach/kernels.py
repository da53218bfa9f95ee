"""Batched point simulation for Monte-Carlo work.

Every sample runs fixed-step RK4 on a common grid of width ``dt``.  A step
that contains a time-triggered jump is split so the jump happens exactly
at ``theta``; other guards are checked at grid points.  Monitored
predicates are evaluated at grid points and report whether they ever held,
for how long (grid-interval measure) and when first.

Two backends run the same schedule: a numba kernel that loops over samples
with ``prange``, and a numpy version vectorised across samples.  They agree
to rounding (``np.exp`` differs from libm in the last bit at most).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._jit import USING_NUMBA, njit, prange
from .errors import InputError
from .expr import FALSE, build_function, const, mode_function_source, var
from .sphs import Sphs, time_trigger

DEFAULT_DT = 0.5


@dataclass
class BatchResult:
    final: np.ndarray       # (B, n_states) at the end of each run
    any: np.ndarray         # (B, n_monitors) bool
    time: np.ndarray        # (B, n_monitors) time the monitor held
    first: np.ndarray       # (B, n_monitors) first time it held (nan if never)
    t_end: np.ndarray       # (B,) global time at which the run ended


_KERNEL_SRC = '''
def _rk4(mode, v, w, h, n, k1, k2, k3, k4):
    nv = v.shape[0]
    for i in range(n + 2, nv):
        w[i] = v[i]
    flow(mode, v, k1)
    for i in range(n):
        w[i] = v[i] + 0.5 * h * k1[i]
    w[n] = v[n] + 0.5 * h
    w[n + 1] = v[n + 1] + 0.5 * h
    flow(mode, w, k2)
    for i in range(n):
        w[i] = v[i] + 0.5 * h * k2[i]
    flow(mode, w, k3)
    for i in range(n):
        w[i] = v[i] + h * k3[i]
    w[n] = v[n] + h
    w[n + 1] = v[n + 1] + h
    flow(mode, w, k4)
    for i in range(n):
        v[i] = v[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    v[n] = v[n] + h
    v[n + 1] = v[n + 1] + h


def kernel(X0, P, TH, src, dst, timed, init_mode, depth, dt, T, nmon,
           out_x, out_any, out_time, out_first, out_end):
    B = X0.shape[0]
    n = X0.shape[1]
    m = P.shape[1]
    nt = src.shape[0]
    nsteps = int(np.ceil(T / dt - 1e-9))
    for b in prange(B):
        nv = n + 2 + m
        v = np.empty(nv)
        w = np.empty(nv)
        k1 = np.empty(n)
        k2 = np.empty(n)
        k3 = np.empty(n)
        k4 = np.empty(n)
        xn = np.empty(n)
        scratch = np.empty(1)
        flags = np.zeros(nmon + 1, dtype=np.bool_)
        gfl = np.zeros(1, dtype=np.bool_)
        for i in range(n):
            v[i] = X0[b, i]
        v[n] = 0.0
        v[n + 1] = 0.0
        for i in range(m):
            v[n + 2 + i] = P[b, i]
        mode = init_mode
        left = depth
        alive = True
        for i in range(nmon):
            out_any[b, i] = False
            out_time[b, i] = 0.0
            out_first[b, i] = np.nan
        mon(mode, v, scratch, flags)
        for i in range(nmon):
            if flags[i]:
                out_any[b, i] = True
                out_first[b, i] = 0.0
        for k in range(nsteps):
            t_target = min((k + 1) * dt, T)
            t_prev = v[n + 1]
            while alive and v[n + 1] < t_target:
                h = t_target - v[n + 1]
                jt = -1
                best = np.inf
                for j in range(nt):
                    if src[j] == mode and timed[j] == 1:
                        r = TH[b, j] - v[n]
                        if r < best:
                            best = r
                            jt = j
                jump = jt >= 0 and best <= h
                if jump:
                    h = max(best, 0.0)
                if h > 0.0:
                    _rk4(mode, v, w, h, n, k1, k2, k3, k4)
                if jump:
                    if left == 0:
                        alive = False
                        break
                    reset(jt, v, xn)
                    for i in range(n):
                        v[i] = xn[i]
                    v[n] = 0.0
                    mode = dst[jt]
                    left -= 1
                else:
                    v[n + 1] = t_target
            if not alive:
                break
            for j in range(nt):
                if src[j] == mode and timed[j] == 0:
                    guard(j, v, scratch, gfl)
                    if gfl[0]:
                        if left == 0:
                            alive = False
                        else:
                            reset(j, v, xn)
                            for i in range(n):
                                v[i] = xn[i]
                            v[n] = 0.0
                            mode = dst[j]
                            left -= 1
                        break
            mon(mode, v, scratch, flags)
            for i in range(nmon):
                if flags[i]:
                    out_time[b, i] += v[n + 1] - t_prev
                    if not out_any[b, i]:
                        out_any[b, i] = True
                        out_first[b, i] = v[n + 1]
            if not alive:
                break
        for i in range(n):
            out_x[b, i] = v[i]
        out_end[b] = v[n + 1]
'''


class BatchModel:
    """Compiled batch simulator for one model, depth and monitor list.

    ``monitors`` are predicates (or per-mode mappings of predicates) over
    states, clocks and parameters; by default the model's goal.
    """

    def __init__(self, sys: Sphs, depth: int, monitors: Sequence | None = None,
                 dt: float = DEFAULT_DT):
        if depth < 0:
            raise InputError("depth must be >= 0")
        if not dt > 0:
            raise InputError("dt must be positive")
        self.sys = sys
        self.depth = int(depth)
        self.dt = float(dt)
        mons = [sys.goal] if monitors is None else list(monitors)
        self.n_mon = len(mons)
        mode_names = sys.mode_names
        self.mode_index = {m: i for i, m in enumerate(mode_names)}
        per_mode = []
        for m in mode_names:
            per_mode.append([mon[m] if isinstance(mon, Mapping) else mon for mon in mons])
        vn = sys.var_names()
        self.n = len(sys.states)
        trs = sys.transitions
        thetas = [time_trigger(tr.guard) for tr in trs]
        self.src = np.array([self.mode_index[tr.src] for tr in trs], dtype=np.int64)
        self.dst = np.array([self.mode_index[tr.dst] for tr in trs], dtype=np.int64)
        self.timed = np.array([th is not None for th in thetas], dtype=np.int64)
        flows = [[sys.flow_of(m, s) for s in sys.states] for m in mode_names]
        resets = [[tr.reset.get(s, var(s)) for s in sys.states] for tr in trs] or [[]]
        guards = [[FALSE if th is not None else tr.guard] for tr, th in zip(trs, thetas)] or [[FALSE]]
        self._src = {
            "flow": mode_function_source("flow", flows, None, vn),
            "mon": mode_function_source("mon", [[]] * len(mode_names), per_mode, vn),
            "reset": mode_function_source("reset", resets, None, vn),
            "guard": mode_function_source("guard", [[]] * len(guards), guards, vn),
            "init": mode_function_source("init", [[sys.init[s] for s in sys.states]], None, vn),
            "theta": mode_function_source(
                "theta", [[th if th is not None else const(np.inf) for th in thetas] or [const(0.0)]],
                None, vn),
        }
        self._py = {k: build_function(s, k) for k, s in self._src.items()}
        self._nb = None

    # parameters -> initial states and jump times ---------------------------
    def _vars(self, P: np.ndarray) -> np.ndarray:
        B = P.shape[0]
        return np.vstack([np.zeros((self.n + 2, B)), P.T])

    def initial_states(self, P: np.ndarray) -> np.ndarray:
        V = self._vars(P)
        out = np.empty((self.n, P.shape[0]))
        self._py["init"](0, V, out)
        return out.T.copy()

    def thetas(self, P: np.ndarray) -> np.ndarray:
        V = self._vars(P)
        nt = len(self.src)
        out = np.empty((max(nt, 1), P.shape[0]))
        self._py["theta"](0, V, out)
        return np.ascontiguousarray(out[:nt].T)

    def param_matrix(self, values: Mapping[str, np.ndarray | float], size: int) -> np.ndarray:
        cols = []
        for p in self.sys.param_names:
            if p not in values:
                raise InputError(f"no value for parameter {p!r}")
            cols.append(np.broadcast_to(np.asarray(values[p], dtype=float), (size,)))
        return np.ascontiguousarray(np.column_stack(cols) if cols else np.zeros((size, 0)))

    # running ------------------------------------------------------------------
    def run(self, P: np.ndarray, backend: str | None = None) -> BatchResult:
        P = np.ascontiguousarray(P, dtype=float)
        if P.ndim != 2 or P.shape[1] != len(self.sys.param_names):
            raise InputError("parameter matrix must be (samples, n_params)")
        X0 = np.ascontiguousarray(self.initial_states(P))
        TH = self.thetas(P)
        use_nb = USING_NUMBA if backend is None else backend == "numba"
        if use_nb and not USING_NUMBA:
            raise InputError("numba backend requested but numba is disabled")
        if use_nb:
            return self._run_nb(X0, P, TH)
        return self._run_np(X0, P, TH)

    def _kernel(self):
        if self._nb is None:
            ns: dict = {"np": np, "prange": prange}
            for k in ("flow", "mon", "reset", "guard"):
                ns[k] = njit(cache=False)(build_function(self._src[k], k))
            exec(compile(_KERNEL_SRC, "<batch kernel>", "exec"), ns)
            ns["_rk4"] = njit(ns["_rk4"])
            self._nb = njit(parallel=True)(ns["kernel"])
        return self._nb

    def _alloc(self, B: int):
        return (np.empty((B, self.n)), np.zeros((B, self.n_mon), dtype=np.bool_),
                np.zeros((B, self.n_mon)), np.full((B, self.n_mon), np.nan), np.empty(B))

    def _run_nb(self, X0, P, TH) -> BatchResult:
        out = self._alloc(X0.shape[0])
        self._kernel()(X0, P, TH, self.src, self.dst, self.timed,
                       self.mode_index[self.sys.init_mode], self.depth, self.dt,
                       float(self.sys.horizon), self.n_mon, *out)
        return BatchResult(*out)

    def _run_np(self, X0, P, TH) -> BatchResult:
        f = self._py
        n, B = self.n, X0.shape[0]
        T, dt = float(self.sys.horizon), self.dt
        V = np.vstack([X0.T, np.zeros((2, B)), P.T])
        mode = np.full(B, self.mode_index[self.sys.init_mode])
        left = np.full(B, self.depth)
        alive = np.ones(B, dtype=bool)
        o_x, o_any, o_time, o_first, o_end = self._alloc(B)
        nmon = self.n_mon

        def monitor(idx, t_prev):
            for mm in np.unique(mode[idx]):
                sub = idx[mode[idx] == mm]
                flags = [None] * nmon
                f["mon"](int(mm), V[:, sub], None, flags)
                for i in range(nmon):
                    fl = np.broadcast_to(np.asarray(flags[i], dtype=bool), sub.shape)
                    hit = sub[fl]
                    if t_prev is None:
                        o_first[hit, i] = 0.0
                    else:
                        o_time[hit, i] += V[n + 1, hit] - t_prev[hit]
                        new = hit[~o_any[hit, i]]
                        o_first[new, i] = V[n + 1, new]
                    o_any[hit, i] = True

        def jump(js, jt):
            for j in np.unique(jt):
                sub = js[jt == j]
                out = np.empty((n, len(sub)))
                f["reset"](int(j), V[:, sub], out)
                V[:n, sub] = out
                V[n, sub] = 0.0
                mode[sub] = self.dst[j]
                left[sub] -= 1

        monitor(np.arange(B), None)
        nsteps = int(np.ceil(T / dt - 1e-9))
        nt = len(self.src)
        for k in range(nsteps):
            t_target = min((k + 1) * dt, T)
            t_prev = V[n + 1].copy()
            active = np.flatnonzero(alive & (V[n + 1] < t_target))
            while len(active):
                h = t_target - V[n + 1, active]
                best = np.full(len(active), np.inf)
                jt = np.full(len(active), -1)
                for j in range(nt):
                    if self.timed[j]:
                        r = TH[active, j] - V[n, active]
                        sel = (mode[active] == self.src[j]) & (r < best)
                        best[sel] = r[sel]
                        jt[sel] = j
                jmp = (jt >= 0) & (best <= h)
                h = np.where(jmp, np.maximum(best, 0.0), h)
                self._rk4_np(V, active, h, mode)
                V[n + 1, active[~jmp]] = t_target
                js, jj = active[jmp], jt[jmp]
                stop = left[js] == 0
                alive[js[stop]] = False
                jump(js[~stop], jj[~stop])
                active = np.flatnonzero(alive & (V[n + 1] < t_target))
            live = np.flatnonzero(alive & (t_prev < t_target))
            ended = np.zeros(B, dtype=bool)
            for j in range(nt):
                if self.timed[j] or not len(live):
                    continue
                sub = live[mode[live] == self.src[j]]
                if not len(sub):
                    continue
                flags = [None]
                f["guard"](j, V[:, sub], None, flags)
                fire = sub[np.broadcast_to(np.asarray(flags[0], dtype=bool), sub.shape)]
                stop = fire[left[fire] == 0]
                ended[stop] = True
                jump(fire[left[fire] > 0], np.full(np.count_nonzero(left[fire] > 0), j))
                live = np.setdiff1d(live, fire)
            watch = np.flatnonzero((alive | ended) & (t_prev < t_target))
            if len(watch):
                monitor(watch, t_prev)
            alive &= ~ended
            if not alive.any():
                break
        o_x[:] = V[:n].T
        o_end[:] = V[n + 1]
        return BatchResult(o_x, o_any, o_time, o_first, o_end)

    def _rk4_np(self, V, idx, h, mode):
        n = self.n
        fl = self._py["flow"]
        for mm in np.unique(mode[idx]):
            sel = mode[idx] == mm
            sub = idx[sel]
            hs = h[sel]
            v = V[:, sub]
            w = v.copy()
            k = [np.empty((n, len(sub))) for _ in range(4)]
            fl(int(mm), v, k[0])
            w[:n] = v[:n] + 0.5 * hs * k[0]
            w[n] = v[n] + 0.5 * hs
            w[n + 1] = v[n + 1] + 0.5 * hs
            fl(int(mm), w, k[1])
            w[:n] = v[:n] + 0.5 * hs * k[1]
            fl(int(mm), w, k[2])
            w[:n] = v[:n] + hs * k[2]
            w[n] = v[n] + hs
            w[n + 1] = v[n + 1] + hs
            fl(int(mm), w, k[3])
            V[:n, sub] = v[:n] + (hs / 6.0) * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3])
            V[n, sub] = v[n] + hs
            V[n + 1, sub] = v[n + 1] + hs


# ---------------------------------------------------------------------------
# random parameters
# ---------------------------------------------------------------------------

def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the stream ``(seed, *key)``; independent of
    how work is split between workers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def draw_random(sys: Sphs, size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Independent draws of every random parameter (inverse-CDF sampling)."""
    out = {}
    for p in sys.random_params:
        out[p.name] = p.dist.ppf(rng.random(size))
    return out
