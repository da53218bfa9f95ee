"""Stochastic parametric hybrid systems: model, simulation, validated paths.

A model has named state dimensions, two implicit clocks (``t`` restarts at
every jump, ``t_glob`` never does), random and nondeterministic parameters,
modes with a vector field each, guarded transitions with resets, and a goal
predicate.  Guards of the form ``t >= theta`` (``theta`` built from
parameters and constants) are *time-triggered*; they are the only guards the
validated engine handles.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import ndtr, ndtri

from .errors import (GuardNeverFires, InputError, ModelParseError,
                     NumericFailure, PidReachError, UnsupportedGuard)
from .expr import (FALSE, ZERO, Expr, Truth, build_function, const, eval_interval, eval_point,
                   free_vars, mode_function_source, parse, to_str, var)
from .interval import Box, Interval
from .ode import FlowEnclosure, OdeConfig, VectorField, enclose_flow, eval_flow_at

CLOCK = "t"
GLOBAL_CLOCK = "t_glob"
CLOCKS = (CLOCK, GLOBAL_CLOCK)
SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomNormal:
    """Normal law truncated to ``[lo, hi]`` (default ``mean +- 4 sd``) and
    renormalised there."""

    mean: float
    sd: float
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if not self.sd > 0:
            raise InputError("normal sd must be positive")
        lo = self.mean - 4 * self.sd if self.lo is None else self.lo
        hi = self.mean + 4 * self.sd if self.hi is None else self.hi
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise InputError("normal truncation bounds must be finite with lo < hi")
        object.__setattr__(self, "lo", float(lo))
        object.__setattr__(self, "hi", float(hi))

    kind = "normal"

    def _z(self, x):
        return (x - self.mean) / self.sd

    def cdf_interval(self, x: float) -> Interval:
        """Untruncated CDF at ``x`` as an interval."""
        z = Interval.point(x) - self.mean
        z = z / (self.sd * SQRT2)
        return (z.erf() + 1.0) * 0.5

    def mass(self, iv: Interval) -> Interval:
        num = self.cdf_interval(iv.hi) - self.cdf_interval(iv.lo)
        den = self.cdf_interval(self.hi) - self.cdf_interval(self.lo)
        num = Interval._raw(max(num.lo, 0.0), max(num.hi, 0.0))
        return num / den

    def ppf(self, u):
        a, b = ndtr(self._z(self.lo)), ndtr(self._z(self.hi))
        x = self.mean + self.sd * ndtri(a + np.asarray(u) * (b - a))
        return np.clip(x, self.lo, self.hi)


@dataclass(frozen=True)
class RandomUniform:
    lo: float
    hi: float
    kind = "uniform"

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise InputError("uniform bounds must be finite with lo < hi")

    def mass(self, iv: Interval) -> Interval:
        return (Interval.point(iv.hi) - iv.lo) / (Interval.point(self.hi) - self.lo)

    def ppf(self, u):
        return self.lo + np.asarray(u) * (self.hi - self.lo)


@dataclass(frozen=True)
class Nondet:
    lo: float
    hi: float
    kind = "nondet"

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo <= self.hi):
            raise InputError("nondeterministic bounds must be finite with lo <= hi")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    dist: RandomNormal | RandomUniform | Nondet

    @property
    def is_random(self) -> bool:
        return not isinstance(self.dist, Nondet)

    @property
    def domain(self) -> Interval:
        return Interval(self.dist.lo, self.dist.hi)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mode:
    name: str
    flow: Mapping[str, Expr]


@dataclass(frozen=True)
class Transition:
    src: str
    dst: str
    guard: Expr
    reset: Mapping[str, Expr] = field(default_factory=dict)


def time_trigger(guard: Expr) -> Expr | None:
    """``theta`` if ``guard`` reads ``t >= theta`` (or ``>``, ``=``, mirrored),
    else ``None``."""
    op = guard.op
    if op not in ("ge", "gt", "eq", "le", "lt"):
        return None
    a, b = guard.args
    if op in ("le", "lt"):
        a, b = b, a
    if op == "eq" and b == var(CLOCK):
        a, b = b, a
    if a == var(CLOCK) and CLOCK not in free_vars(b) and GLOBAL_CLOCK not in free_vars(b):
        return b
    return None


@dataclass(frozen=True, eq=False)
class Sphs:
    """Immutable hybrid-system description.

    ``flow`` entries missing from a mode are zero; reset entries missing
    from a transition are the identity (the local clock always restarts).
    ``outputs`` are named derived quantities kept for reporting; an output
    may be one expression or a per-mode mapping.
    """

    states: tuple[str, ...]
    params: tuple[ParamSpec, ...]
    modes: tuple[Mode, ...]
    transitions: tuple[Transition, ...]
    init_mode: str
    init: Mapping[str, Expr]
    goal: Mapping[str, Expr]
    horizon: float
    bounds: Mapping[str, Interval] = field(default_factory=dict)
    outputs: Mapping[str, Expr | Mapping[str, Expr]] = field(default_factory=dict)
    meta: Mapping[str, object] = field(default_factory=dict)
    name: str = "model"
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "transitions", tuple(self.transitions))
        if not self.horizon > 0 or not math.isfinite(self.horizon):
            raise InputError("time bound must be positive and finite")
        names = list(self.states) + [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise InputError("state and parameter names must be unique")
        clash = set(names) & set(CLOCKS)
        if clash:
            raise InputError(f"{sorted(clash)} are reserved clock names")
        mode_names = [m.name for m in self.modes]
        if len(set(mode_names)) != len(mode_names) or not mode_names:
            raise InputError("modes must be nonempty with unique names")
        if self.init_mode not in mode_names:
            raise InputError(f"initial mode {self.init_mode!r} is not a mode")
        known = set(names) | set(CLOCKS)
        for m in self.modes:
            self._check(m.flow.values(), known, f"mode {m.name}")
            extra = set(m.flow) - set(self.states)
            if extra:
                raise InputError(f"mode {m.name} defines flow for unknown {sorted(extra)}")
        for tr in self.transitions:
            if tr.src not in mode_names or tr.dst not in mode_names:
                raise InputError(f"transition {tr.src}->{tr.dst} uses an unknown mode")
            self._check([tr.guard, *tr.reset.values()], known, f"transition {tr.src}->{tr.dst}")
            extra = set(tr.reset) - set(self.states)
            if extra:
                raise InputError(f"reset writes unknown {sorted(extra)}")
        goal = self.goal
        if isinstance(goal, Expr):
            goal = {m: goal for m in mode_names}
        goal = {m: goal.get(m, FALSE) for m in mode_names}
        object.__setattr__(self, "goal", goal)
        self._check(goal.values(), known, "goal")
        pnames = {p.name for p in self.params}
        missing = set(self.states) - set(self.init)
        if missing:
            raise InputError(f"no initial value for {sorted(missing)}")
        self._check(self.init.values(), pnames, "initial state")

    @staticmethod
    def _check(exprs: Iterable[Expr], known: set, where: str):
        for e in exprs:
            extra = free_vars(e) - known
            if extra:
                raise InputError(f"{where}: unknown names {sorted(extra)}")

    def __getstate__(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "_cache"}
        return d

    def __setstate__(self, d):
        for k, v in d.items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "_cache", {})

    # lookups -------------------------------------------------------------
    @property
    def mode_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.modes)

    def mode(self, name: str) -> Mode:
        for m in self.modes:
            if m.name == name:
                return m
        raise KeyError(name)

    def flow_of(self, mode: str, state: str) -> Expr:
        return self.mode(mode).flow.get(state, ZERO)

    def outgoing(self, mode: str) -> list[Transition]:
        return [tr for tr in self.transitions if tr.src == mode]

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    @property
    def random_params(self) -> tuple[ParamSpec, ...]:
        return tuple(p for p in self.params if p.is_random)

    @property
    def nondet_params(self) -> tuple[ParamSpec, ...]:
        return tuple(p for p in self.params if not p.is_random)

    def param_box(self, kinds: str = "all") -> Box:
        ps = {"all": self.params, "random": self.random_params, "nondet": self.nondet_params}[kinds]
        return Box([(p.name, p.domain) for p in ps])

    def replace(self, **changes) -> "Sphs":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "_cache"}
        d.update(changes)
        return Sphs(**d)

    def with_params(self, **dists) -> "Sphs":
        """Copy with some parameter laws replaced (e.g. a gain fixed to a
        point via ``Nondet(v, v)``)."""
        new = []
        for p in self.params:
            new.append(ParamSpec(p.name, dists.pop(p.name)) if p.name in dists else p)
        if dists:
            raise InputError(f"unknown parameters {sorted(dists)}")
        return self.replace(params=tuple(new))

    def var_names(self) -> tuple[str, ...]:
        """Variable order used by generated point code."""
        return self.states + CLOCKS + self.param_names


# ---------------------------------------------------------------------------
# JSON model files
# ---------------------------------------------------------------------------

def _dist_from_json(d: Mapping, where: str):
    kind = d.get("dist", d.get("kind"))
    try:
        if kind == "normal":
            return RandomNormal(float(d["mean"]), float(d["sd"]), d.get("lo"), d.get("hi"))
        if kind == "uniform":
            return RandomUniform(float(d["lo"]), float(d["hi"]))
        if kind == "nondet":
            return Nondet(float(d["lo"]), float(d["hi"]))
    except KeyError as ex:
        raise InputError(f"{where}: missing field {ex.args[0]!r}") from None
    raise InputError(f"{where}: unknown distribution {kind!r}")


def _dist_to_json(dist) -> dict:
    if isinstance(dist, RandomNormal):
        return {"dist": "normal", "mean": dist.mean, "sd": dist.sd, "lo": dist.lo, "hi": dist.hi}
    return {"dist": dist.kind, "lo": dist.lo, "hi": dist.hi}


def _parse_at(src, names, where: str) -> Expr:
    try:
        return parse(src, names)
    except ModelParseError as ex:
        raise ModelParseError(f"{where}: {ex.args[0]}", ex.line, ex.col, str(src)) from None


def model_from_dict(doc: Mapping) -> tuple[Sphs, dict]:
    """Build a model from its JSON document.  Returns the model and the
    optional ``pid``/``perf`` sections (unparsed) for :func:`pid.compose`."""
    try:
        states = [s["name"] for s in doc["state"]]
        consts = {k: const(float(v)) for k, v in doc.get("consts", {}).items()}
        params = tuple(ParamSpec(p["name"], _dist_from_json(p, f"params[{i}]"))
                       for i, p in enumerate(doc.get("params", [])))
        names: dict = {n: None for n in states}
        names.update({c: None for c in CLOCKS})
        names.update({p.name: None for p in params})
        names.update(consts)
        outputs = {}
        for k, src in doc.get("outputs", {}).items():
            outputs[k] = _parse_at(src, names, f"outputs.{k}")
            names[k] = outputs[k]
        pnames = {p.name: None for p in params}
        pnames.update(consts)
        init = {s["name"]: _parse_at(s.get("init", 0.0), pnames, f"state.{s['name']}.init")
                for s in doc["state"]}
        bounds = {s["name"]: Interval(*s["bounds"]) for s in doc["state"] if "bounds" in s}
        modes = []
        for i, m in enumerate(doc["modes"]):
            flow = {k: _parse_at(v, names, f"modes[{i}].flow.{k}") for k, v in m.get("flow", {}).items()}
            modes.append(Mode(m["name"], flow))
        trs = []
        for i, tr in enumerate(doc.get("transitions", [])):
            g = _parse_at(tr["guard"], names, f"transitions[{i}].guard")
            r = {k: _parse_at(v, names, f"transitions[{i}].reset.{k}")
                 for k, v in tr.get("reset", {}).items()}
            trs.append(Transition(tr["from"], tr["to"], g, r))
        goal_doc = doc.get("goal", "false")
        if isinstance(goal_doc, Mapping):
            goal = {k: _parse_at(v, names, f"goal.{k}") for k, v in goal_doc.items()}
        else:
            goal = _parse_at(goal_doc, names, "goal")
        sys = Sphs(tuple(states), params, tuple(modes), tuple(trs),
                   doc.get("init_mode", modes[0].name if modes else ""), init, goal,
                   float(doc["horizon"]), bounds, outputs, dict(doc.get("meta", {})),
                   doc.get("name", "model"))
    except KeyError as ex:
        raise InputError(f"model is missing required field {ex.args[0]!r}") from None
    except (TypeError, ValueError) as ex:
        if isinstance(ex, PidReachError):
            raise
        raise InputError(f"malformed model: {ex}") from None
    extras = {k: doc[k] for k in ("pid", "perf") if k in doc}
    return sys, extras


def load_model(path: str | Path) -> tuple[Sphs, dict]:
    try:
        text = Path(path).read_text()
    except OSError as ex:
        raise InputError(f"cannot read model {path}: {ex.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as ex:
        raise ModelParseError(f"{path}: {ex.msg}", ex.lineno, ex.colno) from None
    return model_from_dict(doc)


def model_to_dict(sys: Sphs) -> dict:
    """Inverse of :func:`model_from_dict` (outputs are inlined)."""
    return {
        "name": sys.name,
        "horizon": sys.horizon,
        "state": [{"name": s, "init": to_str(sys.init[s]),
                   **({"bounds": list(sys.bounds[s])} if s in sys.bounds else {})}
                  for s in sys.states],
        "params": [{"name": p.name, **_dist_to_json(p.dist)} for p in sys.params],
        "modes": [{"name": m.name, "flow": {k: to_str(v) for k, v in m.flow.items()}}
                  for m in sys.modes],
        "transitions": [{"from": tr.src, "to": tr.dst, "guard": to_str(tr.guard),
                         "reset": {k: to_str(v) for k, v in tr.reset.items()}}
                        for tr in sys.transitions],
        "init_mode": sys.init_mode,
        "goal": {k: to_str(v) for k, v in sys.goal.items()},
        "meta": dict(sys.meta),
    }


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------

def unroll_paths(sys: Sphs, depth: int) -> list[tuple[str, ...]]:
    """All mode sequences from the initial mode with at most ``depth`` jumps."""
    if depth < 0:
        raise InputError("depth must be >= 0")
    out: list[tuple[str, ...]] = []
    stack = [(sys.init_mode,)]
    while stack:
        p = stack.pop()
        out.append(p)
        if len(p) <= depth:
            for tr in reversed(sys.outgoing(p[-1])):
                stack.append(p + (tr.dst,))
    return out


def maximal_paths(sys: Sphs, depth: int) -> list[tuple[str, ...]]:
    paths = unroll_paths(sys, depth)
    return [p for p in paths if len(p) == depth + 1 or not sys.outgoing(p[-1])]


# ---------------------------------------------------------------------------
# point simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    rtol: float = 1e-9
    atol: float = 1e-9
    sample_dt: float = 1.0
    max_step: float = math.inf


@dataclass
class Segment:
    mode: str
    t: np.ndarray          # global times of the samples
    x: np.ndarray          # (len(t), n_states)
    entry: float


@dataclass
class Trajectory:
    states: tuple[str, ...]
    segments: list[Segment]
    param_point: dict[str, float]
    goal_time: float | None = None
    outputs: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def reached(self) -> bool:
        return self.goal_time is not None

    @property
    def t(self) -> np.ndarray:
        return np.concatenate([s.t for s in self.segments])

    @property
    def x(self) -> np.ndarray:
        return np.vstack([s.x for s in self.segments])

    @property
    def mode_index(self) -> np.ndarray:
        return np.concatenate([np.full(len(s.t), i) for i, s in enumerate(self.segments)])

    def column(self, name: str) -> np.ndarray:
        if name in self.outputs:
            return self.outputs[name]
        return self.x[:, self.states.index(name)]

    def final(self) -> dict[str, float]:
        return dict(zip(self.states, self.segments[-1].x[-1].tolist()))


def _point_functions(sys: Sphs):
    """Generated numpy point code: flows, goals, outputs (shared with the
    batch kernels)."""
    fn = sys._cache.get("point_fns")
    if fn is None:
        vn = sys.var_names()
        flows = [[sys.flow_of(m.name, s) for s in sys.states] for m in sys.modes]
        goals = [[sys.goal[m.name]] for m in sys.modes]
        outs = [[o[m.name] if isinstance(o, Mapping) else o for o in sys.outputs.values()]
                for m in sys.modes]
        f_src = mode_function_source("flow", flows, None, vn)
        g_src = mode_function_source("goal", [[]] * len(sys.modes), goals, vn)
        o_src = mode_function_source("outs", outs, None, vn)
        fn = (build_function(f_src, "flow"), build_function(g_src, "goal"),
              build_function(o_src, "outs"))
        sys._cache["point_fns"] = fn
    return fn


def _resolve_params(sys: Sphs, point: Mapping[str, float]) -> np.ndarray:
    missing = [p for p in sys.param_names if p not in point]
    if missing:
        raise InputError(f"no value for parameters {missing}")
    vals = []
    for p in sys.params:
        v = float(point[p.name])
        if not p.domain.contains(v):
            raise InputError(f"{p.name}={v} lies outside its domain {p.domain!r}")
        vals.append(v)
    return np.array(vals)


def _init_state(sys: Sphs, env: Mapping[str, float]) -> np.ndarray:
    return np.array([float(eval_point(sys.init[s], env)) for s in sys.states])


def _theta(tr: Transition, env: Mapping[str, float]) -> float | None:
    th = time_trigger(tr.guard)
    return None if th is None else float(eval_point(th, env))


def _event_fn(tr: Transition, sys: Sphs, penv: dict):
    g = tr.guard
    if g.op not in ("lt", "le", "gt", "ge"):
        raise UnsupportedGuard(f"guard {to_str(g)!r} is neither time-triggered nor a single comparison")
    a, b = g.args
    sign = 1.0 if g.op in ("gt", "ge") else -1.0
    n = len(sys.states)

    def ev(t, y):
        env = dict(penv)
        env.update(zip(sys.states, y[:n]))
        env[CLOCK], env[GLOBAL_CLOCK] = y[n], y[n + 1]
        return sign * (eval_point(a, env) - eval_point(b, env))

    ev.terminal = True
    ev.direction = 1.0
    return ev


def simulate(sys: Sphs, param_point: Mapping[str, float], depth: int,
             cfg: SimConfig | None = None) -> Trajectory:
    """Adaptive RK45 point simulation with exact time-triggered jumps.

    The run stops at ``sys.horizon`` or when a jump beyond ``depth`` would
    be needed.  The goal is monitored at the samples (every
    ``cfg.sample_dt`` and at every segment end).
    """
    cfg = cfg or SimConfig()
    if depth < 0:
        raise InputError("depth must be >= 0")
    pvals = _resolve_params(sys, param_point)
    penv = dict(zip(sys.param_names, pvals.tolist()))
    flow_fn, goal_fn, out_fn = _point_functions(sys)
    n = len(sys.states)
    mode_idx = {m: i for i, m in enumerate(sys.mode_names)}
    x = _init_state(sys, penv)
    tg = 0.0
    mode = sys.init_mode
    jumps = 0
    segments: list[Segment] = []
    goal_time = None
    flags = np.zeros(1, dtype=bool)
    T = sys.horizon

    while True:
        mi = mode_idx[mode]
        outs = sys.outgoing(mode)
        timed, evented = [], []
        for tr in outs:
            th = _theta(tr, penv)
            if th is not None:
                timed.append((max(th, 0.0), tr))
            else:
                evented.append(tr)
        t_end = T - tg
        next_tr = None
        if timed:
            th, tr = min(timed, key=lambda x: x[0])
            if th > t_end:
                if not evented and jumps < depth:
                    raise GuardNeverFires(
                        f"mode {mode}: time trigger at t={th:g} lies beyond the time bound")
            else:
                t_end, next_tr = th, tr

        def rhs(t, y, mi=mi, tg0=tg):
            # clocks are exact functions of the solver time
            v = np.concatenate([y[:n], [t, tg0 + t], pvals])
            out = np.empty(n)
            flow_fn(mi, v, out)
            return np.concatenate([out, [1.0, 1.0]])

        y0 = np.concatenate([x, [0.0, tg]])
        grid = np.arange(0.0, t_end, cfg.sample_dt)
        grid = np.append(grid, t_end) if (len(grid) == 0 or grid[-1] < t_end) else grid
        events = [_event_fn(tr, sys, penv) for tr in evented]
        if t_end > 0:
            sol = solve_ivp(rhs, (0.0, t_end), y0, method="RK45", t_eval=grid, rtol=cfg.rtol,
                            atol=cfg.atol, max_step=cfg.max_step, events=events or None)
            if sol.status < 0:
                raise NumericFailure(f"integration failed in mode {mode}: {sol.message}")
            ts, ys = sol.t, sol.y.T
            fired = None
            if sol.status == 1:
                for k, te in enumerate(sol.t_events):
                    if len(te):
                        fired = evented[k]
                        ts = np.append(ts[ts < te[0]], te[0])
                        ys = np.vstack([ys[:len(ts) - 1], sol.y_events[k][0]])
                        break
            if fired is not None:
                next_tr = fired
        else:
            ts, ys = np.array([0.0]), y0[None, :]
        if not np.all(np.isfinite(ys)):
            raise NumericFailure(f"non-finite state in mode {mode}")
        ys = ys.copy()
        ys[:, n] = ts
        ys[:, n + 1] = tg + ts
        seg = Segment(mode, ys[:, n + 1].copy(), ys[:, :n].copy(), tg)
        segments.append(seg)
        if goal_time is None:
            for row in ys:
                goal_fn(mi, np.concatenate([row[:n + 2], pvals]), None, flags)
                if flags[0]:
                    goal_time = float(row[n + 1])
                    break
        x = ys[-1, :n]
        t_loc = ys[-1, n]
        tg = float(ys[-1, n + 1])
        if next_tr is None or jumps >= depth or tg >= T:
            break
        env = dict(penv)
        env.update(zip(sys.states, x.tolist()))
        env[CLOCK], env[GLOBAL_CLOCK] = t_loc, tg
        x = np.array([float(eval_point(next_tr.reset.get(s, var(s)), env)) for s in sys.states])
        mode = next_tr.dst
        jumps += 1

    traj = Trajectory(sys.states, segments, dict(penv), goal_time)
    if sys.outputs:
        rows = []
        for i, s in enumerate(segments):
            mi = mode_idx[s.mode]
            tl = s.t - s.entry
            v = np.vstack([s.x.T, tl, s.t, np.repeat(pvals[:, None], len(s.t), axis=1)])
            out = [None] * len(sys.outputs)
            out_fn(mi, v, out)
            rows.append(np.array([np.broadcast_to(o, s.t.shape) for o in out]))
        allv = np.hstack(rows)
        traj.outputs = {k: allv[j] for j, k in enumerate(sys.outputs)}
    return traj


# ---------------------------------------------------------------------------
# validated propagation along a path
# ---------------------------------------------------------------------------

def needed_states(sys: Sphs, extra: Iterable[Expr] = ()) -> tuple[str, ...]:
    """States that can influence the goal, guards or ``extra`` (cone of
    influence); the others need not be integrated."""
    roots: set[str] = set()
    for e in list(sys.goal.values()) + [tr.guard for tr in sys.transitions] + list(extra):
        roots |= free_vars(e)
    need = {s for s in roots if s in sys.states}
    changed = True
    while changed:
        changed = False
        for s in list(need):
            deps: set[str] = set()
            for m in sys.modes:
                deps |= free_vars(sys.flow_of(m.name, s))
            for tr in sys.transitions:
                if s in tr.reset:
                    deps |= free_vars(tr.reset[s])
            new = {d for d in deps if d in sys.states} - need
            if new:
                need |= new
                changed = True
    return tuple(s for s in sys.states if s in need)


@dataclass
class PathSegment:
    mode: str
    entry_glob: Interval           # t_glob at mode entry
    exit_local: Interval           # local time at which the mode is left
    taken: Truth                   # is this segment reached at all
    flow: FlowEnclosure | None
    entry: Box


@dataclass
class PathResult:
    path: tuple[str, ...]
    segments: list[PathSegment]
    final: Box
    goal: Truth                    # TRUE: every point surely reaches the goal


def _field(sys: Sphs, mode: str, dims: tuple[str, ...]) -> VectorField:
    key = ("field", mode, dims)
    f = sys._cache.get(key)
    if f is None:
        rhs = [sys.flow_of(mode, s) if s != GLOBAL_CLOCK else const(1.0) for s in dims]
        f = VectorField(dims, rhs, sys.param_names, CLOCK)
        sys._cache[key] = f
    return f


def _iv_min(a: Interval, b: Interval) -> Interval:
    return Interval._raw(min(a.lo, b.lo), min(a.hi, b.hi))


def flow_path(sys: Sphs, path: Sequence[str], state_box: Box | None, param_box: Box,
              cfg: OdeConfig | None = None, dims: Sequence[str] | None = None,
              check_goal: bool = True) -> PathResult:
    """Validated propagation along ``path`` for every parameter in
    ``param_box`` and initial state in ``state_box`` (default: the initial
    values evaluated over ``param_box``).

    ``dims`` restricts the integrated states (default: all).  Every mode is
    integrated up to its latest possible exit: the next jump on the path, a
    competing jump, or the time bound.  The goal verdict is TRUE when some
    segment that is surely reached has a step or step boundary, surely before the exit, on
    which the goal holds for the whole box; FALSE when it fails on every
    step of every segment that may be reached.
    """
    cfg = cfg or OdeConfig()
    path = tuple(path)
    if not path or path[0] != sys.init_mode:
        raise InputError("path must start in the initial mode")
    dims = tuple(sys.states) if dims is None else tuple(dims)
    penv = dict(param_box.items())
    for p in sys.param_names:
        if p not in penv:
            raise InputError(f"parameter box lacks {p!r}")
    uses_glob = any(GLOBAL_CLOCK in free_vars(sys.flow_of(m, s)) for m in path for s in dims)
    if state_box is None:
        state_box = Box([(s, eval_interval(sys.init[s], penv)) for s in dims])
    x = state_box.select(dims)
    tg = Interval.point(0.0)
    T = sys.horizon
    taken = Truth.TRUE
    segs: list[PathSegment] = []
    verdict = Truth.FALSE
    for i, mode in enumerate(path):
        goal = sys.goal[mode]
        # exits: time bound, path jump, competing time-triggered jumps
        remaining = Interval.point(T) - tg
        other = remaining
        nxt = path[i + 1] if i + 1 < len(path) else None
        jump_theta = jump_tr = None
        for tr in sys.outgoing(mode):
            th = time_trigger(tr.guard)
            if th is None:
                raise UnsupportedGuard(
                    f"guard {to_str(tr.guard)!r} is not time-triggered; use the statistical engine")
            th_iv = eval_interval(th, penv)
            th_iv = Interval._raw(max(th_iv.lo, 0.0), max(th_iv.hi, 0.0))
            if tr.dst == nxt and jump_tr is None:
                jump_theta, jump_tr = th_iv, tr
            else:
                other = _iv_min(other, th_iv)
        if nxt is not None and jump_tr is None:
            raise InputError(f"no transition {mode}->{nxt}")
        exit_iv = other if jump_theta is None else _iv_min(other, jump_theta)
        exit_iv = Interval._raw(max(exit_iv.lo, 0.0), max(exit_iv.hi, 0.0))
        flow = None
        if exit_iv.hi > 0:
            fld = _field(sys, mode, dims + ((GLOBAL_CLOCK,) if uses_glob else ()))
            x0 = x.merge(Box([(GLOBAL_CLOCK, tg)])) if uses_glob else x
            flow = enclose_flow(fld, x0, param_box, exit_iv.hi, cfg, t0=0.0)
        if check_goal and goal is not FALSE:
            v = _goal_on_flow(goal, flow, x, tg, exit_iv, penv)
            if taken is Truth.TRUE and v[0]:
                verdict = Truth.TRUE
            elif v[1] and taken is not Truth.FALSE and verdict is not Truth.TRUE:
                verdict = Truth.MAYBE
        segs.append(PathSegment(mode, tg, exit_iv, taken, flow, x))
        if nxt is None:
            break
        # does the jump happen before the other exits (and the time bound)?
        if jump_theta.hi < other.lo and jump_theta.hi < remaining.lo:
            jt = Truth.TRUE
        elif jump_theta.lo > other.hi or jump_theta.lo >= remaining.hi:
            jt = Truth.FALSE
        else:
            jt = Truth.MAYBE
        taken = taken & jt
        if taken is Truth.FALSE:
            break
        at = jump_theta.intersect(Interval._raw(0.0, exit_iv.hi)) or Interval.point(exit_iv.hi)
        xj = eval_flow_at(flow, at) if flow is not None else x
        env = dict(penv)
        env.update(xj.items())
        env[CLOCK] = at
        env[GLOBAL_CLOCK] = tg + at
        x = Box([(s, eval_interval(jump_tr.reset.get(s, var(s)), env)) for s in dims])
        tg = tg + at
    final = x if not segs or segs[-1].flow is None else segs[-1].flow.final
    return PathResult(path, segs, final, verdict)


def _goal_on_flow(goal: Expr, flow: FlowEnclosure | None, entry: Box, tg: Interval,
                  exit_iv: Interval, penv: Mapping[str, Interval]) -> tuple[bool, bool]:
    """(surely true somewhere before the exit, possibly true somewhere)."""
    maybe = False
    if flow is None:
        steps = [(Interval.point(0.0), entry)]
    else:
        steps = flow.steps
    if flow is not None:
        # node boxes are the tightest information at the step boundaries
        for i in range(1, flow.n_steps + 1):
            tn = Interval.point(flow.times[i])
            if tn.hi > exit_iv.lo:
                break
            env = dict(penv)
            env.update(flow.node(i).items())
            env.setdefault(CLOCK, tn)
            env[GLOBAL_CLOCK] = env.get(GLOBAL_CLOCK) if GLOBAL_CLOCK in flow.names else tg + tn
            if eval_interval(goal, env) is Truth.TRUE:
                return True, True
    for tint, box in steps:
        env = dict(penv)
        env.update(box.items())
        env.setdefault(CLOCK, tint)
        env[GLOBAL_CLOCK] = env.get(GLOBAL_CLOCK) if GLOBAL_CLOCK in box else tg + tint
        r = eval_interval(goal, env)
        if r is Truth.TRUE and tint.hi <= exit_iv.lo:
            return True, True
        if r is not Truth.FALSE:
            maybe = True
    return False, maybe
