"""Continuous-time PID control of a hybrid plant.

:func:`compose` closes the loop: in every mode the manipulated state gets
``+ u_total`` with ``u_total = Kp e + Ki e_int + Kd de/dt + u_b`` and
``e = sp(t_glob) - h_q(x)``.  The derivative term is obtained symbolically
along the plant field, so no filter state is needed.  Three states are
added: the error integral ``e_int`` and the performance indices ``FI``
(integral of ``e^2``) and ``FIw`` (integral of ``clock^2 e^2``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import AlgebraicLoop, InputError, NotComposed, ReservedName
from .expr import ZERO, Expr, const, diff, free_vars, or_, parse, piecewise, pos, var
from .sphs import CLOCK, CLOCKS, GLOBAL_CLOCK, Mode, Nondet, ParamSpec, Sphs, Trajectory

RESERVED = ("e_int", "FI", "FIw")
GAIN_NAMES = ("Kp", "Ki", "Kd")


@dataclass(frozen=True)
class PidConfig:
    """PID controller description.

    ``gains`` entries are numbers, names of plant parameters, or
    :class:`Nondet` domains (these become parameters ``Kp``/``Ki``/``Kd``).
    ``setpoint`` is a constant or ``(breaks, values)`` of a step function of
    ``t_glob``.  ``measured`` is one expression for all modes or a
    per-mode mapping; strings are parsed against the plant's names.
    """

    gains: tuple
    setpoint: float | tuple = 0.0
    measured: object = None
    manipulated: str = ""
    clamp_nonneg_total: bool = False
    u_b: float = 0.0

    def __post_init__(self):
        if len(self.gains) != 3:
            raise InputError("gains must be a (Kp, Ki, Kd) triple")
        object.__setattr__(self, "gains", tuple(self.gains))


@dataclass(frozen=True)
class PerfSpec:
    """Goal = ``bad or FI > fi_max or FIw > fiw_max``.

    ``fiw_clock`` selects the time weight of ``FIw``: ``"local"`` (restarts
    at every jump) or ``"global"``.
    """

    fi_max: float = math.inf
    fiw_max: float = math.inf
    bad: object = None
    fiw_clock: str = "local"

    def __post_init__(self):
        for name in ("fi_max", "fiw_max"):
            v = getattr(self, name)
            if not v > 0:
                raise InputError(f"{name} must be positive")
        if self.fiw_clock not in ("local", "global"):
            raise InputError("fiw_clock must be 'local' or 'global'")


def pid_law(k: Sequence[float], e: float, e_int: float, e_dot: float) -> float:
    kp, ki, kd = k
    return kp * e + ki * e_int + kd * e_dot


def _names(plant: Sphs) -> dict:
    names: dict = {n: None for n in plant.states + CLOCKS + plant.param_names}
    names.update({k: v for k, v in plant.outputs.items() if isinstance(v, Expr)})
    return names


def _expr(src, plant: Sphs, extra: Mapping | None = None) -> Expr:
    if isinstance(src, Expr):
        return src
    names = _names(plant)
    if extra:
        names.update(extra)
    return parse(src, names)


def _setpoint(sp) -> Expr:
    if isinstance(sp, (int, float)):
        return const(float(sp))
    breaks, values = sp
    return piecewise(var(GLOBAL_CLOCK), breaks, values)


def compose(plant: Sphs, pid: PidConfig, perf: PerfSpec | None = None) -> Sphs:
    """Closed-loop system ``plant || PID`` with the performance goal."""
    perf = perf or PerfSpec()
    taken = set(plant.states) | set(plant.param_names) | set(plant.outputs)
    clash = taken & set(RESERVED)
    if clash:
        raise ReservedName(f"{sorted(clash)} are reserved for the controller")
    if pid.manipulated not in plant.states:
        raise InputError(f"manipulated dimension {pid.manipulated!r} is not a state")

    params = list(plant.params)
    gains: list[Expr] = []
    for gname, g in zip(GAIN_NAMES, pid.gains):
        if isinstance(g, Nondet):
            if gname in taken:
                raise ReservedName(f"gain parameter {gname!r} clashes with the plant")
            params.append(ParamSpec(gname, g))
            gains.append(var(gname))
        elif isinstance(g, str):
            if g not in plant.param_names:
                raise InputError(f"gain {g!r} is not a parameter of the plant")
            gains.append(var(g))
        else:
            gains.append(const(float(g)))
    kp, ki, kd = gains

    if pid.measured is None:
        raise InputError("measured output is required")
    if isinstance(pid.measured, Mapping):
        measured = {m: _expr(pid.measured[m], plant) for m in plant.mode_names}
    else:
        h = _expr(pid.measured, plant)
        measured = {m: h for m in plant.mode_names}

    sp = _setpoint(pid.setpoint)
    e_int, FI, FIw = var("e_int"), var("FI"), var("FIw")
    clk = var(CLOCK if perf.fiw_clock == "local" else GLOBAL_CLOCK)
    modes = []
    u_out = {}
    e_out = {}
    for m in plant.modes:
        h = measured[m.name]
        if pid.manipulated in free_vars(h) and kd != ZERO:
            raise AlgebraicLoop(
                f"mode {m.name}: the measured output depends on {pid.manipulated!r}, "
                "so the derivative term depends on the control input")
        dh = diff(h, CLOCK) + diff(h, GLOBAL_CLOCK)
        for s in plant.states:
            ds = diff(h, s)
            if ds != ZERO:
                dh = dh + ds * plant.flow_of(m.name, s)
        e = sp - h
        e_dot = -dh
        u = kp * e + ki * e_int + kd * e_dot + pid.u_b
        if pid.clamp_nonneg_total:
            u = pos(u)
        flow = dict(m.flow)
        flow[pid.manipulated] = plant.flow_of(m.name, pid.manipulated) + u
        flow["e_int"] = e
        flow["FI"] = e * e
        flow["FIw"] = clk * clk * (e * e)
        modes.append(Mode(m.name, flow))
        u_out[m.name] = u
        e_out[m.name] = e

    bad = plant.goal if perf.bad is None else perf.bad
    goal = {}
    for m in plant.mode_names:
        b = _expr(bad[m] if isinstance(bad, Mapping) else bad, plant)
        terms = [b]
        if math.isfinite(perf.fi_max):
            terms.append(FI > perf.fi_max)
        if math.isfinite(perf.fiw_max):
            terms.append(FIw > perf.fiw_max)
        goal[m] = or_(*terms)

    outputs = dict(plant.outputs)
    for name, per_mode in (("u_total", u_out), ("e", e_out)):
        same = len(set(per_mode.values())) == 1
        outputs[name] = per_mode[plant.init_mode] if same else per_mode
    init = dict(plant.init)
    init.update({"e_int": ZERO, "FI": ZERO, "FIw": ZERO})
    meta = dict(plant.meta)
    meta.update({"composed": True, "clamp_nonneg_total": pid.clamp_nonneg_total,
                 "u_b": pid.u_b, "fiw_clock": perf.fiw_clock,
                 "fi_max": perf.fi_max, "fiw_max": perf.fiw_max,
                 "manipulated": pid.manipulated})
    return Sphs(plant.states + RESERVED, tuple(params), tuple(modes), plant.transitions,
                plant.init_mode, init, goal, plant.horizon, dict(plant.bounds), outputs, meta,
                plant.name)


def perf_indices(traj: Trajectory) -> tuple[float, float]:
    """Terminal ``(FI, FIw)`` of a closed-loop trajectory."""
    if "FI" not in traj.states or "FIw" not in traj.states:
        raise NotComposed("trajectory has no performance-index states")
    fin = traj.final()
    return fin["FI"], fin["FIw"]


def pid_from_dict(doc: Mapping, plant: Sphs) -> tuple[PidConfig, PerfSpec]:
    """``pid``/``perf`` sections of a model file."""
    pd = doc.get("pid")
    if pd is None:
        raise InputError("model has no pid section")
    gains = []
    for g in pd["gains"]:
        if isinstance(g, Mapping) and "nondet" in g:
            gains.append(Nondet(*map(float, g["nondet"])))
        else:
            gains.append(g if isinstance(g, str) else float(g))
    sp = pd.get("setpoint", 0.0)
    if isinstance(sp, Mapping):
        sp = (tuple(sp["breaks"]), tuple(sp["values"]))
    pid = PidConfig(tuple(gains), sp, pd["measured"], pd["manipulated"],
                    bool(pd.get("clamp_nonneg_total", False)), float(pd.get("u_b", 0.0)))
    pf = doc.get("perf", {})
    perf = PerfSpec(float(pf.get("fi_max", math.inf)), float(pf.get("fiw_max", math.inf)),
                    pf.get("bad"), pf.get("fiw_clock", "local"))
    return pid, perf
