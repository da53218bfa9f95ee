"""Hovorka gluco-regulatory model and the multi-meal artificial-pancreas scenario.

States (8): plasma/peripheral glucose masses ``Q1, Q2`` (mmol), insulin
absorption compartments ``S1, S2`` (U), plasma insulin ``I`` (U/L) and the
insulin actions ``x1, x2, x3``.  Blood glucose is ``G = Q1 / V_G`` (mmol/L).
Insulin enters through ``S1``; the controller adds ``u + u_b`` there.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import InputError, NoConvergence
from .expr import ZERO, Expr, const, exp, or_, var
from .kernels import BatchModel, stream
from ._jit import set_workers
from .ode import VectorField
from .pid import PerfSpec, PidConfig, compose
from .sphs import CLOCK, Mode, Nondet, ParamSpec, RandomNormal, Sphs, Transition

STATES = ("Q1", "Q2", "S1", "S2", "I", "x1", "x2", "x3")
MGDL_PER_MMOL = 18.016
G_LOW, G_HIGH = 4.0, 16.0


@dataclass(frozen=True)
class HovorkaParams:
    """Model constants for a ``w`` kg patient.  ``V_I``, ``V_G``, ``F_01`` and
    ``EGP_0`` default to their per-kg values times ``w``.

    ``ug_scale`` multiplies the gut absorption ``U_G`` in ``dQ1/dt``.  ``U_G``
    is already in mmol/min, so the default is 1.
    """

    w: float = 100.0
    k_e: float = 0.138
    k12: float = 0.066
    k_a1: float = 0.006
    k_a2: float = 0.06
    k_a3: float = 0.03
    k_b1: float = 0.0034
    k_b2: float = 0.056
    k_b3: float = 0.024
    t_maxI: float = 55.0
    V_I: float | None = None
    V_G: float | None = None
    F_01: float | None = None
    t_maxG: float = 40.0
    F_R: float = 0.0
    EGP_0: float | None = None
    A_G: float = 0.8
    ug_scale: float = 1.0

    def __post_init__(self):
        for name, per_kg in (("V_I", 0.12), ("V_G", 0.16), ("F_01", 0.0097), ("EGP_0", 0.0161)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, per_kg * self.w)
        for k, v in asdict(self).items():
            if not math.isfinite(v):
                raise InputError(f"{k} must be finite")
        for k in ("w", "k_e", "k12", "t_maxI", "V_I", "V_G", "t_maxG"):
            if getattr(self, k) <= 0:
                raise InputError(f"{k} must be positive")

    @property
    def k_a(self) -> tuple[float, float, float]:
        return (self.k_a1, self.k_a2, self.k_a3)

    @property
    def k_b(self) -> tuple[float, float, float]:
        return (self.k_b1, self.k_b2, self.k_b3)

    def setpoint(self, g_mgdl: float) -> float:
        """Plasma glucose mass (mmol) for a concentration in mg/dL."""
        return g_mgdl / MGDL_PER_MMOL * self.V_G


def gut_absorption(p: HovorkaParams, dg: Expr, t: Expr | None = None) -> Expr:
    t = var(CLOCK) if t is None else t
    return dg * (p.A_G / (0.18 * p.t_maxG ** 2)) * t * exp(t * (-1.0 / p.t_maxG))


def hovorka_rhs(p: HovorkaParams, dg: Expr, u: Expr) -> dict[str, Expr]:
    """Right-hand sides with meal size ``dg`` and insulin input ``u``."""
    Q1, Q2, S1, S2, I, x1, x2, x3 = (var(s) for s in STATES)
    ug = gut_absorption(p, dg)
    if p.ug_scale != 1.0:
        ug = p.ug_scale * ug
    dq1 = -p.F_01 - x1 * Q1 + p.k12 * Q2 - p.F_R + p.EGP_0 * (1.0 - x3) + ug
    rhs = {
        "Q1": dq1,
        "Q2": x1 * Q1 - (p.k12 + x2) * Q2,
        "S1": u - S1 * (1.0 / p.t_maxI),
        "S2": (S1 - S2) * (1.0 / p.t_maxI),
        "I": S2 * (1.0 / (p.t_maxI * p.V_I)) - p.k_e * I,
    }
    for i, x in enumerate((x1, x2, x3)):
        rhs[f"x{i + 1}"] = -p.k_a[i] * x + p.k_b[i] * I
    return rhs


def hovorka_field(p: HovorkaParams | None = None) -> VectorField:
    """Open-loop field with parameters ``D_G`` (g) and ``u`` (U/min)."""
    p = p or HovorkaParams()
    rhs = hovorka_rhs(p, var("D_G"), var("u"))
    return VectorField(STATES, tuple(rhs[s] for s in STATES), ("D_G", "u"), CLOCK)


def _steady(p: HovorkaParams, sp: float, ub: float) -> np.ndarray:
    I = ub / (p.V_I * p.k_e)
    x = [kb / ka * I for ka, kb in zip(p.k_a, p.k_b)]
    q2 = x[0] * sp / (p.k12 + x[1])
    s = ub * p.t_maxI
    return np.array([sp, q2, s, s, I, *x])


def _rhs_np(p: HovorkaParams, x: np.ndarray, u: float) -> np.ndarray:
    Q1, Q2, S1, S2, I, x1, x2, x3 = x
    return np.array([
        -p.F_01 - x1 * Q1 + p.k12 * Q2 - p.F_R + p.EGP_0 * (1 - x3),
        x1 * Q1 - (p.k12 + x2) * Q2,
        u - S1 / p.t_maxI,
        (S1 - S2) / p.t_maxI,
        S2 / (p.t_maxI * p.V_I) - p.k_e * I,
        *(-ka * xi + kb * I for ka, kb, xi in zip(p.k_a, p.k_b, (x1, x2, x3))),
    ])


def basal_steady_state(p: HovorkaParams | None = None, g_sp_mgdl: float = 110.0,
                       tol: float = 1e-10) -> tuple[dict[str, float], float]:
    """Equilibrium with ``Q1 = sp`` and no meal, and the basal rate holding it.

    All compartments except ``Q1`` are linear in the basal rate, so the
    problem reduces to a scalar root of ``dQ1/dt`` in ``u_b``.
    """
    p = p or HovorkaParams()
    if not 70.0 < g_sp_mgdl < 180.0:
        raise InputError("setpoint must lie in (70, 180) mg/dL")
    sp = p.setpoint(g_sp_mgdl)

    def f(ub):
        return _rhs_np(p, _steady(p, sp, ub), ub)[0]

    lo, hi = 0.0, 1e-3
    if f(lo) <= 0:
        raise NoConvergence("no positive basal rate reaches the setpoint")
    while f(hi) > 0:
        hi *= 2
        if hi > 1e3:
            raise NoConvergence("basal rate bracket not found")
    try:
        ub = brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    except (RuntimeError, ValueError) as ex:
        raise NoConvergence(f"basal rate search failed: {ex}") from None
    x0 = _steady(p, sp, ub)
    res = np.max(np.abs(_rhs_np(p, x0, ub)))
    if not res <= tol:
        raise NoConvergence(f"steady-state residual {res:.3g} exceeds {tol:g}")
    return dict(zip(STATES, x0.tolist())), float(ub)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

def _meal_law(mean: float, sd: float, floor: float) -> RandomNormal:
    return RandomNormal(mean, sd, max(mean - 4 * sd, floor), mean + 4 * sd)


@dataclass(frozen=True)
class MealScenario:
    """Meals eaten at the start of consecutive modes.

    ``carbs[i]`` is the law of meal ``i`` (grams); ``dwells[i]`` is the time
    (min) between meal ``i`` and ``i+1``.  The last mode lasts until the
    horizon.
    """

    carbs: tuple = field(default_factory=lambda: (
        _meal_law(40, 10, 0.0), _meal_law(90, 10, 0.0), _meal_law(60, 10, 0.0)))
    dwells: tuple = field(default_factory=lambda: (
        _meal_law(300, 10, 1.0), _meal_law(300, 10, 1.0)))
    horizon: float = 1440.0

    def __post_init__(self):
        object.__setattr__(self, "carbs", tuple(self.carbs))
        object.__setattr__(self, "dwells", tuple(self.dwells))
        if not self.carbs:
            raise InputError("a scenario needs at least one meal")
        if len(self.dwells) != len(self.carbs) - 1:
            raise InputError("need one dwell time per meal transition")
        for d in self.carbs:
            if d.lo < 0:
                raise InputError("meal sizes must be nonnegative")
        for d in self.dwells:
            if d.lo <= 0:
                raise InputError("dwell times must be positive")
        if not self.horizon > 0:
            raise InputError("horizon must be positive")

    @property
    def meals(self) -> list[tuple]:
        return list(zip(self.carbs, list(self.dwells) + [None]))

    @property
    def n_meals(self) -> int:
        return len(self.carbs)


def one_meal_scenario(carbs=None, horizon: float = 720.0) -> MealScenario:
    """Single meal over 12 h; by default the disturbance ``D_G1`` is
    nondeterministic in [0, 120] g."""
    return MealScenario((Nondet(0.0, 120.0) if carbs is None else carbs,), (), horizon)


def carb_name(i: int) -> str:
    return f"D_G{i + 1}"


def dwell_name(i: int) -> str:
    return f"T{i + 1}"


def build_plant(sc: MealScenario, p: HovorkaParams | None = None,
                g_sp_mgdl: float = 110.0) -> tuple[Sphs, float]:
    """Open-loop chain ``Meal1 -> Meal2 -> ...`` starting at the basal state.

    Each mode reads its own meal parameter, which is how the ``D_G`` reset
    of the chain is represented.  Returns the plant and ``u_b``.
    """
    p = p or HovorkaParams()
    x0, ub = basal_steady_state(p, g_sp_mgdl)
    params = [ParamSpec(carb_name(i), d) for i, d in enumerate(sc.carbs)]
    params += [ParamSpec(dwell_name(i), d) for i, d in enumerate(sc.dwells)]
    modes = []
    for i in range(sc.n_meals):
        modes.append(Mode(f"Meal{i + 1}", hovorka_rhs(p, var(carb_name(i)), ZERO)))
    trs = tuple(Transition(f"Meal{i + 1}", f"Meal{i + 2}", var(CLOCK) >= var(dwell_name(i)), {})
                for i in range(sc.n_meals - 1))
    G = var("Q1") * (1.0 / p.V_G)
    bad = or_(G < G_LOW, G > G_HIGH)
    plant = Sphs(STATES, tuple(params), tuple(modes), trs, "Meal1",
                 {s: const(v) for s, v in x0.items()}, bad, sc.horizon, {}, {"G": G},
                 {"u_b": ub, "setpoint_mgdl": g_sp_mgdl, "mgdl_per_mmol": MGDL_PER_MMOL,
                  "setpoint_mmol": p.setpoint(g_sp_mgdl), "V_G": p.V_G},
                 "hovorka3meal" if sc.n_meals == 3 else f"hovorka{sc.n_meals}meal")
    return plant, ub


def scenario_pid(gains: Sequence, p: HovorkaParams | None = None, g_sp_mgdl: float = 110.0,
                 clamp: bool = True, u_b: float | None = None) -> PidConfig:
    """Controller measuring ``Q1`` and dosing into ``S1`` around the basal rate."""
    p = p or HovorkaParams()
    if u_b is None:
        u_b = basal_steady_state(p, g_sp_mgdl)[1]
    return PidConfig(tuple(gains), p.setpoint(g_sp_mgdl), "Q1", "S1", clamp, u_b)


def build_scenario(sc: MealScenario | None = None, pid: PidConfig | Sequence | None = None,
                   perf: PerfSpec | None = None, p: HovorkaParams | None = None,
                   g_sp_mgdl: float = 110.0, clamp: bool = True) -> Sphs:
    """Closed-loop scenario.  ``pid`` may be a ready :class:`PidConfig` or a
    ``(Kp, Ki, Kd)`` triple; the default is the basal controller."""
    sc = sc or MealScenario()
    p = p or HovorkaParams()
    plant, ub = build_plant(sc, p, g_sp_mgdl)
    if pid is None:
        pid = (0.0, 0.0, 0.0)
    if not isinstance(pid, PidConfig):
        pid = scenario_pid(pid, p, g_sp_mgdl, clamp, ub)
    sys = compose(plant, pid, perf)
    return sys.replace(outputs={**sys.outputs, "G": plant.outputs["G"]})


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Controller:
    name: str
    gains: tuple[float, float, float]  # (Kp, Ki, Kd)
    fi_max: float = math.inf
    fiw_max: float = math.inf

    def perf(self) -> PerfSpec:
        return PerfSpec(self.fi_max, self.fiw_max)


PRESETS: dict[str, Controller] = {
    "C0": Controller("C0", (0.0, 0.0, 0.0)),
    "C1": Controller("C1", (-6.17e-4, -3.53e-7, -6.02e-2)),
    "C2": Controller("C2", (-6.39e-4, -3.00e-7, -5.73e-2), 3.5e6, 70e9),
    "C3": Controller("C3", (-6.76e-4, -1.17e-7, -6.002e-2), 3.0e6, 50e9),
    "C4": Controller("C4", (-5.42e-4, -7.55e-7, -6.24e-2), 2.7e6, 30e9),
}

GAIN_DOMAIN = {"Kp": (-1e-3, 0.0), "Ki": (-1e-5, 0.0), "Kd": (-1e-1, 0.0)}


def preset(name: str) -> Controller:
    try:
        return PRESETS[name]
    except KeyError:
        raise InputError(f"unknown controller preset {name!r}; known: {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# Monte-Carlo evaluation
# ---------------------------------------------------------------------------

@dataclass
class StatsReport:
    n_runs: int
    seed: int
    t_bad_pct: float
    bad_pct: float
    mean_FI: float
    mean_FIw: float
    fi_over_pct: float | None
    fiw_over_pct: float | None
    either_over_pct: float | None
    hypo_count: int
    gains: tuple = ()
    fi_max: float | None = None
    fiw_max: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def sample_runs(sys: Sphs, n_runs: int, seed: int) -> dict[str, np.ndarray]:
    """One draw of every random parameter per run; run ``i`` uses the stream
    ``(seed, i)`` so results do not depend on batching."""
    names = [q.name for q in sys.random_params]
    out = {n: np.empty(n_runs) for n in names}
    for i in range(n_runs):
        u = stream(seed, i).random(len(names))
        for j, q in enumerate(sys.random_params):
            out[q.name][i] = q.dist.ppf(u[j])
    return out


def evaluate_controller(gains: Sequence[float], n_runs: int = 1000, seed: int = 0,
                        sc: MealScenario | None = None, fi_max: float = math.inf,
                        fiw_max: float = math.inf, p: HovorkaParams | None = None,
                        clamp: bool = True, workers: int | None = None,
                        backend: str | None = None, csv_path: str | Path | None = None,
                        dt: float | None = None) -> StatsReport:
    """Simulate ``n_runs`` random meal sequences under fixed gains."""
    if n_runs < 1:
        raise InputError("n_runs must be >= 1")
    sc = sc or MealScenario()
    if any(isinstance(d, Nondet) for d in (*sc.carbs, *sc.dwells)):
        raise InputError("evaluation needs fully random meal scenarios")
    sys = build_scenario(sc, tuple(gains), None, p, clamp=clamp)
    G = sys.outputs["G"]
    bad = or_(G < G_LOW, G > G_HIGH)
    depth = sc.n_meals - 1
    kw = {} if dt is None else {"dt": dt}
    bm = BatchModel(sys, depth, [bad, G < G_LOW], **kw)
    draws = sample_runs(sys, n_runs, seed)
    P = bm.param_matrix(draws, n_runs)
    set_workers(workers)
    res = bm.run(P, backend)
    i_fi, i_fiw = sys.states.index("FI"), sys.states.index("FIw")
    fi, fiw = res.final[:, i_fi], res.final[:, i_fiw]
    frac = res.time[:, 0] / sc.horizon
    fi_over = fi > fi_max
    fiw_over = fiw > fiw_max
    has_fi, has_fiw = math.isfinite(fi_max), math.isfinite(fiw_max)
    pct = lambda m: float(100.0 * np.mean(m))
    rep = StatsReport(
        n_runs, int(seed), pct(frac), pct(res.any[:, 0]), float(np.mean(fi)), float(np.mean(fiw)),
        pct(fi_over) if has_fi else None, pct(fiw_over) if has_fiw else None,
        pct(fi_over | fiw_over) if (has_fi or has_fiw) else None,
        int(np.sum(res.any[:, 1])), tuple(float(g) for g in gains),
        fi_max if has_fi else None, fiw_max if has_fiw else None)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            names = list(draws)
            wr.writerow(["run", *names, "t_bad_frac", "bad", "hypo", "FI", "FIw", "first_bad"])
            for i in range(n_runs):
                wr.writerow([i, *(repr(float(draws[n][i])) for n in names), repr(float(frac[i])),
                             int(res.any[i, 0]), int(res.any[i, 1]), repr(float(fi[i])),
                             repr(float(fiw[i])), repr(float(res.first[i, 0]))])
    return rep
