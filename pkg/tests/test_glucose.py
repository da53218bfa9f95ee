from __future__ import annotations

import numpy as np
import pytest

from pidreach.errors import InputError
from pidreach.expr import eval_point, var
from pidreach.glucose import (GAIN_DOMAIN, MGDL_PER_MMOL, PRESETS, STATES, HovorkaParams,
                              MealScenario, basal_steady_state, build_plant, build_scenario,
                              evaluate_controller, gut_absorption, hovorka_field, hovorka_rhs,
                              one_meal_scenario, preset, sample_runs, _rhs_np)
from pidreach.interval import Box
from pidreach.kernels import BatchModel
from pidreach.sphs import SimConfig, simulate

ZERO_STATE = {s: 0.0 for s in STATES}


def test_parameter_defaults():
    p = HovorkaParams()
    assert (p.w, p.k_e, p.k12, p.t_maxI, p.t_maxG, p.F_R, p.A_G) == (100, 0.138, 0.066, 55, 40, 0, 0.8)
    assert p.k_a == (0.006, 0.06, 0.03) and p.k_b == (0.0034, 0.056, 0.024)
    assert p.V_I == pytest.approx(12.0) and p.V_G == pytest.approx(16.0)
    assert p.F_01 == pytest.approx(0.97) and p.EGP_0 == pytest.approx(1.61)


def test_q1_rate_at_zero_state():
    rhs = hovorka_rhs(HovorkaParams(), var("D_G"), var("u"))
    env = {**ZERO_STATE, "D_G": 0.0, "u": 0.0, "t": 0.0}
    assert eval_point(rhs["Q1"], env) == pytest.approx(0.64, abs=1e-12)


def test_gut_absorption_starts_at_zero():
    p = HovorkaParams()
    ug = gut_absorption(p, var("D_G"))
    for dg in (0.0, 40.0, 120.0):
        assert eval_point(ug, {"D_G": dg, "t": 0.0}) == 0.0
    # peak at t_maxG
    at = lambda t: eval_point(ug, {"D_G": 50.0, "t": t})
    assert at(40.0) > at(39.0) and at(40.0) > at(41.0)


def test_insulin_decay_without_input():
    rhs = hovorka_rhs(HovorkaParams(), var("D_G"), var("u"))
    env = {**ZERO_STATE, "I": 0.7, "D_G": 0.0, "u": 0.0, "t": 0.0}
    assert eval_point(rhs["I"], env) == pytest.approx(-0.138 * 0.7)


def test_field_is_eight_dimensional():
    f = hovorka_field()
    assert f.states == STATES and f.dim == 8


def test_basal_steady_state_residual():
    p = HovorkaParams()
    x0, ub = basal_steady_state(p, 110.0)
    r = _rhs_np(p, np.array([x0[s] for s in STATES]), ub)
    assert np.max(np.abs(r)) <= 1e-10
    assert x0["Q1"] == pytest.approx(110.0 / MGDL_PER_MMOL * 16.0, rel=1e-12)
    assert ub > 0


@pytest.mark.parametrize("sp", [69.0, 180.0, 250.0])
def test_basal_setpoint_domain(sp):
    with pytest.raises(InputError):
        basal_steady_state(HovorkaParams(), sp)


def test_no_meal_day_stays_at_setpoint():
    sc = MealScenario(carbs=(MealScenario().carbs[0],), dwells=())
    sys = build_scenario(sc)
    traj = simulate(sys, {"D_G1": 0.0}, 0, SimConfig(sample_dt=5.0))
    g_mgdl = traj.column("G") * MGDL_PER_MMOL
    assert np.all(np.abs(g_mgdl - 110.0) <= 0.5)


def test_default_scenario_structure():
    sys, ub = build_plant(MealScenario())
    assert sys.mode_names == ("Meal1", "Meal2", "Meal3")
    assert len(sys.transitions) == 2
    assert [p.name for p in sys.random_params] == ["D_G1", "D_G2", "D_G3", "T1", "T2"]
    assert not sys.nondet_params and sys.horizon == 1440.0
    d = {p.name: p.dist for p in sys.params}
    assert (d["D_G2"].mean, d["D_G2"].sd, d["T1"].mean) == (90, 10, 300)
    assert d["D_G1"].lo == 0.0 and d["D_G1"].hi == 80.0


def test_one_meal_scenario_is_depth_zero():
    sys, _ = build_plant(one_meal_scenario())
    assert sys.mode_names == ("Meal1",) and not sys.transitions
    assert sys.horizon == 720.0
    assert sys.param_box("nondet")["D_G1"] == Box.from_bounds({"D_G1": (0, 120)})["D_G1"]


def test_zero_gains_are_the_basal_controller():
    plant, ub = build_plant(MealScenario())
    sys = build_scenario(MealScenario(), PRESETS["C0"].gains)
    env = {**{s: 1.0 for s in sys.states}, "t": 0.0, "t_glob": 0.0,
           **{p: 50.0 for p in sys.param_names}}
    assert eval_point(sys.outputs["u_total"], env) == pytest.approx(ub)


def test_presets_and_gain_domain():
    assert preset("C1").gains == (-6.17e-4, -3.53e-7, -6.02e-2)
    assert preset("C2").fi_max == 3.5e6 and preset("C2").fiw_max == 70e9
    for c in PRESETS.values():
        for g, name in zip(c.gains, ("Kp", "Ki", "Kd")):
            lo, hi = GAIN_DOMAIN[name]
            assert lo <= g <= hi
    with pytest.raises(InputError):
        preset("C9")


def test_reset_semantics_only_meal_and_clock_change():
    sys = build_scenario(MealScenario(), PRESETS["C1"].gains)
    for tr in sys.transitions:
        assert tr.reset == {}
    pt = {"D_G1": 40.0, "D_G2": 90.0, "D_G3": 60.0, "T1": 300.0, "T2": 300.0}
    traj = simulate(sys, pt, 2)
    for a, b in zip(traj.segments, traj.segments[1:]):
        assert np.array_equal(a.x[-1], b.x[0])


def test_positivity_over_random_runs():
    sys = build_scenario(MealScenario(), PRESETS["C1"].gains)
    bm = BatchModel(sys, 2)
    n = 1000
    P = bm.param_matrix(sample_runs(sys, n, 11), n)
    plant_dims = [sys.states.index(s) for s in STATES]
    low = bm.run(P).final[:, plant_dims]
    assert np.all(low >= 0.0)
    # and along whole trajectories for a sample of runs
    for i in range(5):
        pt = dict(zip(sys.param_names, P[i]))
        x = simulate(sys, pt, 2, SimConfig(sample_dt=5.0)).x[:, plant_dims]
        assert np.all(x >= -1e-12)


def test_single_run_is_deterministic():
    a = evaluate_controller(PRESETS["C1"].gains, n_runs=1, seed=3)
    b = evaluate_controller(PRESETS["C1"].gains, n_runs=1, seed=3)
    assert a == b and a.n_runs == 1


def test_evaluation_rejects_nondet_meals():
    with pytest.raises(InputError):
        evaluate_controller((0, 0, 0), n_runs=2, sc=one_meal_scenario())


def test_evaluation_writes_traces(tmp_path):
    out = tmp_path / "traces.csv"
    rep = evaluate_controller(PRESETS["C2"].gains, n_runs=20, seed=0, fi_max=3.5e6,
                              fiw_max=70e9, csv_path=out)
    lines = out.read_text().splitlines()
    assert len(lines) == 21 and lines[0].startswith("run,D_G1")
    assert rep.either_over_pct >= max(rep.fi_over_pct, rep.fiw_over_pct)
    assert 0.0 <= rep.t_bad_pct <= rep.bad_pct
