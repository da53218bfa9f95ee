from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_model
from pidreach.errors import AlgebraicLoop, InputError, NotComposed, ReservedName
from pidreach.expr import eval_point
from pidreach.pid import PerfSpec, PidConfig, compose, perf_indices, pid_from_dict, pid_law
from pidreach.sphs import Nondet, SimConfig, model_from_dict, simulate

C1 = (-6.17e-4, -3.53e-7, -6.02e-2)
TIGHT = SimConfig(rtol=1e-11, atol=1e-12)


def test_pid_law_examples():
    assert pid_law((1, 0, 0), 2.0, 123.0, -7.0) == 2.0
    assert pid_law((0, 1, 0), 5.0, 3.0, 1.0) == 3.0
    assert pid_law(C1, -10.0, 0.0, 0.0) == pytest.approx(6.17e-3, rel=1e-12)


def test_negative_feedback_field():
    plant = make_model(flow="0")
    cl = compose(plant, PidConfig((1, 0, 0), 0.0, "x", "x"))
    f = cl.flow_of("m", "x")
    for x in (-2.0, 0.5, 3.0):
        assert eval_point(f, {"x": x}) == -x


def test_zero_gains_leave_plant_dynamics():
    plant = make_model(flow="-0.5 * x + 1")
    cl = compose(plant, PidConfig((0, 0, 0), 3.0, "x", "x"))
    assert cl.flow_of("m", "x") == plant.flow_of("m", "x")


def test_three_meal_composition_shape():
    from pidreach.glucose import MealScenario, build_plant, build_scenario

    plant, _ = build_plant(MealScenario())
    cl = build_scenario(MealScenario(), C1)
    assert len(cl.states) == 11
    assert cl.states[-3:] == ("e_int", "FI", "FIw")
    assert cl.mode_names == plant.mode_names and cl.transitions == plant.transitions
    for m in plant.mode_names:
        for s in plant.states:
            same = cl.flow_of(m, s) == plant.flow_of(m, s)
            assert same == (s != "S1"), (m, s)


def test_reserved_names():
    plant = make_model(states=[{"name": "FI", "init": 0}], modes=[{"name": "m", "flow": {}}])
    with pytest.raises(ReservedName):
        compose(plant, PidConfig((1, 0, 0), 0.0, "FI", "FI"))


def test_algebraic_loop_detected():
    plant = make_model(states=[{"name": "x", "init": 0}, {"name": "y", "init": 0}],
                       modes=[{"name": "m", "flow": {"x": "y", "y": "0"}}])
    with pytest.raises(AlgebraicLoop):
        compose(plant, PidConfig((0, 0, 1), 0.0, "y + x", "y"))
    # without a derivative term the loop is fine
    compose(plant, PidConfig((1, 0, 0), 0.0, "y + x", "y"))


def test_manipulated_must_exist():
    with pytest.raises(InputError):
        compose(make_model(), PidConfig((1, 0, 0), 0.0, "x", "z"))


def test_derivative_term_is_along_the_field():
    plant = make_model(states=[{"name": "x", "init": 0}, {"name": "y", "init": 1}],
                       modes=[{"name": "m", "flow": {"x": "0", "y": "x"}}])
    cl = compose(plant, PidConfig((0, 0, 1.0), 0.0, "y", "x"))
    # e_dot = -y' = -x
    assert eval_point(cl.flow_of("m", "x"), {"x": 2.0, "y": 5.0}) == -2.0


def test_clamp_of_total_control():
    plant = make_model(flow="0")
    cl = compose(plant, PidConfig((1, 0, 0), 0.0, "x", "x", clamp_nonneg_total=True, u_b=0.5))
    f = cl.flow_of("m", "x")
    assert eval_point(f, {"x": 2.0}) == 0.0
    assert eval_point(f, {"x": -1.0}) == 1.5


def test_nondet_gains_become_parameters():
    plant = make_model(states=[{"name": "x", "init": 0}, {"name": "y", "init": 1}],
                       modes=[{"name": "m", "flow": {"x": "0", "y": "x"}}])
    cl = compose(plant, PidConfig((Nondet(-1, 0), 0.0, Nondet(-2, 0)), 0.0, "y", "x"))
    assert {"Kp", "Kd"} <= set(cl.param_names)
    assert "Ki" not in cl.param_names


def test_goal_includes_thresholds():
    cl = compose(make_model(goal="x > 10"), PidConfig((0, 0, 0), 0.0, "x", "x"),
                 PerfSpec(fi_max=2.0, fiw_max=5.0))
    g = cl.goal["m"]
    base = {"x": 0.0, "e_int": 0.0, "FI": 0.0, "FIw": 0.0, "t": 0.0, "t_glob": 0.0}
    assert not eval_point(g, base)
    assert eval_point(g, {**base, "FI": 2.5})
    assert eval_point(g, {**base, "FIw": 6.0})
    assert eval_point(g, {**base, "x": 11.0})


def test_perf_spec_validation():
    with pytest.raises(InputError):
        PerfSpec(fi_max=0.0)


def test_pid_section_of_model_file():
    doc = {"name": "p", "state": [{"name": "x", "init": 1}], "modes": [{"name": "m", "flow": {"x": "0"}}],
           "goal": "false", "horizon": 1,
           "pid": {"gains": [-1, {"nondet": [-1, 0]}, 0], "setpoint": 0, "measured": "x", "manipulated": "x"},
           "perf": {"fi_max": 10}}
    plant, extra = model_from_dict(doc)
    pid, perf = pid_from_dict(extra, plant)
    assert isinstance(pid.gains[1], Nondet) and perf.fi_max == 10


# -- performance indices ---------------------------------------------------------

def _indices(flow, init, horizon, sp=0.0):
    plant = make_model(flow=flow, init=init, horizon=horizon)
    cl = compose(plant, PidConfig((0, 0, 0), sp, "x", "x"))
    return perf_indices(simulate(cl, {}, 0, TIGHT))


def test_perf_indices_constant_error():
    fi, fiw = _indices("0", 0.0, 2.0, sp=1.0)
    assert fi == pytest.approx(2.0, rel=1e-9) and fiw == pytest.approx(8 / 3, rel=1e-9)


def test_perf_indices_zero_error():
    assert _indices("0", 0.0, 3.0) == (0.0, 0.0)


def test_perf_indices_linear_error():
    fi, fiw = _indices("-1", 0.0, 1.0)
    assert fi == pytest.approx(1 / 3, rel=1e-9) and fiw == pytest.approx(1 / 5, rel=1e-9)


def test_perf_indices_need_composition():
    with pytest.raises(NotComposed):
        perf_indices(simulate(make_model(), {}, 0))


def _two_mode_loop(gains):
    plant = make_model(
        states=[{"name": "x", "init": 1.0}, {"name": "y", "init": 0.0}],
        modes=[{"name": "a", "flow": {"x": "-0.3 * x + 0.2", "y": "x - y"}},
               {"name": "b", "flow": {"x": "0.1 * x", "y": "x - 2 * y"}}],
        transitions=[{"from": "a", "to": "b", "guard": "t >= 1.5", "reset": {"x": "x + 0.5"}}],
        horizon=4.0)
    return compose(plant, PidConfig(gains, 0.7, "y", "x"))


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 0), st.floats(-1, 0), st.floats(-0.5, 0))
def test_indices_nondecreasing_and_reset_transparent(kp, ki, kd):
    cl = _two_mode_loop((kp, ki, kd))
    traj = simulate(cl, {}, 1, SimConfig(sample_dt=0.1))
    for name in ("FI", "FIw"):
        col = traj.column(name)
        assert np.all(np.diff(col) >= -1e-12 * max(1.0, abs(col).max()))
    a, b = traj.segments
    for j, s in enumerate(cl.states):
        if s in ("e_int", "FI", "FIw"):
            assert a.x[-1, j] == b.x[0, j]


def test_zero_gain_simulation_matches_plant():
    rng = random.Random(0)
    for _ in range(3):
        x0 = rng.uniform(0, 2)
        plant = make_model(flow="-0.4 * x + 0.1 * t", init=x0, horizon=3.0)
        cl = compose(plant, PidConfig((0, 0, 0), 1.0, "x", "x"))
        a = simulate(plant, {}, 0, TIGHT)
        b = simulate(cl, {}, 0, TIGHT)
        assert np.allclose(a.x[:, 0], b.x[:, 0], rtol=1e-9, atol=1e-11)
