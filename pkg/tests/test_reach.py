from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from conftest import make_model, nondet, uniform
from pidreach.errors import InputError, OutOfDomain
from pidreach.interval import Box, Interval
from pidreach.reach import Verdict, box_mass, decide_box, prob_enclosure
from pidreach.sphs import ParamSpec, RandomNormal, RandomUniform


def normal_spec(name, mean, sd):
    return ParamSpec(name, RandomNormal(mean, sd, mean - 4 * sd, mean + 4 * sd))


def test_uniform_mass():
    m = box_mass([ParamSpec("p", RandomUniform(0, 1))], Box.from_bounds({"p": (0.2, 0.5)}))
    assert m.contains(0.3) and m.width < 1e-12


def test_full_domain_mass():
    m = box_mass([normal_spec("z", 0, 1)], Box.from_bounds({"z": (-4, 4)}))
    assert m.contains(1.0)


def test_one_sigma_meal_mass():
    m = box_mass([normal_spec("D_G1", 40, 10)], Box.from_bounds({"D_G1": (30, 50)}))
    exact = (norm.cdf(1) - norm.cdf(-1)) / (norm.cdf(4) - norm.cdf(-4))
    assert m.contains(exact) and abs(m.mid - 0.6827) < 1e-3


def test_mass_out_of_domain():
    with pytest.raises(OutOfDomain):
        box_mass([ParamSpec("p", RandomUniform(0, 1))], Box.from_bounds({"p": (0.5, 1.5)}))


def test_product_mass():
    specs = [ParamSpec("p", RandomUniform(0, 1)), ParamSpec("q", RandomUniform(0, 2))]
    m = box_mass(specs, Box.from_bounds({"p": (0, 0.5), "q": (0, 1)}))
    assert m.contains(0.25)


@pytest.mark.parametrize("init,goal,verdict", [
    (5.0, "x > 4", Verdict.ALL),
    (5.0, "x < 4", Verdict.NONE),
])
def test_decide_point_start(init, goal, verdict):
    sys = make_model(init=init, goal=goal)
    assert decide_box(sys, Box(), Box(), 0) is verdict


def test_decide_straddling_box():
    sys = make_model(init="x0", goal="x > 4", params=[nondet("x0", 3, 5)])
    assert decide_box(sys, Box.from_bounds({"x0": (3, 5)}), Box(), 0) is Verdict.UNDETERMINED


def test_decide_needs_every_parameter():
    sys = make_model(init="x0", goal="x > 4", params=[nondet("x0", 3, 5)])
    with pytest.raises(InputError):
        decide_box(sys, Box(), Box(), 0)


def test_decide_follows_the_flow():
    sys = make_model(flow="1", init="x0", goal="x > 1.5", params=[uniform("x0")])
    assert decide_box(sys, Box(), Box.from_bounds({"x0": (0.6, 0.7)}), 0) is Verdict.ALL
    assert decide_box(sys, Box(), Box.from_bounds({"x0": (0.1, 0.4)}), 0) is Verdict.NONE


def test_decide_blowup_is_undetermined():
    sys = make_model(flow="x^2", init="x0", goal="x < -1", params=[uniform("x0", 1, 2)], horizon=2.0)
    assert decide_box(sys, Box(), Box.from_bounds({"x0": (1, 2)}), 0) is Verdict.UNDETERMINED


# -- enclosures --------------------------------------------------------------------

def _check(enc, truth):
    assert 0.0 <= enc.lo <= enc.hi <= 1.0
    for lo, hi in enc.history:
        assert lo <= truth <= hi
    widths = [hi - lo for lo, hi in enc.history]
    assert all(b <= a for a, b in zip(widths, widths[1:]))
    total = Interval.point(0.0)
    for pc in enc.decomposition:
        total = total + pc.mass
    assert total.contains(1.0)


def test_half_line_enclosure():
    sys = make_model(goal="p <= 0.3", params=[uniform("p")])
    enc = prob_enclosure(sys, epsilon=1e-3)
    _check(enc, 0.3)
    assert enc.width <= 1e-3 and not enc.precision_floor


def test_false_goal_enclosure():
    sys = make_model(goal="false", params=[uniform("p")])
    enc = prob_enclosure(sys, epsilon=1e-3)
    assert enc.lo == 0.0 and enc.hi <= 1e-12


def test_triangle_enclosure():
    sys = make_model(goal="p + q <= 1", params=[uniform("p"), uniform("q")])
    enc = prob_enclosure(sys, epsilon=0.02)
    _check(enc, 0.5)
    assert enc.width <= 0.02


def test_dynamic_goal_enclosure():
    sys = make_model(flow="1", init="x0", goal="x > 1.5", params=[uniform("x0")])
    enc = prob_enclosure(sys, epsilon=1e-2)
    _check(enc, 0.5)
    assert enc.width <= 1e-2


def test_normal_tail_enclosure():
    sys = make_model(goal="z > 1", params=[{"name": "z", "dist": "normal", "mean": 0, "sd": 1}])
    truth = (norm.cdf(4) - norm.cdf(1)) / (norm.cdf(4) - norm.cdf(-4))
    enc = prob_enclosure(sys, epsilon=1e-3)
    _check(enc, truth)


def test_enclosure_is_uniform_over_nondet_box():
    # Pr = 1 - k for p ~ U(0,1), goal p >= k; k in [0.2, 0.4]
    sys = make_model(goal="p >= k", params=[uniform("p"), nondet("k", 0.2, 0.4)])
    enc = prob_enclosure(sys, epsilon=1e-2, min_width=1e-3)
    assert enc.lo <= 0.6 and enc.hi >= 0.8
    assert enc.precision_floor


def test_precision_floor_and_budget_are_flags():
    sys = make_model(goal="p + q <= 1", params=[uniform("p"), uniform("q")])
    enc = prob_enclosure(sys, epsilon=1e-6, max_decisions=50)
    assert enc.budget_exhausted and enc.lo <= 0.5 <= enc.hi


def test_invalid_epsilon():
    with pytest.raises(InputError):
        prob_enclosure(make_model(goal="p < 1", params=[uniform("p")]), epsilon=0.0)


def test_workers_do_not_change_the_result():
    sys = make_model(goal="p + q <= 1", params=[uniform("p"), uniform("q")])
    a = prob_enclosure(sys, epsilon=0.05, workers=1)
    b = prob_enclosure(sys, epsilon=0.05, workers=3)
    assert (a.lo, a.hi, a.history) == (b.lo, b.hi, b.history)
    assert [(p.box, p.verdict) for p in a.decomposition] == [(p.box, p.verdict) for p in b.decomposition]


def test_decomposition_csv(tmp_path):
    sys = make_model(goal="p <= 0.3", params=[uniform("p")])
    enc = prob_enclosure(sys, epsilon=0.1)
    out = tmp_path / "d.csv"
    enc.to_csv(out)
    rows = out.read_text().splitlines()
    assert rows[0] == "p_lo,p_hi,verdict,mass_lo,mass_hi"
    assert len(rows) == len(enc.decomposition) + 1


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_rectangle_soundness(a, b):
    sys = make_model(goal=f"p <= {a!r} and q <= {b!r}", params=[uniform("p"), uniform("q")])
    enc = prob_enclosure(sys, epsilon=0.05)
    _check(enc, a * b)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 2.0), st.floats(0.1, 0.9))
def test_decay_threshold_soundness(k, c):
    # x(t) = x0 exp(-k t), x0 ~ U(0,1); goal x(1) <= c at some time before 1
    # holds iff x0 exp(-k) <= c
    sys = make_model(flow=f"-{k!r} * x", init="x0", goal=f"x <= {c!r}", params=[uniform("x0")])
    truth = min(1.0, c * math.exp(k))
    enc = prob_enclosure(sys, epsilon=0.02)
    _check(enc, truth)
