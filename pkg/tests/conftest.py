from __future__ import annotations

import pytest

from pidreach.sphs import model_from_dict


def make_model(flow="0", init=5.0, goal="false", params=(), horizon=1.0, states=None,
               modes=None, transitions=(), name="toy"):
    """Small JSON-built model; one state ``x`` unless ``states`` is given."""
    doc = {
        "name": name,
        "state": states or [{"name": "x", "init": init}],
        "params": list(params),
        "modes": modes or [{"name": "m", "flow": {"x": flow}}],
        "transitions": list(transitions),
        "goal": goal,
        "horizon": horizon,
    }
    return model_from_dict(doc)[0]


def uniform(name, lo=0.0, hi=1.0):
    return {"name": name, "dist": "uniform", "lo": lo, "hi": hi}


def nondet(name, lo, hi):
    return {"name": name, "dist": "nondet", "lo": lo, "hi": hi}


@pytest.fixture
def toy():
    return make_model
