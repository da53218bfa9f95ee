"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--runs 256]

Backends are chosen per call, so one process times both.  With
``PIDREACH_NUMBA=0`` only the numpy column is filled.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from pidreach import _jit
from pidreach._taylor import iv_matmul, iv_poly
from pidreach.glucose import PRESETS, build_scenario, one_meal_scenario, sample_runs
from pidreach.interval import Box, Interval
from pidreach.kernels import BatchModel
from pidreach.ode import OdeConfig
from pidreach.pid import PerfSpec
from pidreach.reach import needed_states
from pidreach.sphs import flow_path


def bench(fn, warmup=1, repeat=5):
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(runs: int):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(11, 11))
    b = rng.normal(size=(11, 11))
    yield "iv_matmul 11x11 (x1000)", lambda be: [iv_matmul(a, a + 1e-9, b, b + 1e-9, be) for _ in range(1000)]
    c = rng.normal(size=(6, 11, 11))
    yield "iv_poly K=5, 11x11 (x1000)", lambda be: [iv_poly(c, c + 1e-9, 0.5, 0.5, be) for _ in range(1000)]

    sys = build_scenario(one_meal_scenario(), PRESETS["C1"].gains, PerfSpec())
    box = Box([("D_G1", Interval(60.0, 60.5))])
    dims = needed_states(sys)
    yield "validated flow, 1 meal 12 h", lambda be: flow_path(sys, ("Meal1",), None, box,
                                                               OdeConfig(backend=be), dims=dims)

    from pidreach.glucose import MealScenario
    sys3 = build_scenario(MealScenario(), PRESETS["C1"].gains)
    bm = BatchModel(sys3, 2)
    P = bm.param_matrix(sample_runs(sys3, runs, 0), runs)
    yield f"batch RK4, 3 meals, {runs} runs", lambda be: bm.run(P, be)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--runs", type=int, default=256)
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if _jit.USING_NUMBA else [])
    print(f"{'kernel':<34}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases(args.runs):
        times = [bench(lambda: fn(be), repeat=args.repeat) for be in backends]
        row = f"{name:<34}" + "".join(f"{t:>11.4f}s" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row, flush=True)


if __name__ == "__main__":
    main()
