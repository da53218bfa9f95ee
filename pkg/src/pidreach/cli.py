"""Command-line front end.

    pidreach simulate    --model M [--param NAME=V ...]
    pidreach enclose     --model M [--nondet NAME=LO:HI ...] --epsilon E
    pidreach synth-pid   --model M --method {formal,statistical}
    pidreach synth-dist  --model M [--preset C1 | --gains KP,KI,KD] --threshold-p P
    pidreach evaluate    [--preset C1 | --gains KP,KI,KD] --runs N

``--model`` is a JSON model file or a built-in name (``hovorka3meal``,
``hovorka1meal``).  Every run writes ``manifest.json`` next to its outputs.
Options may also come from ``--config FILE`` (JSON, keys as the long flag
names with ``-`` or ``_``); flags given on the command line win.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, NothingCertified, PidReachError, PrecisionFloor
from .glucose import (GAIN_DOMAIN, PRESETS, MealScenario, build_scenario, evaluate_controller,
                      one_meal_scenario, preset)
from .interval import Box, Interval
from .kernels import draw_random, stream
from .ode import OdeConfig
from .pid import GAIN_NAMES, PerfSpec, compose, pid_from_dict
from .reach import prob_enclosure
from .sphs import Nondet, SimConfig, Sphs, load_model, simulate
from .synth import CEConfig, synth_formal, synth_max_disturbance, synth_statistical

BUILTIN = ("hovorka3meal", "hovorka1meal")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _float_list(s: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in s.split(","))
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got {s!r}") from None


def _assign(items, kind: str) -> dict:
    out = {}
    for it in items or ():
        if "=" not in it:
            raise InputError(f"--{kind} expects NAME=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _range(v: str) -> Interval:
    parts = v.split(":")
    try:
        if len(parts) == 1:
            return Interval(float(parts[0]))
        if len(parts) == 2:
            return Interval(float(parts[0]), float(parts[1]))
    except (ValueError, PidReachError):
        pass
    raise InputError(f"expected LO:HI, got {v!r}")


def _gains(args) -> tuple[float, float, float]:
    if args.gains:
        g = _float_list(args.gains)
        if len(g) != 3:
            raise InputError("--gains needs Kp,Ki,Kd")
        return g
    return preset(args.preset or "C0").gains


def _thresholds(args) -> tuple[float, float]:
    fi = args.fi_max
    fiw = args.fiw_max
    if args.preset and not args.gains:
        c = preset(args.preset)
        fi = c.fi_max if fi is None else fi
        fiw = c.fiw_max if fiw is None else fiw
    return (math.inf if fi is None else fi), (math.inf if fiw is None else fiw)


def _builtin(args, gains=None) -> Sphs:
    sc = MealScenario() if args.model in (None, "hovorka3meal") else one_meal_scenario()
    fi, fiw = _thresholds(args)
    if gains is None:
        gains = _gains(args)
    return build_scenario(sc, gains, PerfSpec(fi, fiw), clamp=args.clamp_insulin == "on")


def load(args, gains=None) -> Sphs:
    """The model named by ``--model``, closed with its PID section if any."""
    if args.model is None or args.model in BUILTIN:
        return _builtin(args, gains)
    sys_, extras = load_model(args.model)
    if "pid" in extras:
        pid, perf = pid_from_dict(extras, sys_)
        sys_ = compose(sys_, pid, perf)
    return sys_


def _depth(args, sys_: Sphs) -> int:
    if args.depth is not None:
        return args.depth
    return int(sys_.meta.get("depth", len(sys_.mode_names) - 1))


def _ode_cfg(args) -> OdeConfig:
    return OdeConfig(taylor_order=args.taylor_order, step_hint=args.step)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, Interval):
        return [o.lo, o.hi]
    if isinstance(o, Box):
        return {k: [v.lo, v.hi] for k, v in o.items()}
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _num(x: float):
    """JSON has no infinities; encode them as strings."""
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


class Run:
    def __init__(self, args):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.start = _dt.datetime.now(_dt.timezone.utc).isoformat()

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write(self, name: str, text: str) -> None:
        self.path(name).write_text(text)

    def manifest(self, status: int, note: str | None = None) -> None:
        cfg = {k: v for k, v in vars(self.args).items() if k not in ("func", "config")}
        doc = {"command": self.args.command, "model": self.args.model or "hovorka3meal",
               "preset": getattr(self.args, "preset", None), "config": cfg,
               "seed": getattr(self.args, "seed", None), "version": __version__,
               "start": self.start, "end": _dt.datetime.now(_dt.timezone.utc).isoformat(),
               "outputs": self.files, "exit_code": status}
        if note:
            doc["note"] = note
        (self.out / "manifest.json").write_text(_dump(doc))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, run: Run) -> int:
    sys_ = load(args)
    given = {k: float(v) for k, v in _assign(args.param, "param").items()}
    unknown = set(given) - set(sys_.param_names)
    if unknown:
        raise InputError(f"unknown parameters {sorted(unknown)}")
    point = dict(given)
    rng = stream(args.seed, 0)
    drawn = draw_random(sys_, 1, rng)
    for p in sys_.params:
        if p.name not in point:
            point[p.name] = float(drawn[p.name][0]) if p.is_random else p.domain.mid
    tr = simulate(sys_, point, _depth(args, sys_), SimConfig(sample_dt=args.sample_dt))
    outs = [k for k in ("u_total", "G") if k in tr.outputs]
    t = tr.t
    modes = [seg.mode for seg in tr.segments for _ in seg.t]
    x = tr.x
    with open(run.path("trajectory.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t_glob", "mode", *sys_.states, *outs])
        for i in range(len(t)):
            wr.writerow([repr(float(t[i])), modes[i], *(repr(float(v)) for v in x[i]),
                         *(repr(float(tr.outputs[k][i])) for k in outs)])
    summary = {"params": point, "goal_reached": tr.reached, "goal_time": tr.goal_time,
               "final": tr.final(),
               "switch_times": [float(s.entry) for s in tr.segments[1:]]}
    run.write("summary.json", _dump(summary))
    return 0


def cmd_enclose(args, run: Run) -> int:
    sys_ = load(args)
    over = {k: _range(v) for k, v in _assign(args.nondet, "nondet").items()}
    nd = sys_.param_box("nondet")
    unknown = set(over) - set(nd.names)
    if unknown:
        raise InputError(f"not nondeterministic parameters: {sorted(unknown)}")
    nd = nd.replace(**over) if over else nd
    enc = prob_enclosure(sys_, nd, _depth(args, sys_), args.epsilon, _ode_cfg(args),
                         max_decisions=args.budget, workers=args.workers)
    enc.to_csv(run.path("decomposition.csv"))
    doc = {"lo": enc.lo, "hi": enc.hi, "width": enc.width, "decisions": enc.decisions,
           "precision_floor": enc.precision_floor, "budget_exhausted": enc.budget_exhausted,
           "nondet": nd, "epsilon": args.epsilon, "depth": _depth(args, sys_)}
    run.write("enclosure.json", _dump(doc))
    if enc.precision_floor or enc.budget_exhausted:
        raise PrecisionFloor(f"enclosure width {enc.width:.3g} above epsilon {args.epsilon:g}")
    return 0


def _gain_model(args) -> Sphs:
    if args.model is None or args.model in BUILTIN:
        gains = tuple(Nondet(*GAIN_DOMAIN[n]) for n in GAIN_NAMES)
        return _builtin(args, gains)
    return load(args)


def cmd_synth_pid(args, run: Run) -> int:
    sys_ = _gain_model(args)
    depth = _depth(args, sys_)
    if args.method == "formal":
        res = synth_formal(sys_, None, depth, args.epsilon, args.budget or 2000, _ode_cfg(args),
                           workers=args.workers)
        doc = {"method": "formal", "k_star": res.k_star, "winning_box": res.winning_box,
               "winning_enclosure": res.winning_enclosure,
               "epsilon_achieved": res.epsilon_achieved, "budget_exhausted": res.budget_exhausted,
               "evaluations": res.evaluations,
               "enclosures": [{"box": b, "enclosure": e} for b, e in res.all_enclosures]}
        run.write("synth.json", _dump(doc))
        if res.budget_exhausted or not res.epsilon_achieved:
            raise PrecisionFloor("formal synthesis did not reach the requested precision")
        return 0
    ce = CEConfig(max_iter=args.ce_iters, n_final=args.runs or 1000)
    res = synth_statistical(sys_, None, depth, args.confidence, ce, args.seed, args.workers)
    doc = {"method": "statistical", "k_hat": res.k_hat, "ci": res.ci,
           "confidence": res.confidence, "n_samples": res.n_samples, "hits": res.hits,
           "seed": args.seed, "ce": {"population": ce.population, "elite_frac": ce.elite_frac,
                                     "smoothing": ce.smoothing, "max_iter": ce.max_iter,
                                     "n_score": ce.n_score, "n_final": ce.n_final},
           "trace": [{"mean": m, "sd": s, "elite_score": e} for m, s, e in res.ce_trace]}
    run.write("synth.json", _dump(doc))
    return 0


def cmd_synth_dist(args, run: Run) -> int:
    if args.model is None or args.model in BUILTIN:
        args.model = args.model or "hovorka1meal"
        sys_ = _builtin(args)
    else:
        sys_ = load(args)
    dom = _range(args.domain) if args.domain else None
    depth = 0 if args.depth is None else args.depth
    res = synth_max_disturbance(sys_, dom, depth, args.threshold_p, args.eps_d, _ode_cfg(args),
                                workers=args.workers)
    doc = res.to_dict()
    doc["depth"] = depth
    run.write("disturbance.json", _dump(doc))
    if res.nothing_certified:
        raise NothingCertified("no disturbance box could be certified")
    return 0


def cmd_evaluate(args, run: Run) -> int:
    gains = _gains(args)
    fi, fiw = _thresholds(args)
    rep = evaluate_controller(gains, args.runs or 1000, args.seed, None, fi, fiw,
                              clamp=args.clamp_insulin == "on", workers=args.workers,
                              csv_path=run.path("traces.csv"))
    doc = rep.to_dict()
    doc["fi_max"] = None if doc["fi_max"] is None else _num(doc["fi_max"])
    doc["fiw_max"] = None if doc["fiw_max"] is None else _num(doc["fiw_max"])
    run.write("stats.json", _dump(doc))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model JSON file or built-in name")
    p.add_argument("--preset", choices=sorted(PRESETS), help="controller preset")
    p.add_argument("--gains", help="Kp,Ki,Kd")
    p.add_argument("--depth", type=int)
    p.add_argument("--epsilon", type=float, default=1e-2)
    p.add_argument("--confidence", type=float, default=0.99)
    p.add_argument("--threshold-p", type=float, default=0.0)
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--clamp-insulin", choices=("on", "off"), default="on")
    p.add_argument("--fi-max", type=float)
    p.add_argument("--fiw-max", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--taylor-order", type=int, default=5)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--config", help="JSON file with option values")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pidreach", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="point simulation to CSV")
    _common(p)
    p.add_argument("--param", action="append", help="NAME=VALUE (repeatable)")
    p.add_argument("--sample-dt", type=float, default=1.0)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("enclose", help="probability enclosure")
    _common(p)
    p.add_argument("--nondet", action="append", help="NAME=LO:HI (repeatable)")
    p.set_defaults(func=cmd_enclose)
    p = sub.add_parser("synth-pid", help="PID gain synthesis")
    _common(p)
    p.add_argument("--method", choices=("formal", "statistical"), default="statistical")
    p.add_argument("--ce-iters", type=int, default=30)
    p.set_defaults(func=cmd_synth_pid)
    p = sub.add_parser("synth-dist", help="maximum safe disturbance")
    _common(p)
    p.add_argument("--domain", help="LO:HI of the disturbance")
    p.add_argument("--eps-d", type=float, default=0.5)
    p.set_defaults(func=cmd_synth_dist)
    p = sub.add_parser("evaluate", help="Monte-Carlo controller evaluation")
    _common(p)
    p.set_defaults(func=cmd_evaluate)
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as ex:
            raise InputError(f"cannot read config {args.config}: {ex}") from None
        sp = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        bad = set(cfg) - known
        if bad:
            raise InputError(f"unknown config keys {sorted(bad)}")
        sp.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except PidReachError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return ex.exit_code
    run = Run(args)
    status, note = 0, None
    try:
        status = args.func(args, run)
    except PidReachError as ex:
        status, note = ex.exit_code, str(ex)
        print(f"error: {ex}", file=sys.stderr)
    run.manifest(status, note)
    return status


if __name__ == "__main__":
    sys.exit(main())
