"""Three-valued reachability over parameter boxes and guaranteed probability
enclosures over the random parameters."""
from __future__ import annotations

import csv
import enum
import heapq
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputError, NumericFailure, OutOfDomain
from .expr import Truth, eval_interval, free_vars
from .interval import Box, Interval
from .ode import OdeConfig
from .sphs import CLOCKS, ParamSpec, Sphs, flow_path, maximal_paths, needed_states

UNIT = Interval(0.0, 1.0)


class Verdict(enum.Enum):
    ALL = "AllReach"
    NONE = "NoneReach"
    UNDETERMINED = "Undetermined"

    def __str__(self) -> str:
        return self.value


def box_mass(params: Sequence[ParamSpec], b: Box) -> Interval:
    """Probability of ``b`` under independent laws ``params``."""
    m = Interval.point(1.0)
    for p in params:
        if not p.is_random:
            continue
        iv = b[p.name]
        if not iv.subset(p.domain):
            raise OutOfDomain(f"{p.name}: {iv} is outside its domain {p.domain}")
        m = m * p.dist.mass(iv)
    return m.intersect(UNIT) or Interval.point(0.0 if m.hi < 0 else 1.0)


def _static_goal(sys: Sphs) -> bool:
    for g in sys.goal.values():
        fv = free_vars(g)
        if fv & set(sys.states) or fv & set(CLOCKS):
            return False
    return True


def decide_box(sys: Sphs, nondet: Box, random: Box, depth: int,
               cfg: OdeConfig | None = None) -> Verdict:
    """Classify every parameter point of ``nondet x random`` at once.

    A numerical failure of the enclosure on one path only makes that path
    inconclusive.
    """
    pbox = nondet.merge(random) if len(random) else nondet
    missing = set(sys.param_names) - set(pbox.names)
    if missing:
        raise InputError(f"no box for parameters {sorted(missing)}")
    paths = maximal_paths(sys, depth)
    if _static_goal(sys):
        env = dict(pbox.items())
        modes = {m for path in paths for m in path}
        first = eval_interval(sys.goal[sys.init_mode], env)
        if first is Truth.TRUE:
            return Verdict.ALL
        if all(eval_interval(sys.goal[m], env) is Truth.FALSE for m in modes):
            return Verdict.NONE
        return Verdict.UNDETERMINED
    dims = needed_states(sys)
    verdicts = []
    for path in paths:
        try:
            r = flow_path(sys, path, None, pbox, cfg, dims=dims)
        except NumericFailure:
            verdicts.append(Truth.MAYBE)
            continue
        if r.goal is Truth.TRUE:
            return Verdict.ALL
        verdicts.append(r.goal)
    if all(v is Truth.FALSE for v in verdicts):
        return Verdict.NONE
    return Verdict.UNDETERMINED


# ---------------------------------------------------------------------------
# probability enclosures
# ---------------------------------------------------------------------------

@dataclass
class Piece:
    box: Box
    verdict: Verdict
    mass: Interval


@dataclass
class ProbEnclosure:
    lo: float
    hi: float
    decomposition: list[Piece] = field(default_factory=list)
    precision_floor: bool = False
    budget_exhausted: bool = False
    decisions: int = 0
    history: list[tuple[float, float]] = field(default_factory=list)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def interval(self) -> Interval:
        return Interval(self.lo, self.hi)

    def to_csv(self, path: str | Path) -> None:
        write_decomposition(self.decomposition, path)


def bounds_of(pieces: Iterable[Piece]) -> tuple[float, float]:
    lo = Interval.point(0.0)
    none = Interval.point(0.0)
    for pc in pieces:
        if pc.verdict is Verdict.ALL:
            lo = lo + Interval.point(pc.mass.lo)
        elif pc.verdict is Verdict.NONE:
            none = none + Interval.point(pc.mass.lo)
    hi = Interval.point(1.0) - none
    a, b = max(lo.lo, 0.0), min(hi.hi, 1.0)
    return a, max(a, b)


def write_decomposition(pieces: Sequence[Piece], path: str | Path) -> None:
    names = list(pieces[0].box.names) if pieces else []
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"{n}_{e}" for n in names for e in ("lo", "hi")] + ["verdict", "mass_lo", "mass_hi"])
        for pc in pieces:
            row = []
            for n in names:
                row += [repr(pc.box[n].lo), repr(pc.box[n].hi)]
            wr.writerow(row + [pc.verdict.value, repr(pc.mass.lo), repr(pc.mass.hi)])


def _split_dim(b: Box, domain: Box, min_width: float) -> str | None:
    best, best_rel = None, 0.0
    for n in b.names:
        dw = domain[n].width
        rel = b[n].width / dw if dw > 0 else 0.0
        if rel > min_width and rel > best_rel:
            best, best_rel = n, rel
    return best


# worker-side state for process pools
_W: dict = {}


def _init_worker(sys, nondet, depth, cfg):
    _W.update(sys=sys, nondet=nondet, depth=depth, cfg=cfg)


def _decide_remote(b: Box) -> Verdict:
    return decide_box(_W["sys"], _W["nondet"], b, _W["depth"], _W["cfg"])


class _Decider:
    """Maps ``decide_box`` over random boxes, in-process or on a fork pool."""

    def __init__(self, sys, nondet, depth, cfg, workers):
        self.args = (sys, nondet, depth, cfg)
        self.pool = None
        if workers and workers > 1:
            ctx = mp.get_context("fork")
            self.pool = ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                                            initargs=self.args)

    def __call__(self, boxes: list[Box]) -> list[Verdict]:
        if self.pool is None or len(boxes) == 1:
            sys, nondet, depth, cfg = self.args
            return [decide_box(sys, nondet, b, depth, cfg) for b in boxes]
        return list(self.pool.map(_decide_remote, boxes))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def prob_enclosure(sys: Sphs, nondet: Box | None = None, depth: int = 0, epsilon: float = 1e-3,
                   cfg: OdeConfig | None = None, min_width: float = 1e-6, batch: int = 8,
                   max_decisions: int | None = None, workers: int = 1,
                   random: Box | None = None, threshold: float | None = None) -> ProbEnclosure:
    """Enclosure of the goal probability valid for every point of ``nondet``.

    Undetermined random boxes are bisected, largest ``mass.hi`` first, along
    the dimension that is widest relative to its domain, until the width is
    at most ``epsilon``.  Up to ``batch`` boxes are refined per round; the
    round structure does not depend on ``workers``.

    With ``threshold`` set, refinement also stops as soon as the enclosure
    lies entirely at or below it, or entirely above it.
    """
    if not epsilon > 0:
        raise InputError("epsilon must be positive")
    if batch < 1:
        raise InputError("batch must be >= 1")
    nondet = sys.param_box("nondet") if nondet is None else nondet
    domain = sys.param_box("random")
    random = domain if random is None else random
    rparams = sys.random_params
    dec = _Decider(sys, nondet, depth, cfg, workers)
    try:
        pieces = [Piece(random, dec([random])[0], box_mass(rparams, random))]
        n_dec = 1
        lo, hi = bounds_of(pieces)
        history = [(lo, hi)]
        floor = budget = False
        while hi - lo > epsilon:
            if threshold is not None and (hi <= threshold or lo > threshold):
                break
            cand = [(i, pc) for i, pc in enumerate(pieces) if pc.verdict is Verdict.UNDETERMINED
                    and _split_dim(pc.box, domain, min_width) is not None]
            if not cand:
                floor = True
                break
            if max_decisions is not None and n_dec >= max_decisions:
                budget = True
                break
            # priority: mass.hi descending, then position (deterministic)
            chosen = heapq.nsmallest(batch, cand, key=lambda c: (-c[1].mass.hi, c[0]))
            chosen_idx = sorted(i for i, _ in chosen)
            children = []
            for i in chosen_idx:
                b = pieces[i].box
                children.extend(b.split(_split_dim(b, domain, min_width)))
            verdicts = dec(children)
            n_dec += len(children)
            new = [Piece(b, v, box_mass(rparams, b)) for b, v in zip(children, verdicts)]
            out = []
            k = 0
            for i, pc in enumerate(pieces):
                if k < len(chosen_idx) and chosen_idx[k] == i:
                    out.extend(new[2 * k:2 * k + 2])
                    k += 1
                else:
                    out.append(pc)
            pieces = out
            lo2, hi2 = bounds_of(pieces)
            # refinement never loosens the reported bounds
            lo, hi = max(lo, lo2), min(hi, hi2)
            history.append((lo, hi))
    finally:
        dec.close()
    return ProbEnclosure(lo, hi, pieces, floor, budget, n_dec, history)
