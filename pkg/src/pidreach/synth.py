"""Controller and disturbance synthesis.

* :func:`synth_formal` - branch-and-prune over the gain box with guaranteed
  probability enclosures; returns the midpoint of the box whose enclosure
  has the least midpoint.
* :func:`synth_statistical` - Cross-Entropy search scored by Monte-Carlo
  simulation, with a Clopper-Pearson interval for the final gains.
* :func:`synth_max_disturbance` - largest certified disturbance, scanning the
  disturbance interval from the left.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import beta

from .errors import InputError
from .interval import Box, Interval
from .kernels import DEFAULT_DT, BatchModel, stream
from ._jit import set_workers
from .ode import OdeConfig
from .reach import ProbEnclosure, prob_enclosure
from .sphs import RandomNormal, Sphs

log = logging.getLogger(__name__)


def _gain_box(sys: Sphs, K: Box | None) -> Box:
    nd = sys.param_box("nondet")
    if not len(nd):
        raise InputError("no nondeterministic parameters to synthesize")
    if K is None:
        return nd
    if set(K.names) != set(nd.names):
        raise InputError(f"gain box must cover exactly {list(nd.names)}")
    K = K.select(nd.names)
    if not K.subset(nd):
        raise InputError("gain box exceeds the declared parameter domains")
    return K


# ---------------------------------------------------------------------------
# formal
# ---------------------------------------------------------------------------

@dataclass
class FormalSynthResult:
    k_star: dict
    winning_box: Box
    winning_enclosure: Interval
    all_enclosures: list = field(default_factory=list)   # (Box, Interval)
    epsilon_achieved: bool = True
    budget_exhausted: bool = False
    evaluations: int = 0


def _widest_rel(b: Box, dom: Box, min_width: float) -> str | None:
    best, rel_best = None, 0.0
    for n in b.names:
        dw = dom[n].width
        rel = b[n].width / dw if dw > 0 else 0.0
        if rel > min_width and rel > rel_best:
            best, rel_best = n, rel
    return best


def synth_formal(sys: Sphs, K: Box | None = None, depth: int = 0, epsilon: float = 0.01,
                 budget: int = 2000, cfg: OdeConfig | None = None, min_width: float = 1e-6,
                 random_min_width: float | None = None, workers: int = 1) -> FormalSynthResult:
    """Minimise the goal probability over the gain box ``K``.

    ``budget`` caps the number of gain boxes whose enclosure is computed.
    Random boxes are not split below ``random_min_width`` of their domain
    (default ``epsilon / 8``): past that point the width of an enclosure is
    dominated by the variation of the probability over the gain box, and
    only splitting the gain box helps.
    """
    if not epsilon > 0:
        raise InputError("epsilon must be positive")
    K = _gain_box(sys, K)
    rmw = epsilon / 8 if random_min_width is None else random_min_width

    def enc(b: Box) -> ProbEnclosure:
        return prob_enclosure(sys, b, depth, epsilon, cfg, min_width=rmw, workers=workers)

    leaves: list[tuple[Box, ProbEnclosure]] = [(K, enc(K))]
    evals = 1
    exhausted = False
    floor_hit = False
    while True:
        best_hi = min(e.hi for _, e in leaves)
        alive = [(b, e) for b, e in leaves if e.lo <= best_hi]
        todo = [i for i, (b, e) in enumerate(alive) if e.width > epsilon]
        if not todo:
            break
        splittable = [i for i in todo if _widest_rel(alive[i][0], K, min_width) is not None]
        if not splittable:
            floor_hit = True
            break
        if evals + 2 > budget:
            exhausted = True
            break
        # refine the most promising box first
        i = min(splittable, key=lambda j: (alive[j][1].lo, alive[j][1].hi, j))
        b, _ = alive[i]
        kids = b.split(_widest_rel(b, K, min_width))
        new = [(c, enc(c)) for c in kids]
        evals += 2
        pruned = [x for x in leaves if x[1].lo > best_hi]
        leaves = pruned + alive[:i] + new + alive[i + 1:]
    best_hi = min(e.hi for _, e in leaves)
    alive = [(b, e) for b, e in leaves if e.lo <= best_hi]
    wb, we = min(alive, key=lambda x: ((x[1].lo + x[1].hi) / 2, x[1].hi))
    achieved = all(e.width <= epsilon for _, e in alive) and not exhausted
    if floor_hit or exhausted:
        log.warning("formal synthesis stopped before every enclosure reached width %g", epsilon)
    return FormalSynthResult(wb.midpoint(), wb, we.interval,
                             [(b, e.interval) for b, e in leaves], achieved, exhausted, evals)


# ---------------------------------------------------------------------------
# statistical (Cross-Entropy)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CEConfig:
    population: int = 50
    elite_frac: float = 0.1
    smoothing: float = 0.7
    max_iter: int = 30
    n_score: int = 200
    n_final: int = 1000
    sd_stop: float = 1e-3    # relative to the domain width
    dt: float = DEFAULT_DT

    def __post_init__(self):
        if self.population < 2 or not 0 < self.elite_frac <= 1:
            raise InputError("bad Cross-Entropy population settings")
        if not 0 < self.smoothing <= 1:
            raise InputError("smoothing must lie in (0, 1]")


@dataclass
class StatSynthResult:
    k_hat: dict
    ci: Interval
    confidence: float
    n_samples: int
    hits: int
    ce_trace: list = field(default_factory=list)    # (mean, sd, elite score) per iteration

    @property
    def estimate(self) -> float:
        return self.hits / self.n_samples


def clopper_pearson(k: int, n: int, confidence: float) -> Interval:
    """Exact two-sided binomial interval."""
    if not 0 < confidence < 1:
        raise InputError("confidence must lie in (0, 1)")
    if n < 1 or not 0 <= k <= n:
        raise InputError("need 0 <= k <= n and n >= 1")
    a = 1 - confidence
    lo = 0.0 if k == 0 else float(beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(beta.ppf(1 - a / 2, k + 1, n - k))
    return Interval(lo, hi)


class _Scorer:
    """Monte-Carlo goal frequency of gain vectors, with the random
    parameters drawn from fixed counter-based streams."""

    def __init__(self, sys: Sphs, gains: tuple[str, ...], depth: int, dt: float,
                 backend: str | None):
        self.sys = sys
        self.gains = gains
        self.model = BatchModel(sys, depth, dt=dt)
        self.backend = backend
        self.rand = [p for p in sys.random_params]

    def draws(self, n: int, seed: int, tag: int) -> dict[str, np.ndarray]:
        g = stream(seed, tag)
        u = g.random((n, len(self.rand)))
        return {p.name: p.dist.ppf(u[:, j]) for j, p in enumerate(self.rand)}

    def hits(self, ks: np.ndarray, draws: Mapping[str, np.ndarray], m: int) -> np.ndarray:
        """Goal hits per candidate row of ``ks`` over ``m`` shared draws."""
        c = ks.shape[0]
        vals = {name: np.repeat(ks[:, j], m) for j, name in enumerate(self.gains)}
        for k, v in draws.items():
            vals[k] = np.tile(v, c)
        fixed = {p.name: p.dist.lo for p in self.sys.nondet_params if p.name not in vals}
        vals.update(fixed)
        P = self.model.param_matrix(vals, c * m)
        res = self.model.run(P, self.backend)
        return res.any[:, 0].reshape(c, m).sum(axis=1)


def synth_statistical(sys: Sphs, K: Box | None = None, depth: int = 0, confidence: float = 0.99,
                      ce: CEConfig | None = None, seed: int = 0, workers: int | None = None,
                      backend: str | None = None) -> StatSynthResult:
    """Cross-Entropy minimisation of the Monte-Carlo goal probability."""
    if not 0 < confidence < 1:
        raise InputError("confidence must lie in (0, 1)")
    ce = ce or CEConfig()
    K = _gain_box(sys, K)
    names = K.names
    lo = np.array(K.lo(), dtype=float)
    hi = np.array(K.hi(), dtype=float)
    width = hi - lo
    set_workers(workers)
    scorer = _Scorer(sys, names, depth, ce.dt, backend)
    mean = (lo + hi) / 2
    sd = width / 4
    n_elite = max(1, int(round(ce.elite_frac * ce.population)))
    trace = []
    for it in range(ce.max_iter):
        g = stream(seed, 1, it)
        u = g.random((ce.population, len(names)))
        ks = np.empty_like(u)
        for j in range(len(names)):
            if width[j] == 0:
                ks[:, j] = lo[j]
            elif sd[j] > 0:
                ks[:, j] = RandomNormal(mean[j], sd[j], lo[j], hi[j]).ppf(u[:, j])
            else:
                ks[:, j] = mean[j]
        draws = scorer.draws(ce.n_score, seed, 2 * 10 ** 6 + it)
        scores = scorer.hits(ks, draws, ce.n_score) / ce.n_score
        order = np.lexsort((np.arange(len(scores)), scores))
        gamma, top = scores[order[n_elite - 1]], scores.max()
        if scores[order[0]] == top:
            trace.append((mean.tolist(), sd.tolist(), float(gamma)))
            if top == 0.0:
                break
            # flat scores carry no information: widen and sample again
            log.warning("flat scores at iteration %d; widening the proposal", it)
            sd = np.minimum(2.0 * sd, width)
            continue
        # on a plateau only the samples that beat it are informative
        elite = ks[order[:n_elite]] if gamma < top else ks[scores < top]
        new_mean = elite.mean(axis=0)
        new_sd = elite.std(axis=0)
        mean = ce.smoothing * new_mean + (1 - ce.smoothing) * mean
        sd = ce.smoothing * new_sd + (1 - ce.smoothing) * sd
        bad = ~np.isfinite(sd) | ~np.isfinite(mean)
        if bad.any():
            log.warning("degenerate proposal at iteration %d; widening", it)
            mean = np.where(bad, (lo + hi) / 2, mean)
            sd = np.where(bad, width / 4, sd)
        mean = np.clip(mean, lo, hi)
        trace.append((mean.tolist(), sd.tolist(), float(min(gamma, scores[order[len(elite) - 1]]))))
        live = width > 0
        if not live.any() or np.all(sd[live] <= ce.sd_stop * width[live]):
            break
    k_hat = dict(zip(names, mean.tolist()))
    final = scorer.draws(ce.n_final, seed, 3 * 10 ** 6)
    hits = int(scorer.hits(mean[None, :], final, ce.n_final)[0])
    return StatSynthResult(k_hat, clopper_pearson(hits, ce.n_final, confidence), confidence,
                           ce.n_final, hits, trace)


# ---------------------------------------------------------------------------
# maximum disturbance
# ---------------------------------------------------------------------------

@dataclass
class DistSynthResult:
    d_star: float | None
    certified_boxes: list = field(default_factory=list)   # (Box, Interval)
    p: float = 0.0
    name: str = ""
    domain: Interval | None = None
    gap: Interval | None = None
    evaluations: int = 0

    @property
    def nothing_certified(self) -> bool:
        return self.d_star is None

    def to_dict(self) -> dict:
        return {"d_star": self.d_star, "p": self.p, "name": self.name,
                "domain": None if self.domain is None else [self.domain.lo, self.domain.hi],
                "gap": None if self.gap is None else [self.gap.lo, self.gap.hi],
                "evaluations": self.evaluations,
                "certified": [[b[self.name].lo, b[self.name].hi, e.lo, e.hi]
                              for b, e in self.certified_boxes]}


def synth_max_disturbance(sys: Sphs, D: Interval | None = None, depth: int = 0, p: float = 0.0,
                          eps_d: float = 0.5, cfg: OdeConfig | None = None,
                          epsilon: float = 1e-3, workers: int = 1,
                          random_min_width: float | None = None,
                          wide_decisions: int = 64, leaf_decisions: int = 1024) -> DistSynthResult:
    """Largest ``d*`` such that every ``d`` in ``[D.lo, d*]`` is certified
    ``Pr(d) <= p``.

    Boxes are scanned left to right; a box is split until its width is at
    most ``eps_d``; the first box that cannot be certified ends the scan.
    Boxes wider than ``eps_d`` get at most ``wide_decisions`` random-box
    decisions before ``d`` is split: when ``Pr`` crosses ``p`` inside the
    box no amount of random refinement settles it.  Leaf boxes get
    ``leaf_decisions`` and refine random boxes down to ``random_min_width``
    of their domain (default ``epsilon / 8``).  Running out of either only
    ends the scan earlier, so ``d*`` stays an under-approximation.
    """
    nd = sys.nondet_params
    if len(nd) != 1:
        raise InputError("disturbance synthesis needs exactly one scalar nondeterministic parameter")
    if not 0 <= p <= 1:
        raise InputError("threshold p must lie in [0, 1]")
    if not eps_d > 0:
        raise InputError("eps_d must be positive")
    name = nd[0].name
    dom = nd[0].domain
    D = dom if D is None else D
    if not D.subset(dom):
        raise InputError("disturbance range exceeds the parameter domain")
    rmw = epsilon / 8 if random_min_width is None else random_min_width
    certified: list[tuple[Box, Interval]] = []
    stack = [D]
    evals = 0
    gap = None
    while stack:
        iv = stack.pop()
        b = Box([(name, iv)])
        leaf = iv.width <= eps_d
        e = prob_enclosure(sys, b, depth, epsilon, cfg, min_width=rmw, workers=workers,
                           max_decisions=leaf_decisions if leaf else wide_decisions, threshold=p)
        evals += 1
        if e.hi <= p:
            certified.append((b, e.interval))
            continue
        if e.lo > p or leaf:
            gap = iv
            break
        m = iv.mid
        stack.append(Interval(m, iv.hi))
        stack.append(Interval(iv.lo, m))
    d_star = certified[-1][0][name].hi if certified else None
    if d_star is None:
        log.warning("no disturbance box could be certified")
    return DistSynthResult(d_star, certified, p, name, D, gap, evals)
