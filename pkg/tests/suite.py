"""Runs shared by the unit and acceptance tests, computed once per session."""

from __future__ import annotations

import functools
import time

from gbulab import minimal, rates
from gbulab.geometry import DomainSpec, build_mesh, resolving_h_min
from gbulab.solver import Problem, SamplePolicy, forcing_search, run

UNIT = DomainSpec.interval(0.0, 1.0)
G_MAX = 1e6
CELLS = 512

# wall time of the first (uncached) evaluation of each timed helper
TIMINGS = {}


def timed(fn):
    @functools.wraps(fn)
    def wrapper(*args):
        t0 = time.perf_counter()
        out = fn(*args)
        TIMINGS.setdefault((fn.__name__,) + args, time.perf_counter() - t0)
        return out

    return functools.lru_cache(maxsize=None)(wrapper)


@functools.lru_cache(maxsize=None)
def interval_mesh(p: float, cells: int = CELLS):
    return build_mesh(UNIT, cells, 2.0, layer_h_min=resolving_h_min(p, G_MAX))


@timed
def forcing_amplitude(p: float) -> float:
    template = Problem(UNIT, p, h=1.0, u0=0.0, t_max=20.0, G_max=G_MAX)
    return forcing_search(template, interval_mesh(p), 1e4)


def monotone_problem(p: float) -> Problem:
    return Problem(UNIT, p, h=forcing_amplitude(p), u0=0.0, t_max=20.0, G_max=G_MAX)


@timed
def monotone_run(p: float, keep_states: bool = False):
    policy = SamplePolicy(keep_states=keep_states)
    return run(monotone_problem(p), interval_mesh(p), policy)


# h = 0 runs from a large bump: not time-monotone
BUMP_AMPLITUDE = {2.5: 400.0, 3.0: 200.0}


@functools.lru_cache(maxsize=None)
def bump_run(p: float):
    cfg = minimal.BisectConfig(p=p, t_max=2.0)
    return run(cfg.problem(BUMP_AMPLITUDE[p]), interval_mesh(p))


@functools.lru_cache(maxsize=None)
def fit(run_key: tuple):
    kind, p = run_key
    res = {"monotone": monotone_run, "bump": bump_run}[kind](p)
    return rates.fit_blowup(res.trace)


# threshold search at p = 4

THRESHOLD_CFG = minimal.BisectConfig(p=4.0, lambda_lo=0.0, lambda_hi=100.0, rel_tol=1e-3, t_max=2.0)


@timed
def threshold():
    return minimal.bisect_lambda_star(THRESHOLD_CFG)


@functools.lru_cache(maxsize=None)
def singular_probes():
    return minimal.singular_rate_probe(THRESHOLD_CFG, threshold())


@timed
def refined_threshold():
    return minimal.refine_bracket(THRESHOLD_CFG, threshold())
