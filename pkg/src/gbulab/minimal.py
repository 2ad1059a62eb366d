"""Threshold amplitude for blow-up of lam * phi on (0, 1) with h = 0.

``bisect_lambda_star`` brackets lambda* = sup{lam : the solution from lam*phi
is global} and ``singular_rate_probe`` looks at the just-supercritical run,
whose gradient grows faster than the generic 1/(p-2) rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import rates
from .estimates import check_ut_linear_bound
from .geometry import INTERVAL, DomainSpec, Mesh, build_mesh, resolving_h_min
from .solver import (BLEW_UP, REACHED_HORIZON, PExponents, Problem, RunResult,
                     SamplePolicy, StepControls, run, sample_field)

GLOBAL = "Global"
UNDECIDED = "Undecided"


class NotAdmissible(ValueError):
    pass


class BracketFailure(RuntimeError):
    pass


class TooManyUndecided(RuntimeError):
    pass


class InconsistentProbes(RuntimeError):
    pass


def cubic_bump(mesh: Mesh) -> np.ndarray:
    """(x(1-x))^3: flat to second order at both ends, so every multiple of it
    meets the endpoint condition u'' + |u'|^p = 0."""
    x = mesh.nodes
    return (x * (1.0 - x)) ** 3


cubic_bump.preset = "cubic_bump"


def sine_bump(mesh: Mesh) -> np.ndarray:
    return np.sin(np.pi * mesh.nodes)


sine_bump.preset = "sine"


# ---------------------------------------------------------------------------
# initial data class


def _derivatives(mesh: Mesh, u: np.ndarray):
    """First and second derivatives on the interval mesh, one-sided at the ends."""
    ops = mesh.ops
    ux = ops.grads[0] @ u
    uxx = ops.lap @ u
    s = mesh.spacing
    # second derivative at the ends from the quadratic through three nodes
    for end, (i0, i1, i2), (h1, h2) in (
        (0, (0, 1, 2), (s[0], s[1])),
        (-1, (-1, -2, -3), (s[-1], s[-2])),
    ):
        uxx[end] = 2.0 * (u[i0] / (h1 * (h1 + h2)) - u[i1] / (h1 * h2) + u[i2] / (h2 * (h1 + h2)))
    return ux, uxx


def validate_initial_class(u0, mesh: Mesh, p: float, *, sym_tol: float = 1e-12,
                           rel_tol: float = 1e-3):
    """Check membership in the admissible class and return ``(True, a)``.

    Clauses, in order: vanishing at x = 0, symmetry about 1/2, u' >= 0 on
    [0, 1/2], u''(0) + u'(0)^p = 0, and u'' + |u'|^p >= 0 on [0, a], <= 0 on
    [a, 1/2] for a single switch point a.  The first failing clause raises
    :class:`NotAdmissible`.  ``a`` is NaN for the zero function.
    """
    if mesh.kind != INTERVAL or mesh.spec.params != (0.0, 1.0):
        raise NotAdmissible("initial data class is defined on the interval (0, 1)")
    u = sample_field(u0, mesh)
    scale = float(np.max(np.abs(u)))
    if scale == 0.0:
        return True, float("nan")
    if abs(u[0]) > sym_tol * scale or abs(u[-1]) > sym_tol * scale:
        raise NotAdmissible("u0 does not vanish on the boundary")
    x = mesh.nodes
    if not np.allclose(x + x[::-1], 1.0, rtol=0, atol=1e-14):
        raise NotAdmissible("mesh is not symmetric about 1/2")
    if np.max(np.abs(u - u[::-1])) > sym_tol * scale:
        raise NotAdmissible("u0 is not symmetric about x = 1/2")
    ux, uxx = _derivatives(mesh, u)
    half = x <= 0.5 + 1e-14
    if np.any(ux[half] < -rel_tol * float(np.max(np.abs(ux)))):
        raise NotAdmissible("u0' takes negative values on [0, 1/2]")
    w = uxx + np.abs(ux) ** p
    wscale = float(np.max(np.abs(w[half])))
    if abs(w[0]) > rel_tol * wscale:
        raise NotAdmissible(f"u0''(0) + u0'(0)^p = {w[0]:.4g} is not zero")
    inner = half & (x > 0)
    xi, wi = x[inner], w[inner]
    significant = np.abs(wi) > rel_tol * wscale
    signs = np.sign(wi[significant])
    changes = np.flatnonzero(np.diff(signs) != 0)
    if signs.size == 0 or (changes.size == 0 and signs[0] < 0):
        raise NotAdmissible("u0'' + |u0'|^p is never positive near the boundary")
    if changes.size > 1 or signs[0] < 0:
        raise NotAdmissible("u0'' + |u0'|^p changes sign more than once on (0, 1/2)")
    if changes.size == 0:
        return True, 0.5
    xs, ws = xi[significant], wi[significant]
    k = changes[0]
    a = xs[k] - ws[k] * (xs[k + 1] - xs[k]) / (ws[k + 1] - ws[k])
    return True, float(a)


# ---------------------------------------------------------------------------
# classification and bisection


@dataclass(frozen=True)
class BisectConfig:
    p: float
    phi: Callable = cubic_bump
    lambda_lo: float = 0.0
    lambda_hi: float = 1.0
    rel_tol: float = 1e-3
    t_max: float = 2.0
    G_max: float = 1e6
    settle_threshold: float = 1.0
    cells: int = 512
    grading: float = 2.0
    max_expansions: int = 8
    max_horizon_doublings: int = 4

    def __post_init__(self):
        if not 0 <= self.lambda_lo < self.lambda_hi:
            raise ValueError("need 0 <= lambda_lo < lambda_hi")
        if not 1e-6 < self.rel_tol < 1e-1:
            raise ValueError("rel_tol must lie in (1e-6, 1e-1)")
        if not self.p > 2:
            raise ValueError("threshold search needs p > 2")

    def mesh(self) -> Mesh:
        return build_mesh(DomainSpec.interval(0.0, 1.0), self.cells, self.grading,
                          layer_h_min=resolving_h_min(self.p, self.G_max))

    def problem(self, lam: float, t_max: Optional[float] = None) -> Problem:
        phi = self.phi
        return Problem(DomainSpec.interval(0.0, 1.0), self.p, h=0.0,
                       u0=lambda mesh: lam * sample_field(phi, mesh),
                       t_max=self.t_max if t_max is None else t_max, G_max=self.G_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phi"] = getattr(self.phi, "preset", repr(self.phi))
        return d


@dataclass(frozen=True)
class Classification:
    kind: str
    t_stop: float
    m_final: float
    result: Optional[RunResult] = field(default=None, repr=False, compare=False)


def classify_run(problem: Problem, mesh: Mesh, cfg: BisectConfig, *,
                 policy: SamplePolicy = SamplePolicy(), controls: StepControls = StepControls()):
    """Global, BlewUp or Undecided for one amplitude."""
    h = sample_field(problem.h, mesh)
    if np.any(h != 0):
        raise ValueError("threshold classification assumes h = 0")
    res = run(problem, mesh, policy, controls=controls)
    trace = res.trace
    m_final = trace[-1].m
    if res.outcome.kind == BLEW_UP:
        return Classification(BLEW_UP, res.outcome.t_stop, m_final, res)
    if res.outcome.kind == REACHED_HORIZON:
        t, m = trace.t, trace.m
        tail = m[t >= 0.9 * problem.t_max]
        decreasing = tail.size >= 2 and np.all(np.diff(tail) <= 1e-12 * max(tail.max(), 1e-300))
        if m_final <= cfg.settle_threshold and decreasing:
            return Classification(GLOBAL, problem.t_max, m_final, res)
    return Classification(UNDECIDED, trace[-1].t, m_final, res)


@dataclass
class Probe:
    lam: float
    outcome: str
    t_stop: float
    m_final: float
    t_max: float
    counted_as: str


@dataclass
class LambdaStarResult:
    lambda_lo_final: float
    lambda_hi_final: float
    probes: list
    undecided_count: int
    steps: int

    @property
    def width(self) -> float:
        return (self.lambda_hi_final - self.lambda_lo_final) / self.lambda_hi_final

    def to_dict(self) -> dict:
        return {
            "lambda_lo_final": self.lambda_lo_final,
            "lambda_hi_final": self.lambda_hi_final,
            "undecided_count": self.undecided_count,
            "steps": self.steps,
            "probes": [asdict(p) for p in self.probes],
        }

    def write_probe_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "outcome", "t_stop_or_horizon", "m_final"])
            for p in self.probes:
                w.writerow([repr(p.lam), p.outcome, repr(p.t_stop), repr(p.m_final)])

    def check_consistent(self) -> None:
        glob = [p.lam for p in self.probes if p.counted_as == GLOBAL]
        blew = [p.lam for p in self.probes if p.counted_as == BLEW_UP]
        if glob and blew and max(glob) >= min(blew):
            raise InconsistentProbes(
                f"global probe at {max(glob)} lies above a blow-up probe at {min(blew)}"
            )


def bisect_lambda_star(cfg: BisectConfig, classify: Optional[Callable] = None) -> LambdaStarResult:
    """Bisection on the amplitude.

    ``classify(lam, t_max) -> (kind, t_stop, m_final)`` replaces the solver,
    e.g. for testing.  Undecided probes are retried with doubled horizon and
    finally counted as Global.
    """
    if classify is None:
        mesh = cfg.mesh()

        def classify(lam, t_max):
            c = classify_run(cfg.problem(lam, t_max), mesh, cfg)
            return c.kind, c.t_stop, c.m_final

    probes = []
    undecided = 0

    def probe(lam):
        nonlocal undecided
        t_max = cfg.t_max
        was_undecided = False
        for attempt in range(cfg.max_horizon_doublings + 1):
            kind, t_stop, m_final = classify(lam, t_max)
            if kind != UNDECIDED:
                break
            was_undecided = True
            if attempt < cfg.max_horizon_doublings:
                t_max *= 2.0
        counted = GLOBAL if kind == UNDECIDED else kind
        undecided += was_undecided
        probes.append(Probe(float(lam), kind, float(t_stop), float(m_final), float(t_max), counted))
        return counted

    lo, hi = cfg.lambda_lo, cfg.lambda_hi
    for _ in range(cfg.max_expansions + 1):
        if lo == 0.0 or probe(lo) == GLOBAL:
            break
        hi, lo = lo, lo / 2.0
    else:
        raise BracketFailure("no global amplitude found below lambda_lo")
    for _ in range(cfg.max_expansions + 1):
        if probe(hi) == BLEW_UP:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise BracketFailure("no blow-up amplitude found above lambda_hi")

    steps = 0
    while (hi - lo) > cfg.rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if probe(mid) == BLEW_UP:
            hi = mid
        else:
            lo = mid
        steps += 1
    if undecided > 0.25 * len(probes):
        raise TooManyUndecided(f"{undecided} of {len(probes)} probes were undecided")
    out = LambdaStarResult(lo, hi, probes, undecided, steps)
    out.check_consistent()
    return out


# ---------------------------------------------------------------------------
# singular rate


@dataclass
class SingularProbe:
    lam: float
    fit: rates.RateFit
    compensated_growth: float
    ut_bound_M: float
    ut_bound_holds: bool
    min_ut: float  # most negative u_t seen before cutoff
    series: tuple = field(repr=False, default=())
    result: Optional[RunResult] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "fit": self.fit.to_dict(),
            "compensated_growth": self.compensated_growth,
            "ut_bound_M": self.ut_bound_M,
            "ut_bound_holds": self.ut_bound_holds,
            "min_ut": self.min_ut,
        }


def probe_rate(cfg: BisectConfig, lam: float, *, window_decades: float = 2.0,
               growth_decades: float = 2.0, t_max: Optional[float] = None) -> SingularProbe:
    """Run lam * phi to cutoff and measure how singular the approach is."""
    mesh = cfg.mesh()
    res = run(cfg.problem(lam, t_max), mesh, SamplePolicy())
    if not res.outcome.blew_up:
        raise BracketFailure(f"amplitude {lam} did not blow up ({res.outcome.kind})")
    exps = PExponents.of(cfg.p)
    fit = rates.fit_blowup(res.trace, window_decades)
    tau, comp = rates.corrected_series(res.trace, exps, fit.T_est)
    growth = rates.compensated_growth(tau, comp, growth_decades)
    M, holds = check_ut_linear_bound(res.trace, fit.T_est)
    return SingularProbe(float(lam), fit, growth, M, holds,
                         float(np.min(res.trace.column("min_ut"))), (tau, comp), res)


def singular_rate_probe(cfg: BisectConfig, result: LambdaStarResult, *,
                        window_decades: float = 2.0, control_factor: float = 2.0):
    """(near-threshold probe at lambda_hi_final, control probe at
    control_factor * lambda_hi_final)."""
    near = probe_rate(cfg, result.lambda_hi_final, window_decades=window_decades,
                      t_max=max(p.t_max for p in result.probes))
    control = probe_rate(cfg, control_factor * result.lambda_hi_final, window_decades=window_decades)
    return near, control


@dataclass
class Refinement:
    lambda_lo: float
    lambda_hi: float
    halvings: int
    stop_reason: str
    probes: list  # (lam, kind, m_peak)
    near: Optional[SingularProbe] = None

    @property
    def width(self) -> float:
        return (self.lambda_hi - self.lambda_lo) / self.lambda_hi

    def to_dict(self) -> dict:
        return {
            "lambda_lo": self.lambda_lo, "lambda_hi": self.lambda_hi, "width": self.width,
            "halvings": self.halvings, "stop_reason": self.stop_reason,
            "probes": [list(p) for p in self.probes],
            "near": None if self.near is None else self.near.to_dict(),
        }


def refine_bracket(cfg: BisectConfig, result: LambdaStarResult, *, max_halvings: int = 40,
                   target_growth: float = 3.0, peak_guard: float = 0.5) -> Refinement:
    """Keep halving a finished bracket far below ``rel_tol``.

    Stops when a blow-up probe's compensated growth reaches ``target_growth``
    (the singular regime now fills the fit window), when a global probe peaks
    above ``peak_guard * G_max`` (closer subcritical runs would cross G_max and
    be misread as blow-up), or when the bracket hits double precision.
    """
    mesh = cfg.mesh()
    exps = PExponents.of(cfg.p)
    lo, hi = result.lambda_lo_final, result.lambda_hi_final
    probes, near = [], None
    for k in range(max_halvings):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            return Refinement(lo, hi, k, "bracket at machine precision", probes, near)
        c = classify_run(cfg.problem(mid), mesh, cfg)
        peak = float(c.result.trace.m.max())
        probes.append((float(mid), c.kind, peak))
        if c.kind == BLEW_UP:
            hi = mid
            trace = c.result.trace
            fit = rates.fit_blowup(trace)
            tau, comp = rates.corrected_series(trace, exps, fit.T_est)
            growth = rates.compensated_growth(tau, comp)
            M, holds = check_ut_linear_bound(trace, fit.T_est)
            near = SingularProbe(float(mid), fit, growth, M, holds,
                                 float(np.min(trace.column("min_ut"))), (tau, comp), c.result)
            if growth >= target_growth:
                return Refinement(lo, hi, k + 1, "target growth reached", probes, near)
        else:
            lo = mid
            if peak > peak_guard * cfg.G_max:
                return Refinement(lo, hi, k + 1, "subcritical peak near G_max", probes, near)
    return Refinement(lo, hi, max_halvings, "halving budget spent", probes, near)
