"""Time integration of u_t - Lap u = |grad u|^p + h with zero Dirichlet data.

Two integrators share one spatial discretisation:

* ``"implicit"`` (default): backward Euler, Newton on the interior unknowns.
  Steps are sized so that log ||grad u||_inf moves by about ``target_dlogm``
  per step, which keeps the cost per decade of gradient growth fixed.
* ``"explicit"``: forward Euler with the diffusive and gradient-CFL limits.
  Only practical on coarse meshes; kept for cross-checks.

Fields are numpy arrays in mesh field shape; see :mod:`gbulab.geometry`.
"""

from __future__ import annotations

import csv
import math
import time as _time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from .geometry import DISC2D, DomainSpec, Mesh


class ShapeMismatch(ValueError):
    pass


class InvalidProblem(ValueError):
    pass


class StepUnderflow(RuntimeError):
    pass


class NotFound(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# exponents and problem description


@dataclass(frozen=True)
class PExponents:
    """Constants attached to the exponent p.

    >>> round(PExponents.of(3.0).d_p, 5)
    0.70711
    """

    p: float
    beta: float
    d_p: float
    c_p: Optional[float]
    q_lower: float
    rate: Optional[float]
    rate_singular: Optional[float]
    rate_selfsim: float

    @classmethod
    def of(cls, p: float) -> "PExponents":
        if not p > 1:
            raise InvalidProblem(f"p must exceed 1, got {p}")
        beta = 1.0 / (p - 1.0)
        d_p = (p - 1.0) ** (-beta)
        above2 = p > 2
        return cls(
            p=float(p),
            beta=beta,
            d_p=d_p,
            c_p=(p - 1.0) / (p - 2.0) * d_p if above2 else None,
            q_lower=p - 1.0,
            rate=1.0 / (p - 2.0) if above2 else None,
            rate_singular=2.0 / (p - 2.0) if above2 else None,
            rate_selfsim=1.0 / (2.0 * (p - 1.0)),
        )


FieldLike = Union[float, np.ndarray, Callable[[Mesh], np.ndarray]]


def sample_field(value: FieldLike, mesh: Mesh) -> np.ndarray:
    """Constant, array, or ``callable(mesh)`` turned into a field array."""
    if callable(value):
        arr = np.asarray(value(mesh), dtype=float)
    elif np.isscalar(value):
        arr = np.full(mesh.shape, float(value))
    else:
        arr = np.asarray(value, dtype=float)
    if arr.shape != mesh.shape:
        if arr.size == mesh.n_nodes and len(mesh.shape) == 2:
            arr = np.repeat(arr.reshape(-1, 1), mesh.shape[1], axis=1)
        else:
            raise ShapeMismatch(f"field shape {arr.shape} does not match mesh {mesh.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Problem:
    """Simulation instance.

    ``h`` and ``u0`` may be constants, arrays in field shape, or callables
    taking the mesh.  ``gradient_coeff`` multiplies the |grad u|^p term
    (1 for the equation itself, 0 for the heat equation).
    """

    domain: DomainSpec
    p: float
    h: FieldLike = 0.0
    u0: FieldLike = 0.0
    t_max: float = 1.0
    G_max: float = 1e6
    gradient_coeff: float = 1.0

    def __post_init__(self):
        if not self.p > 1:
            raise InvalidProblem(f"p must exceed 1, got {self.p}")
        if not (self.t_max > 0 and self.G_max > 0):
            raise InvalidProblem("t_max and G_max must be positive")

    @property
    def exponents(self) -> PExponents:
        return PExponents.of(self.p)

    def with_forcing(self, h: FieldLike) -> "Problem":
        return replace(self, h=h)

    def fields(self, mesh: Mesh, *, validate: bool = True):
        """(h, u0) sampled on ``mesh``; u0 is zeroed on the boundary."""
        if mesh.spec != self.domain:
            raise ShapeMismatch("mesh was built for a different domain")
        h = sample_field(self.h, mesh)
        u0 = sample_field(self.u0, mesh).copy()
        ops = mesh.ops
        if validate:
            scale = max(1.0, float(np.max(np.abs(u0))))
            if np.any(h < 0):
                raise InvalidProblem("forcing h must be nonnegative")
            if np.any(u0 < -1e-12 * scale):
                raise InvalidProblem("initial data must be nonnegative")
            if np.any(np.abs(u0.ravel()[ops.boundary]) > 1e-12 * scale):
                raise InvalidProblem("initial data must vanish on the boundary")
        u0.ravel()[ops.boundary] = 0.0
        if mesh.kind == DISC2D:
            u0[0, :] = u0[0, :].mean()
        return h, u0

    def to_dict(self) -> dict:
        def enc(v):
            if callable(v):
                return getattr(v, "preset", repr(v))
            if np.isscalar(v):
                return float(v)
            return {"array": np.asarray(v).tolist()}

        return {
            "domain": self.domain.to_dict(),
            "p": self.p,
            "h": enc(self.h),
            "u0": enc(self.u0),
            "t_max": self.t_max,
            "G_max": self.G_max,
            "gradient_coeff": self.gradient_coeff,
        }


# ---------------------------------------------------------------------------
# states and traces


def _gradient(ops, u_flat):
    comps = [g @ u_flat for g in ops.grads]
    if len(comps) == 1:
        return comps, np.abs(comps[0])
    return comps, np.sqrt(sum(c * c for c in comps))


def discretize_rhs(problem: Problem, mesh: Mesh, u, *, h=None, source=None) -> np.ndarray:
    """Lap_h u + |grad_h u|^p + h at interior nodes, 0 on the boundary."""
    u = np.asarray(u, dtype=float)
    if u.shape != mesh.shape:
        raise ShapeMismatch(f"field shape {u.shape} does not match mesh {mesh.shape}")
    if h is None:
        h = sample_field(problem.h, mesh)
    ops = mesh.ops
    uf = u.ravel()
    _, G = _gradient(ops, uf)
    out = ops.lap @ uf + problem.gradient_coeff * G**problem.p + h.ravel()
    if source is not None:
        out = out + np.asarray(source, dtype=float).ravel()
    out[ops.boundary] = 0.0
    return out.reshape(mesh.shape)


@dataclass(frozen=True, eq=False)
class State:
    t: float
    u: np.ndarray
    grad_mag: np.ndarray
    u_t_field: np.ndarray

    @classmethod
    def build(cls, problem, mesh, t, u, h, source=None, u_t=None) -> "State":
        uf = u.ravel()
        _, G = _gradient(mesh.ops, uf)
        ut = discretize_rhs(problem, mesh, u, h=h, source=source) if u_t is None else u_t
        return cls(t=float(t), u=u, grad_mag=G.reshape(mesh.shape), u_t_field=ut)

    @property
    def m(self) -> float:
        return float(self.grad_mag.max())


TRACE_COLUMNS = (
    "t", "m", "sup_u", "sup_ut", "u_nu_boundary", "bernstein_sup", "max_ut", "min_ut",
)


@dataclass(frozen=True)
class TraceSample:
    t: float
    m: float
    sup_u: float
    sup_ut: float
    u_nu_boundary: float
    bernstein_sup: float
    max_ut: float = float("nan")
    min_ut: float = float("nan")


def sample_state(state: State, mesh: Mesh, exps: PExponents) -> TraceSample:
    ops = mesh.ops
    uf = state.u.ravel()
    unu = ops.dnu @ uf
    d = mesh.dist_field().ravel()
    layer = mesh.layer_mask().ravel()
    G = state.grad_mag.ravel()
    bern = float(np.max(d[layer] ** exps.beta * G[layer])) if layer.any() else float("nan")
    ut = state.u_t_field.ravel()[~ops.boundary]
    return TraceSample(
        t=state.t,
        m=state.m,
        sup_u=float(np.max(np.abs(uf))),
        sup_ut=float(np.max(np.abs(ut))),
        u_nu_boundary=float(np.max(unu[ops.boundary])),
        bernstein_sup=bern,
        max_ut=float(ut.max()),
        min_ut=float(ut.min()),
    )


class Trace:
    """Time series of :class:`TraceSample` rows with column access."""

    def __init__(self, samples=(), outcome: Optional["Outcome"] = None):
        self.samples = list(samples)
        self.outcome = outcome

    def append(self, s: TraceSample):
        if self.samples and not s.t > self.samples[-1].t:
            raise ValueError("trace samples must be strictly increasing in t")
        self.samples.append(s)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.samples], dtype=float)

    @property
    def t(self):
        return self.column("t")

    @property
    def m(self):
        return self.column("m")

    def shifted(self, c: float) -> "Trace":
        out = Trace([replace(s, t=s.t + c) for s in self.samples], self.outcome)
        if out.outcome is not None and out.outcome.t_stop is not None:
            out.outcome = replace(out.outcome, t_stop=out.outcome.t_stop + c)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for s in self.samples:
                w.writerow([repr(float(getattr(s, c))) for c in TRACE_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "Trace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and not {"t", "m"} <= set(rows[0]):
            raise ValueError("trace CSV must have t and m columns")
        samples = []
        for r in rows:
            kw = {c: float(r[c]) for c in TRACE_COLUMNS if c in r and r[c] != ""}
            for c in TRACE_COLUMNS:
                kw.setdefault(c, float("nan"))
            samples.append(TraceSample(**kw))
        return cls(samples)


BLEW_UP = "BlewUp"
REACHED_HORIZON = "ReachedHorizon"
UNDERFLOW = "Underflow"


@dataclass(frozen=True)
class Outcome:
    kind: str
    t_stop: Optional[float] = None

    @property
    def blew_up(self) -> bool:
        return self.kind == BLEW_UP


@dataclass(frozen=True)
class SamplePolicy:
    """When to record a trace sample.

    A sample is taken whenever m has grown by ``sqrt(sample_ratio)`` since the
    previous one or ``max_dt_fraction * t_max`` time has passed; single steps
    are limited to the same gradient ratio, so consecutive samples never
    differ by more than ``sample_ratio``.
    """

    sample_ratio: float = 1.05
    max_dt_fraction: float = 0.01
    keep_states: bool = False


@dataclass(frozen=True)
class StepControls:
    method: str = "implicit"
    target_dlogm: float = 0.02
    bulk_rtol: float = 2e-3
    dt_max: Optional[float] = None  # default t_max / 100
    dt_initial: Optional[float] = None
    newton_rtol: float = 1e-10
    newton_maxit: int = 12
    max_steps: int = 200_000
    # explicit integrator
    safety: float = 0.4
    c_diff: float = 0.5
    c_adv: float = 1.0


@dataclass(eq=False)
class RunResult:
    trace: Trace
    outcome: Outcome
    final: State
    states: list = field(default_factory=list)
    steps: int = 0
    rejected: int = 0
    wall_time: float = 0.0

    def __iter__(self):  # (trace, outcome) unpacking
        return iter((self.trace, self.outcome))


# ---------------------------------------------------------------------------
# integrators


class _Implicit:
    """Backward Euler on the reduced unknowns, Newton with analytic Jacobian."""

    def __init__(self, problem: Problem, mesh: Mesh, h: np.ndarray, ctrl: StepControls):
        ops = mesh.ops
        self.ctrl = ctrl
        self.ops = ops
        self.p = problem.p
        self.coef = problem.gradient_coeff
        self.L = ops.lap_red
        self.D = ops.grads_red
        self.h = h.ravel()[ops.unknowns]
        self.n = ops.unknowns.size
        self.banded = ops.tridiagonal
        if self.banded:
            self.Lb = self._bands(self.L)
            self.Db = self._bands(self.D[0])

    @staticmethod
    def _bands(A):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        ab = np.zeros((3, n))
        ab[0, 1:] = A.diagonal(1)
        ab[1] = A.diagonal()
        ab[2, :-1] = A.diagonal(-1)
        return ab

    def _terms(self, v):
        comps = [D @ v for D in self.D]
        p = self.p
        if len(comps) == 1:
            g = comps[0]
            G = np.abs(g)
            slopes = [p * G ** (p - 1.0) * np.sign(g)]
        else:
            G = np.sqrt(sum(c * c for c in comps))
            w = np.where(G > 0, p * G ** (p - 2.0), 0.0) if p < 2 else p * G ** (p - 2.0)
            slopes = [w * c for c in comps]
        return G, slopes

    def solve(self, v_old, dt, extra=None):
        """Return (v_new, converged)."""
        f = self.h if extra is None else self.h + extra
        v = v_old.copy()
        done = False
        prev = math.inf
        for _ in range(self.ctrl.newton_maxit + 1):
            G, slopes = self._terms(v)
            res = v - v_old - dt * (self.L @ v + self.coef * G**self.p + f)
            if not np.all(np.isfinite(res)):
                return v, False
            if self.banded:
                ab = -dt * (self.Lb + self.coef * self.Db * self._shift(slopes[0]))
                ab[1] += 1.0
                delta = solve_banded((1, 1), ab, -res, check_finite=False)
            else:
                J = self.L + self.coef * sum(sp.diags(s) @ D for s, D in zip(slopes, self.D))
                J = sp.identity(self.n, format="csc") - dt * sp.csc_matrix(J)
                delta = splu(J).solve(-res)
            v = v + delta
            if not np.all(np.isfinite(v)):
                return v, False
            if done:
                return v, True
            # one extra iteration after the test passes, so (v - v_old)/dt is clean
            rel = float(np.max(np.abs(delta) / (np.abs(v) + 1e-300)))
            # on extreme meshes the residual has a rounding floor near 1e-10
            done = rel <= self.ctrl.newton_rtol or (rel <= 1e-7 and rel > 0.1 * prev)
            prev = rel
        return v, False

    @staticmethod
    def _shift(row_scale):
        # banded storage: entry ab[k, j] belongs to row j + 1 - k
        n = row_scale.size
        out = np.empty((3, n))
        out[1] = row_scale
        out[0, 1:] = row_scale[:-1]
        out[0, 0] = 0.0
        out[2, :-1] = row_scale[1:]
        out[2, -1] = 0.0
        return out


def _explicit_dt(problem, mesh, m, ctrl, dt_max):
    hmin = mesh.h_min
    if mesh.kind == DISC2D:
        r1 = mesh.nodes[1]
        hmin = min(hmin, r1 * 2.0 * math.pi / len(mesh.theta))
    adv = (
        ctrl.c_adv * hmin / (problem.p * m ** (problem.p - 1.0))
        if m > 0 and problem.gradient_coeff
        else math.inf
    )
    return ctrl.safety * min(ctrl.c_diff * hmin**2, adv, dt_max)


def step(problem: Problem, mesh: Mesh, state: State, dt: Optional[float] = None, *,
         controls: StepControls = StepControls(), h=None) -> State:
    """One explicit Euler step with the CFL-limited time step."""
    if state.t >= problem.t_max:
        raise ValueError("state is already at the horizon")
    if state.m >= problem.G_max:
        raise ValueError("gradient already above G_max")
    if h is None:
        h = sample_field(problem.h, mesh)
    dt_max = controls.dt_max or problem.t_max / 100.0
    if dt is None:
        dt = _explicit_dt(problem, mesh, state.m, controls, dt_max)
    dt = min(dt, problem.t_max - state.t)
    if dt < 1e-15 * problem.t_max:
        raise StepUnderflow(f"time step {dt:.3e} below floor at t={state.t}")
    u = state.u + dt * state.u_t_field
    u.ravel()[mesh.ops.boundary] = 0.0
    if mesh.kind == DISC2D:
        u[0, :] = u[0, :].mean()
    return State.build(problem, mesh, state.t + dt, u, h)


def run(problem: Problem, mesh: Mesh, sample_policy: SamplePolicy = SamplePolicy(), *,
        controls: StepControls = StepControls(), source: Optional[Callable] = None,
        validate: bool = True) -> RunResult:
    """Integrate until blow-up (m >= G_max), the horizon, or step underflow.

    ``source(t, mesh)`` adds a time-dependent term to the right-hand side; it
    exists for manufactured-solution checks and skips nothing else.
    """
    wall0 = _time.perf_counter()
    h, u0 = problem.fields(mesh, validate=validate)
    exps = problem.exponents
    ops = mesh.ops
    t_max = problem.t_max
    dt_max = controls.dt_max or t_max / 100.0
    # time resolution is relative to the clock value itself
    def dt_floor():
        return 1e-15 * max(state.t, 1e-6 * t_max)

    log_ratio = math.log(sample_policy.sample_ratio)
    step_cap = 0.5 * log_ratio

    def src(t):
        return None if source is None else sample_field(source(t, mesh), mesh)

    state = State.build(problem, mesh, 0.0, u0, h, src(0.0))
    trace = Trace()
    states = []
    last = sample_state(state, mesh, exps)
    trace.append(last)
    if sample_policy.keep_states:
        states.append(state)

    # floor for the relative error test while u is still near zero
    u_scale = max(float(np.max(np.abs(u0))), 0.5 * float(np.max(h)) * mesh.half_width**2, 1e-300)
    implicit = controls.method == "implicit"
    if implicit:
        integ = _Implicit(problem, mesh, h, controls)
    elif controls.method != "explicit":
        raise ValueError(f"unknown method {controls.method!r}")

    dt = controls.dt_initial or min(dt_max, 1e-4 * t_max)
    steps = rejected = 0
    outcome = None
    while outcome is None:
        if state.m >= problem.G_max:
            outcome = Outcome(BLEW_UP, state.t)
            break
        if state.t >= t_max * (1 - 1e-14):
            outcome = Outcome(REACHED_HORIZON, state.t)
            break
        if steps >= controls.max_steps:
            outcome = Outcome(UNDERFLOW, state.t)
            break
        if not implicit:
            dt = min(_explicit_dt(problem, mesh, state.m, controls, dt_max), t_max - state.t)
            if dt < dt_floor():
                outcome = Outcome(UNDERFLOW, state.t)
                break
            s_new = step(problem, mesh, state, dt, controls=controls, h=h)
            if source is not None:
                s_new = State.build(problem, mesh, s_new.t, s_new.u, h, src(s_new.t))
            ok = True
        else:
            dt = min(dt, dt_max, t_max - state.t)
            if dt < dt_floor():
                outcome = Outcome(UNDERFLOW, state.t)
                break
            extra = None
            if source is not None:
                extra = src(state.t + dt).ravel()[ops.unknowns]
            v_old = state.u.ravel()[ops.unknowns]
            v, ok = integ.solve(v_old, dt, extra)
            if ok:
                u = (ops.expand @ v).reshape(mesh.shape)
                # backward Euler: the difference quotient is the spatial residual at
                # the new time, without the cancellation error of evaluating it
                ut = (u - state.u) / dt
                ut.ravel()[ops.boundary] = 0.0
                s_new = State.build(problem, mesh, state.t + dt, u, h, u_t=ut)
                m0, m1 = state.m, s_new.m
                dlogm = abs(math.log(m1 / m0)) if m0 > 0 and m1 > 0 else 0.0
                scale = max(float(np.max(np.abs(u))), u_scale)
                bulk = 0.5 * dt * float(np.max(np.abs(s_new.u_t_field - state.u_t_field))) / scale
                if m1 >= problem.G_max and m0 > 0:
                    # land near the cutoff rather than far beyond it
                    ok = math.log(m1 / problem.G_max) <= step_cap
                ok = ok and dlogm <= min(2 * controls.target_dlogm, step_cap) and bulk <= 4 * controls.bulk_rtol
                fac = 2.0
                if dlogm > 0:
                    fac = min(fac, controls.target_dlogm / dlogm)
                if bulk > 0:
                    fac = min(fac, controls.bulk_rtol / bulk)
                fac = max(fac, 0.2)
            else:
                fac = 0.25
            if not ok:
                rejected += 1
                dt *= min(fac, 0.5)
                continue
            dt *= min(max(fac, 0.5), 2.0)
        steps += 1
        state = s_new
        if np.any(~np.isfinite(state.u)):
            outcome = Outcome(UNDERFLOW, state.t)
            break
        grew = state.m > 0 and (last.m == 0 or math.log(state.m / last.m) >= step_cap)
        aged = state.t - last.t >= sample_policy.max_dt_fraction * t_max
        final = state.m >= problem.G_max or state.t >= t_max * (1 - 1e-14)
        if grew or aged or final:
            last = sample_state(state, mesh, exps)
            trace.append(last)
            if sample_policy.keep_states:
                states.append(state)

    trace.outcome = outcome
    return RunResult(
        trace=trace,
        outcome=outcome,
        final=state,
        states=states,
        steps=steps,
        rejected=rejected,
        wall_time=_time.perf_counter() - wall0,
    )


# ---------------------------------------------------------------------------
# forcing criterion and search


def check_monotone_criterion(problem: Problem, mesh: Mesh, tol: float = 1e-10):
    """Is Lap u0 + |grad u0|^p + h >= -tol at every interior node?"""
    h, u0 = problem.fields(mesh)
    rhs = discretize_rhs(problem, mesh, u0, h=h).ravel()
    interior = ~mesh.ops.boundary
    min_value = float(rhs[interior].min())
    scale = max(1.0, float(np.max(np.abs(h))))
    return min_value >= -tol * scale, min_value


def forcing_search(problem_template: Problem, mesh: Mesh, A_max: float, *,
                   h0: FieldLike = None, A_start: float = 1.0, rel_tol: float = 0.05,
                   policy: SamplePolicy = SamplePolicy(), controls: StepControls = StepControls(),
                   log: Optional[list] = None) -> float:
    """Smallest amplitude A (doubling, then bisection) such that h = A*h0
    satisfies the monotone criterion and the run blows up before t_max.

    ``h0`` defaults to the template's forcing.  Probe records
    ``(A, criterion_holds, outcome_kind)`` are appended to ``log`` if given.
    """
    base = sample_field(problem_template.h if h0 is None else h0, mesh)
    if np.any(base < 0):
        raise InvalidProblem("base forcing profile must be nonnegative")
    if not np.any(base > 0):
        raise NotFound("zero forcing profile cannot drive blow-up")

    def succeeds(A):
        prob = replace(problem_template, h=A * base)
        holds, _ = check_monotone_criterion(prob, mesh)
        kind = None
        if holds:
            kind = run(prob, mesh, policy, controls=controls).outcome.kind
        if log is not None:
            log.append((A, holds, kind))
        return holds and kind == BLEW_UP

    lo, A = 0.0, A_start
    while not succeeds(A):
        lo = A
        A *= 2.0
        if A > A_max:
            raise NotFound(f"no blow-up for amplitudes up to {A_max}")
    hi = A
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if succeeds(mid):
            hi = mid
        else:
            lo = mid
    return hi
