"""Near-boundary diagnostics evaluated on solver states.

Everything here is evaluated on the boundary layer ``0 < d < layer_delta``
(default: the mesh's ``boundary_layer_width``).  The reference profile is
u = c_p d^(1-beta), whose gradient is d_p d^(-beta); most quantities below
compare a state against it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import DISC2D, Mesh
from .rates import InsufficientSpan
from .solver import PExponents, State, Trace

H1_GENERAL = "H1_general"
H2_CONVEX = "H2_convex"


class EmptyLayer(ValueError):
    pass


class DivisionNearZero(ValueError):
    pass


class WrongDomain(ValueError):
    pass


def _layer(mesh: Mesh, delta: Optional[float]) -> np.ndarray:
    mask = mesh.layer_mask(delta).ravel()
    if not mask.any():
        raise EmptyLayer("no interior nodes inside the boundary layer")
    return mask


# ---------------------------------------------------------------------------
# reference profile


def reference_profile(exps: PExponents, d):
    """(u, |grad u|) of c_p d^(1-beta); needs p > 2."""
    if exps.c_p is None:
        raise ValueError("reference profile needs p > 2")
    d = np.asarray(d, dtype=float)
    return exps.c_p * d ** (1.0 - exps.beta), exps.d_p * d ** (-exps.beta)


def profile_identities(exps: PExponents, d) -> dict:
    """Quantities that are constant along the reference profile.

    Returns arrays for d G^(p-1) (equals 1/(p-1)), d^(2-p) u^(p-1)
    (equals c_p^(p-1)), X = G d / u (equals (p-2)/(p-1)) and d^beta G (d_p).
    """
    u, G = reference_profile(exps, d)
    d = np.asarray(d, dtype=float)
    p = exps.p
    return {
        "dG": d * G ** (p - 1.0),
        "du": d ** (2.0 - p) * u ** (p - 1.0),
        "X": G * d / u,
        "bernstein": d**exps.beta * G,
    }


# ---------------------------------------------------------------------------
# Bernstein profile


@dataclass(frozen=True)
class ProfileReport:
    bernstein_excess: float
    alpha_fit: float
    C_fit: float
    hopf_c0: float
    dG_bound: float
    du_bound: float
    plateau_value: float  # largest d^beta |grad u| over the layer
    t: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def bernstein_profile(state: State, mesh: Mesh, exps: PExponents,
                      layer_delta: Optional[float] = None) -> ProfileReport:
    """Compare d^beta |grad u| with d_p on the layer.

    The correction law d_p + C d^alpha is fitted to the positive part of the
    excess; when the excess is nowhere positive the bound holds with C = 0
    and ``alpha_fit`` is NaN.
    """
    mask = _layer(mesh, layer_delta)
    d = mesh.dist_field().ravel()[mask]
    G = state.grad_mag.ravel()[mask]
    u = state.u.ravel()[mask]
    p = exps.p
    q = d**exps.beta * G
    excess = q - exps.d_p
    pos = excess > 0
    alpha = C = float("nan")
    if pos.sum() >= 3 and np.ptp(np.log(d[pos])) > 0:
        b, a = np.polyfit(np.log(d[pos]), np.log(excess[pos]), 1)
        alpha, C = float(b), float(math.exp(a))
    elif not pos.any():
        C = 0.0
    return ProfileReport(
        bernstein_excess=float(excess.max()),
        alpha_fit=alpha,
        C_fit=C,
        hopf_c0=float(np.min(u / d)),
        dG_bound=float(np.max(d * G ** (p - 1.0))),
        du_bound=float(np.max(d ** (2.0 - p) * np.maximum(u, 0.0) ** (p - 1.0))),
        plateau_value=float(q.max()),
        t=state.t,
    )


def x_field(state: State, mesh: Mesh, layer_delta: Optional[float] = None) -> np.ndarray:
    """X = |grad u| d / u on the layer, NaN elsewhere (field shape)."""
    mask = _layer(mesh, layer_delta)
    u = state.u.ravel()
    if np.any(u[mask] < 1e-300):
        raise DivisionNearZero("u vanishes inside the layer")
    out = np.full(u.size, np.nan)
    d = mesh.dist_field().ravel()
    out[mask] = state.grad_mag.ravel()[mask] * d[mask] / u[mask]
    return out.reshape(mesh.shape)


# ---------------------------------------------------------------------------
# auxiliary functional


@dataclass(frozen=True)
class FunctionalConfig:
    epsilon: float
    kappa: float
    variant: str = H2_CONVEX
    layer_delta: Optional[float] = None

    def validate(self, exps: PExponents, mesh: Optional[Mesh] = None):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        if not 0 < self.kappa < exps.p - 2:
            raise ValueError(f"kappa must lie in (0, p-2), got {self.kappa}")
        if self.variant not in (H1_GENERAL, H2_CONVEX):
            raise ValueError(f"unknown variant {self.variant!r}")
        if mesh is not None and self.layer_delta is not None:
            if self.layer_delta > mesh.boundary_layer_width + 1e-15:
                raise ValueError("layer_delta exceeds the mesh boundary layer")


def weight_H(u, d, cfg: FunctionalConfig, exps: PExponents):
    p, k = exps.p, cfg.kappa
    u = np.maximum(u, 0.0)
    if cfg.variant == H1_GENERAL:
        return u ** (p - 1.0 - k) * d ** (2.0 - p + k) * (1.0 + u**k)
    return u ** (p - 1.0) * d ** (2.0 - p) * (1.0 + d**k)


@dataclass(frozen=True)
class JResult:
    min_J: float
    coordinate: float  # node coordinate (x or r) of the minimum
    dist: float
    J: np.ndarray  # field shape; exactly 0 on the boundary, NaN off the layer


def functional_J(state: State, mesh: Mesh, cfg: FunctionalConfig, exps: PExponents) -> JResult:
    """J = u_t - eps * H on the layer; boundary nodes carry J = 0."""
    cfg.validate(exps, mesh)
    mask = _layer(mesh, cfg.layer_delta)
    d = mesh.dist_field().ravel()
    u = state.u.ravel()
    J = np.full(u.size, np.nan)
    J[mask] = state.u_t_field.ravel()[mask] - cfg.epsilon * weight_H(u[mask], d[mask], cfg, exps)
    J[mesh.ops.boundary] = 0.0
    vals = np.where(mask, J, np.inf)
    i = int(np.argmin(vals))
    coord = mesh.nodes[np.unravel_index(i, mesh.shape)[0]]
    return JResult(float(J[i]), float(coord), float(d[i]), J.reshape(mesh.shape))


@dataclass(frozen=True)
class JScanEntry:
    epsilon: float
    kappa: float
    worst_ratio: float  # min over states of min_J / sup_ut
    passes: bool


def default_scan_grid(exps: PExponents):
    eps = list(np.logspace(-4, -1, 7))
    kap = [k for k in (0.02, 0.05, 0.1, 0.2) if k < exps.p - 2]
    return eps, kap


def scan_functional(states: Sequence[State], mesh: Mesh, exps: PExponents, *,
                    eps_values=None, kappa_values=None, variant: str = H2_CONVEX,
                    tol: float = 1e-6, layer_delta: Optional[float] = None):
    """Grid scan of (eps, kappa); an entry passes when
    min_J >= -tol * sup|u_t| on every supplied state."""
    e0, k0 = default_scan_grid(exps)
    eps_values = e0 if eps_values is None else eps_values
    kappa_values = k0 if kappa_values is None else kappa_values
    out = []
    for k in kappa_values:
        for e in eps_values:
            cfg = FunctionalConfig(float(e), float(k), variant, layer_delta)
            worst = math.inf
            for st in states:
                sup_ut = max(float(np.max(np.abs(st.u_t_field))), 1e-300)
                worst = min(worst, functional_J(st, mesh, cfg, exps).min_J / sup_ut)
            out.append(JScanEntry(float(e), float(k), worst, worst >= -tol))
    return out


def chain_exponent(cfg: FunctionalConfig, exps: PExponents) -> float:
    """Exponent q in u_t/d >= eps (u/d)^q implied by J >= 0."""
    if cfg.variant == H1_GENERAL:
        return exps.p - 1.0 - cfg.kappa
    return exps.p - 1.0


@dataclass(frozen=True)
class NormalBound:
    t: np.ndarray
    bound: np.ndarray
    measured: np.ndarray

    @property
    def slack(self):
        return self.bound - self.measured

    @property
    def ratio(self):
        return self.measured / self.bound


def normal_ode_bound(trace: Trace, eps: float, q: float, T_est: float) -> NormalBound:
    """Per-sample [(q-1) eps (T-t)]^(-1/(q-1)) against the measured u_nu."""
    if not (eps > 0 and q > 1):
        raise ValueError("need eps > 0 and q > 1")
    t = trace.t
    keep = t < T_est
    t = t[keep]
    bound = ((q - 1.0) * eps * (T_est - t)) ** (-1.0 / (q - 1.0))
    return NormalBound(t, bound, trace.column("u_nu_boundary")[keep])


def check_ut_linear_bound(trace, T_est: float, t0: Optional[float] = None,
                          column: str = "max_ut", tail: int = 3):
    """M = max of (positive part of u_t) / (T - t) over samples in (t0, T).

    Holds iff the maximum is not among the last ``tail`` samples, i.e. the
    ratio does not keep growing toward T.  ``trace`` is a Trace or (t, ut).
    """
    if isinstance(trace, Trace):
        t, ut = trace.t, trace.column(column)
    else:
        t, ut = (np.asarray(a, dtype=float) for a in trace)
    t0 = 0.5 * T_est if t0 is None else t0
    keep = (t > t0) & (t < T_est)
    if keep.sum() <= tail:
        raise InsufficientSpan("too few samples before T")
    ratio = np.maximum(ut[keep], 0.0) / (T_est - t[keep])
    i = int(np.argmax(ratio))
    return float(ratio[i]), i < ratio.size - tail


# ---------------------------------------------------------------------------
# disc: tangential quantities


def tangential_profile(state: State, mesh: Mesh, gamma: float,
                       layer_delta: Optional[float] = None):
    """(max d^(1/2) |u_theta / r|, max d^(1+gamma) |Lap u - u_rr|) over the layer."""
    if mesh.kind != DISC2D:
        raise WrongDomain("tangential profile is defined on the disc only")
    mask = _layer(mesh, layer_delta)
    ops = mesh.ops
    uf = state.u.ravel()
    d = mesh.dist_field().ravel()[mask]
    tang = (ops.grads[1] @ uf)[mask]
    rest = (ops.lap_tangential @ uf)[mask]
    return float(np.max(d**0.5 * np.abs(tang))), float(np.max(d ** (1.0 + gamma) * np.abs(rest)))
