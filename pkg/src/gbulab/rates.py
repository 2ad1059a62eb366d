"""Blow-up time and rate exponent from a gradient trace.

The model is m(t) = C (T - t)^(-gamma).  For a trial T the best (gamma, C)
come from a straight-line fit of log m against log(T - t); T itself is found
by golden-section search on the rms misfit of that line.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .solver import PExponents, Trace



class InsufficientSpan(ValueError):
    pass


class NonMonotone(ValueError):
    pass


@dataclass(frozen=True)
class RateFit:
    T_est: float
    gamma: float
    C_pref: float
    residual: float
    n_points: int
    window: tuple
    gamma_stderr: float = float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d


class RateType(str, enum.Enum):
    TYPE_II = "TypeII"
    TYPE_I_SELFSIM = "TypeI_SelfSimilar"


def _line_fit(x, y):
    """Least squares y = a + b x; returns (a, b, rms, stderr of b)."""
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    b = float(dx @ (y - ym)) / sxx
    a = ym - b * xm
    r = y - a - b * x
    rms = math.sqrt(float(r @ r) / x.size)
    n = x.size
    se = math.sqrt(float(r @ r) / max(n - 2, 1) / sxx) if n > 2 else float("nan")
    return a, b, rms, se


def _window(t, m, decades):
    if t.size < 5:
        raise InsufficientSpan("need at least 5 samples")
    if not np.all(np.diff(t) > 0):
        raise ValueError("trace times must be strictly increasing")
    m_hi = m[-1]
    if not m_hi > 0:
        raise InsufficientSpan("final gradient is zero")
    m_lo = m_hi * 10.0 ** (-decades) * (1.0 + 1e-9)
    below = np.flatnonzero(m < m_lo)
    if below.size == 0:
        raise InsufficientSpan(
            f"gradient spans {math.log10(m_hi / max(m.min(), 1e-300)):.2f} decades, need {decades}"
        )
    # keep the sample that reaches the window floor
    start = below[-1] if m[below[-1]] * (1.0 + 1e-6) >= m_lo else below[-1] + 1
    tw, mw = t[start:], m[start:]
    if tw.size < 5:
        raise InsufficientSpan("fewer than 5 samples in the fit window")
    run_max = np.maximum.accumulate(mw)
    if np.any(mw < 0.9 * run_max):
        raise NonMonotone("gradient drops more than 10% inside the fit window")
    return tw, mw


def fit_blowup(trace, window_decades: float = 2.0, *, tol: float = 1e-13) -> RateFit:
    """Fit m = C (T - t)^(-gamma) over the last ``window_decades`` decades of m.

    ``trace`` is a :class:`~gbulab.solver.Trace` or a pair of arrays (t, m).
    """
    if isinstance(trace, Trace):
        if trace.outcome is not None and not trace.outcome.blew_up:
            raise InsufficientSpan(f"trace did not blow up ({trace.outcome.kind})")
        t, m = trace.t, trace.m
    else:
        t, m = (np.asarray(a, dtype=float) for a in trace)
    tw, mw = _window(t, m, window_decades)
    t_hi, t_lo = tw[-1], tw[0]
    back = t_hi - tw  # offsets from the last sample, exact for shifted traces
    y = np.log(mw)

    def misfit(log_tau):
        return _line_fit(np.log(back + math.exp(log_tau)), y)[2]

    def best(a, b):
        xtol = tol * max(1.0, abs(a) + abs(b))
        return minimize_scalar(misfit, bounds=(a, b), method="bounded",
                               options={"xatol": xtol, "maxiter": 2000}).x

    lo = math.log(t_hi - tw[-2])
    hi = math.log(t_hi - t_lo)
    for _ in range(9):
        x = best(lo, hi)
        edge = 1e-6 * (hi - lo)
        if x > hi - edge:
            hi += math.log(2.0)
        elif x < lo + edge:
            lo -= math.log(2.0)
        else:
            break
    tau = math.exp(x)
    a, b, rms, se = _line_fit(np.log(back + tau), y)
    return RateFit(
        T_est=float(t_hi + tau),
        gamma=float(-b),
        C_pref=float(math.exp(a)),
        residual=float(rms),
        n_points=int(tw.size),
        window=(float(t_lo), float(t_hi)),
        gamma_stderr=float(se),
    )


def classify_type(fit: RateFit, exps: PExponents, margin: float = 0.1) -> RateType:
    """Type II iff gamma exceeds the self-similar exponent by more than ``margin``.

    Anything else is returned as ``TYPE_I_SELFSIM`` and should be treated as an
    anomaly: blow-up of this equation is never self-similar.
    """
    if fit.gamma > exps.rate_selfsim + margin:
        return RateType.TYPE_II
    return RateType.TYPE_I_SELFSIM


def corrected_series(trace, exps: PExponents, T_est: float, rate: Optional[float] = None):
    """Arrays (T - t, (T - t)^rate * m) over samples with t < T_est.

    ``rate`` defaults to 1/(p-2).  Flat output means m follows that rate;
    steady growth as T - t shrinks means m is more singular.
    """
    if rate is None:
        if exps.rate is None:
            raise ValueError("compensated series needs p > 2")
        rate = exps.rate
    if isinstance(trace, Trace):
        t, m = trace.t, trace.m
    else:
        t, m = (np.asarray(a, dtype=float) for a in trace)
    keep = t < T_est
    tau = T_est - t[keep]
    return tau, tau**rate * m[keep]


def compensated_growth(tau, comp, decades: float = 2.0) -> float:
    """Ratio of the compensated value at the smallest T - t to its value
    ``decades`` decades earlier (log-linear interpolation)."""
    tau = np.asarray(tau, dtype=float)
    comp = np.asarray(comp, dtype=float)
    order = np.argsort(tau)
    tau, comp = tau[order], comp[order]
    target = tau[0] * 10.0**decades
    if target > tau[-1]:
        raise InsufficientSpan(f"series covers fewer than {decades} decades of T - t")
    earlier = math.exp(np.interp(math.log(target), np.log(tau), np.log(comp)))
    return float(comp[0] / earlier)
