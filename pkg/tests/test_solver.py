import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import suite
from gbulab import rates
from gbulab.geometry import DomainSpec, build_mesh
from gbulab.solver import (BLEW_UP, REACHED_HORIZON, UNDERFLOW, InvalidProblem, NotFound,
                           PExponents, Problem, SamplePolicy, ShapeMismatch, StepControls,
                           Trace, check_monotone_criterion, discretize_rhs, forcing_search,
                           run, sample_field)

UNIT = DomainSpec.interval(0.0, 1.0)


@settings(max_examples=100)
@given(p=st.floats(2.0001, 20.0))
def test_exponent_relations(p):
    e = PExponents.of(p)
    assert e.d_p ** (p - 1) * (p - 1) == pytest.approx(1.0, rel=1e-12)
    assert e.c_p * (1 - e.beta) == pytest.approx(e.d_p, rel=1e-12)
    assert e.rate_singular == pytest.approx(2 * e.rate)
    assert e.rate > e.rate_selfsim


def test_exponents_below_two_have_no_rate():
    e = PExponents.of(1.5)
    assert e.rate is None and e.c_p is None
    with pytest.raises(InvalidProblem):
        PExponents.of(1.0)


def test_problem_validation():
    mesh = build_mesh(UNIT, 32)
    with pytest.raises(InvalidProblem):
        Problem(UNIT, 0.5)
    with pytest.raises(InvalidProblem):
        Problem(UNIT, 3.0, h=-1.0).fields(mesh)
    with pytest.raises(InvalidProblem):
        Problem(UNIT, 3.0, u0=1.0).fields(mesh)  # nonzero on the boundary
    with pytest.raises(ShapeMismatch):
        Problem(UNIT, 3.0, h=np.ones(5)).fields(mesh)
    with pytest.raises(ShapeMismatch):
        Problem(DomainSpec.interval(0, 2), 3.0).fields(mesh)


def test_sample_field_forms():
    mesh = build_mesh(DomainSpec.disc(1.0), 16, n_theta=8)
    assert sample_field(2.0, mesh).shape == mesh.shape
    radial = sample_field(np.arange(mesh.n_nodes, dtype=float), mesh)
    assert np.all(radial[:, 0] == radial[:, 3])
    assert sample_field(lambda m: m.dist_field(), mesh).shape == mesh.shape


def test_rhs_vanishes_on_boundary():
    mesh = build_mesh(UNIT, 32)
    prob = Problem(UNIT, 3.0, h=2.0)
    rhs = discretize_rhs(prob, mesh, np.sin(np.pi * mesh.nodes))
    assert rhs[0] == 0 and rhs[-1] == 0


def test_heat_equation_decay():
    # gradient term switched off: u = exp(-pi^2 t) sin(pi x)
    mesh = build_mesh(UNIT, 128, 1.0)
    prob = Problem(UNIT, 3.0, u0=lambda m: np.sin(np.pi * m.nodes), t_max=0.1, gradient_coeff=0.0)
    res = run(prob, mesh)
    assert res.outcome.kind == REACHED_HORIZON
    exact = math.exp(-np.pi**2 * 0.1) * np.sin(np.pi * mesh.nodes)
    assert np.max(np.abs(res.final.u - exact)) < 1e-2 * exact.max()


def test_explicit_and_implicit_blowup_times_agree():
    mesh = build_mesh(UNIT, 64, 1.0)
    prob = Problem(UNIT, 3.0, h=8.0, t_max=5.0, G_max=50.0)
    t_imp = run(prob, mesh).outcome.t_stop
    t_exp = run(prob, mesh, controls=StepControls(method="explicit")).outcome.t_stop
    assert t_exp == pytest.approx(t_imp, rel=0.02)


def test_step_budget_reports_underflow():
    mesh = build_mesh(UNIT, 32)
    res = run(Problem(UNIT, 3.0, h=8.0, t_max=5.0), mesh, controls=StepControls(max_steps=3))
    assert res.outcome.kind == UNDERFLOW


def test_trace_csv_round_trip(tmp_path):
    res = suite.monotone_run(3.0)
    path = tmp_path / "trace.csv"
    res.trace.to_csv(path)
    back = Trace.from_csv(path)
    assert np.array_equal(back.t, res.trace.t) and np.array_equal(back.m, res.trace.m)
    with pytest.raises(ValueError):
        back.append(back[0])


def test_sampling_keeps_ratio_and_reaches_cutoff():
    res = suite.monotone_run(3.0)
    m = res.trace.m
    grow = m[1:] / np.maximum(m[:-1], 1e-300)
    assert np.all(grow[m[:-1] > 1.0] <= 1.05 * (1 + 1e-12))
    assert res.outcome.kind == BLEW_UP and m[-1] >= suite.G_MAX


@pytest.mark.parametrize("p", [2.5, 3.0, 4.0])
def test_monotone_runs_keep_ut_nonnegative(p):
    res = suite.monotone_run(p)
    ok, _ = check_monotone_criterion(suite.monotone_problem(p), suite.interval_mesh(p))
    assert ok
    sup = max(1.0, float(np.max(res.trace.column("sup_ut"))))
    assert np.min(res.trace.column("min_ut")) >= -1e-6 * sup


def test_monotone_criterion_rejects_concave_data():
    mesh = build_mesh(UNIT, 64)
    ok, low = check_monotone_criterion(Problem(UNIT, 3.0, u0=lambda m: np.sin(np.pi * m.nodes)), mesh)
    assert not ok and low < 0


def test_forcing_search_errors():
    mesh = build_mesh(UNIT, 64)
    template = Problem(UNIT, 3.0, h=1.0, t_max=0.5)
    with pytest.raises(NotFound):
        forcing_search(template, mesh, 100.0, h0=0.0)
    with pytest.raises(NotFound):
        forcing_search(template, mesh, 1.5)


def test_forcing_search_brackets_threshold():
    log = []
    template = Problem(UNIT, 3.0, h=1.0, t_max=20.0, G_max=suite.G_MAX)
    A = forcing_search(template, suite.interval_mesh(3.0), 1e4, log=log)
    failures = [a for a, holds, kind in log if kind != BLEW_UP]
    assert failures and max(failures) < A
    assert (A - max(failures)) <= 0.05 * A


def test_shifted_trace_moves_fitted_time():
    tr = suite.monotone_run(3.0).trace
    f0 = rates.fit_blowup(tr)
    f1 = rates.fit_blowup(tr.shifted(5.0))
    assert f1.T_est - f0.T_est == pytest.approx(5.0, abs=1e-9)
    assert f1.gamma == pytest.approx(f0.gamma, abs=1e-9)
