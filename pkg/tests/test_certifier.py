import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbulab import certifier
from gbulab.certifier import CaseViolated, ParamGrid
from gbulab.solver import PExponents

SMALL = ParamGrid(X_values=tuple(np.linspace(0, 5, 101)), s_values=tuple(np.logspace(-4, 0, 50)))


def test_default_grid_all_required_families_pass():
    certs = certifier.certify_all()
    assert certifier.all_required_pass(certs)
    families = {c.family for c in certs}
    assert {"case_2_1", "case_3_3", "young_step", "supersolution_ode", "operator_identity"} <= families
    sharp = next(c for c in certs if c.family == "case_3_3_sharp")
    assert not sharp.required
    assert all(isinstance(c.to_dict()["worst_margin"], float) for c in certs)


def test_p_above_three_is_a_negative_control():
    certs = certifier.check_case_inequalities(certifier.extended_grid(3.2, X_values=SMALL.X_values,
                                                                      s_values=SMALL.s_values))
    c = next(c for c in certs if c.family == "case_2_1")
    assert not c.passed and c.worst_margin < 0
    assert c.worst_point["p"] == pytest.approx(3.2)
    with pytest.raises(CaseViolated) as err:
        certifier.check_case_inequalities(certifier.extended_grid(3.2), raise_on_violation=True)
    assert "case_2_1" in str(err.value)


@pytest.mark.parametrize("kw", [
    dict(p_values=()),
    dict(p_values=(2.0,)),
    dict(p_values=(3.5,)),
    dict(X_values=(-1.0, 1.0)),
    dict(s_values=(0.0, 0.5)),
    dict(s_values=(2.0,)),
])
def test_param_grid_validation(kw):
    with pytest.raises(ValueError):
        ParamGrid(**kw)


def test_kappa_filter():
    g = ParamGrid(kappa_values=(1e-3, 0.05, 0.2))
    assert g.kappas(2.5) == [1e-3, 0.05]
    assert ParamGrid().kappas(3.0) == sorted({1e-3, 1e-2, 0.05, 0.1})


@settings(max_examples=200)
@given(p=st.floats(2.05, 3.0), kfrac=st.floats(0.0, 0.1), d=st.floats(1e-6, 1.0),
       G=st.floats(1e-2, 1e6), u=st.floats(1e-6, 10.0), scale=st.floats(0.2, 5.0))
def test_young_inequality_holds_for_any_theta(p, kfrac, d, G, u, scale):
    k = kfrac * (p - 2)
    theta = scale * certifier.young_theta(p, 0.0, k)
    lhs, rhs = certifier.young_sides(d, G, u, p, theta)
    assert lhs <= rhs * (1 + 1e-9)


def test_young_random_sampling_is_seeded():
    a = certifier.check_young_step(SMALL, n_samples=300, seed=7)
    b = certifier.check_young_step(SMALL, n_samples=300, seed=7)
    assert a.passed and a.worst_margin == b.worst_margin


@settings(max_examples=50)
@given(p=st.floats(2.05, 6.0), s=st.floats(1e-6, 1.0))
def test_supersolution_M0_cancels(p, s):
    beta = PExponents.of(p).beta
    w, dw, target = certifier.supersolution_terms(s, p, 0.0, beta)
    assert target == 0.0
    assert abs(dw + w**p) <= 1e-10 * abs(dw)


def test_supersolution_with_positive_M():
    c = certifier.check_supersolution_ode(SMALL, M_values=(0.0, 1.0), n_gamma=2, with_comparison=True)
    assert c.passed
    assert certifier.comparison_gap(2.5, 1.0, 0.5) > 0


def test_operator_identity_second_order():
    c = certifier.check_operator_identity()
    assert c.passed
    assert len(c.details["orders"]) >= 3 and min(c.details["orders"]) >= 1.8
