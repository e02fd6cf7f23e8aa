import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import zero_model
from sdeconv.core import (AssumptionConstants, ModelDynamics, SchemeParams, TimeGrid,
                          commutativity_check, levy_coefficient_eval, levy_trace,
                          validate_step_size)
from sdeconv.errors import ArgumentError, CapabilityError, DomainError
from sdeconv.models import (AitSahaliaParams, Heston32Params, ait_sahalia_dynamics, gbm_dynamics,
                            heston32_dynamics, polynomial_stress_dynamics)


def fd_levy(g, x, eps=1e-6):
    """Independent scalar oracle for g'(x) g(x)."""
    d = eps * max(1.0, abs(x))
    return (g(x + d) - g(x - d)) / (2 * d) * g(x)


def test_levy_heston_at_one():
    model = heston32_dynamics(Heston32Params(beta=1.0))
    got = levy_coefficient_eval(model, np.array([1.0]), 0, 0)
    assert got[0] == pytest.approx(1.5, rel=1e-14)
    assert got[0] == pytest.approx(fd_levy(lambda x: x ** 1.5, 1.0), rel=1e-8)


def test_levy_ait_sahalia_at_one():
    model = ait_sahalia_dynamics(AitSahaliaParams(sigma=1.0, rho=2.0))
    got = levy_coefficient_eval(model, np.array([1.0]), 0, 0)
    assert got[0] == pytest.approx(2.0, rel=1e-14)
    assert got[0] == pytest.approx(fd_levy(lambda x: x ** 2, 1.0), rel=1e-8)


@pytest.mark.parametrize("route", ["auto", "fd"])
def test_levy_zero_diffusion(route):
    model = zero_model(2, 2)
    out = levy_coefficient_eval(model, np.array([0.3, -2.0]), 1, 0, route=route)
    assert np.array_equal(out, np.zeros(2))


def test_levy_routes_and_errors():
    model = zero_model()
    with pytest.raises(CapabilityError):
        levy_coefficient_eval(model, np.array([1.0]), 0, 0, route="analytic")
    with pytest.raises(CapabilityError):
        levy_coefficient_eval(model, np.array([1.0]), 0, 0, route="jacobian")
    with pytest.raises(ArgumentError):
        levy_coefficient_eval(model, np.array([1.0]), 1, 0)
    heston = heston32_dynamics(Heston32Params())
    with pytest.raises(DomainError):
        levy_coefficient_eval(heston, np.array([-1.0]), 0, 0)


def test_levy_jacobian_route_matches_analytic():
    model = heston32_dynamics(Heston32Params(beta=0.7))
    x = np.array([2.3])
    a = levy_coefficient_eval(model, x, 0, 0, route="analytic")
    j = levy_coefficient_eval(model, x, 0, 0, route="jacobian")
    assert j[0] == pytest.approx(a[0], rel=1e-14)


_MODELS = {
    "heston32": (heston32_dynamics(Heston32Params(beta=0.8)), (0.01, 10.0)),
    "ait-sahalia": (ait_sahalia_dynamics(AitSahaliaParams()), (0.01, 5.0)),
    "gbm": (gbm_dynamics(0.5, 0.5), (-10.0, 10.0)),
    "poly-stress": (polynomial_stress_dynamics(1.3), (-5.0, 5.0)),
}


@pytest.mark.parametrize("name", sorted(_MODELS))
def test_analytic_levy_matches_finite_differences(name, rng):
    model, (lo, hi) = _MODELS[name]
    for x in rng.uniform(lo, hi, 100):
        v = np.array([x])
        a = levy_coefficient_eval(model, v, 0, 0, route="analytic")[0]
        f = levy_coefficient_eval(model, v, 0, 0, route="fd")[0]
        assert abs(a - f) <= 1e-5 * max(abs(a), 1e-6), (x, a, f)


def test_levy_trace_sums_diagonal():
    model = polynomial_stress_dynamics(2.0)
    assert levy_trace(model, np.array([1.5]))[0] == pytest.approx(2 * 4.0 * 1.5 ** 3)


# --- step-size validation ----------------------------------------------------------

def test_validate_step_size_examples():
    params = SchemeParams(1.0, 1.0)
    c = AssumptionConstants(L2=2.0, nu=0.5)
    assert validate_step_size(params, c, 0.1).passed
    report = validate_step_size(params, c, 0.2)
    assert not report.passed
    assert report.violations == ["2*L2*h <= nu"]


def test_validate_step_size_model_bound():
    model = heston32_dynamics(Heston32Params(mu=2.0))
    params, c = SchemeParams(1.0, 1.0), AssumptionConstants()
    report = validate_step_size(params, c, 0.25, model.step_bounds)
    assert report.violations == ["h < 1/(2*mu)"]
    assert validate_step_size(params, c, 0.2499, model.step_bounds).passed


@settings(max_examples=200, deadline=None)
@given(L2=st.floats(0, 100), nu=st.floats(0.01, 0.99), h0=st.floats(1e-3, 10),
       h=st.floats(1e-6, 5), shrink=st.floats(0, 1))
def test_validate_step_size_monotone(L2, nu, h0, h, shrink):
    c = AssumptionConstants(L2=L2, nu=nu, h0=h0)
    bounds = heston32_dynamics(Heston32Params(mu=1.5)).step_bounds
    params = SchemeParams(0.5, 0.5)
    if validate_step_size(params, c, h, bounds).passed:
        assert validate_step_size(params, c, h * shrink, bounds).passed


def test_assumption_constants_ranges():
    with pytest.raises(ArgumentError):
        AssumptionConstants(q=2.0)
    with pytest.raises(ArgumentError):
        AssumptionConstants(nu=1.0)
    with pytest.raises(ArgumentError):
        AssumptionConstants(L3=-1.0)
    with pytest.raises(ArgumentError):
        AssumptionConstants(gamma=2.0, p_star=7.0)
    assert AssumptionConstants().nu == 0.5


def test_scheme_params_bounds():
    with pytest.raises(ArgumentError, match=r"\[0,1\]"):
        SchemeParams(1.5, 0.0)
    with pytest.raises(ArgumentError):
        SchemeParams(0.0, -0.1)
    with pytest.raises(ArgumentError):
        SchemeParams(1.0, 1.0, solver_tol=0.0)
    with pytest.raises(ArgumentError):
        SchemeParams(1.0, 1.0, bracket_expansion=1.0)
    assert SchemeParams(0.0, 0.0).is_explicit and not SchemeParams(0.0, 1.0).is_explicit


# --- commutativity -----------------------------------------------------------------

def _model_2d(diffusion):
    return ModelDynamics(name="2d", state_dim=2, noise_dim=2,
                         drift=lambda x: np.zeros(2), diffusion=diffusion)


def test_commutativity_scalar(rng):
    pts = [np.array([v]) for v in rng.uniform(0.1, 3, 20)]
    assert commutativity_check(heston32_dynamics(Heston32Params()), pts)


def test_commutativity_diagonal_noise(rng):
    s1, s2 = 0.3, 1.7
    model = _model_2d(lambda x: np.diag([s1 * x[0], s2 * x[1]]))
    pts = list(rng.uniform(-3, 3, (20, 2)))
    assert commutativity_check(model, pts)


def test_commutativity_fails_for_swapped_columns():
    model = _model_2d(lambda x: np.array([[x[1], 0.0], [0.0, x[0]]]))
    x = np.array([1.0, 1.0])
    # L^1 g_2 = (0, 1) while L^2 g_1 = (1, 0)
    assert np.allclose(levy_coefficient_eval(model, x, 0, 1), [0.0, 1.0])
    assert np.allclose(levy_coefficient_eval(model, x, 1, 0), [1.0, 0.0])
    assert not commutativity_check(model, [x])


def test_commutativity_empty_points():
    with pytest.raises(ArgumentError):
        commutativity_check(zero_model(), [])


# --- time grid ---------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(t_end=st.floats(1e-3, 1e3), steps=st.integers(1, 100000))
def test_time_grid_end(t_end, steps):
    nodes = TimeGrid(t_end, steps).nodes()
    assert abs(nodes[-1] - t_end) <= 4 * math.ulp(t_end)
    assert np.all(np.diff(nodes) > 0)


def test_time_grid_invalid():
    with pytest.raises(ArgumentError):
        TimeGrid(0.0, 4)
    with pytest.raises(ArgumentError):
        TimeGrid(1.0, 0)
