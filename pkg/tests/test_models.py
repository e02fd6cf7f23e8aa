import math

import numpy as np
import pytest

from sdeconv.core import commutativity_check, levy_coefficient_eval
from sdeconv.errors import ArgumentError
from sdeconv.models import (REGISTRY, AitSahaliaParams, GBMParams, Heston32Params,
                            ait_sahalia_dynamics, ait_sahalia_regime, build_model, gbm_dynamics,
                            gbm_exact_terminal, heston32_dynamics, heston32_validate, make_params,
                            model_param_names, polynomial_stress_dynamics)


def f(model, x):
    return model.drift(np.array([x]))[0]


def g(model, x):
    return model.diffusion(np.array([x]))[0, 0]


def gg(model, x):
    return levy_coefficient_eval(model, np.array([x]), 0, 0)[0]


def fd_gg(model, x, eps=1e-6):
    d = eps * max(1.0, abs(x))
    return (g(model, x + d) - g(model, x - d)) / (2 * d) * g(model, x)


def test_heston_coefficients():
    model = heston32_dynamics(Heston32Params(mu=2.0, alpha=2.5, beta=1.0))
    assert f(model, 1.0) == -0.5
    assert g(model, 4.0) == 8.0
    assert gg(model, 2.0) == pytest.approx(6.0, rel=1e-15)
    assert gg(model, 2.0) == pytest.approx(fd_gg(model, 2.0), rel=1e-8)
    assert model.positive_domain and model.commutative
    assert not model.domain(np.array([0.0]))


def test_heston_params_positive():
    with pytest.raises(ArgumentError):
        Heston32Params(beta=0.0)
    with pytest.raises(ArgumentError):
        Heston32Params(x0=-1.0)


def test_heston_validate_gates():
    assert heston32_validate(Heston32Params(2.0, 2.5, 1.0), 2 ** -4).passed
    r = heston32_validate(Heston32Params(alpha=1.4, beta=1.0), 2 ** -4)
    assert "alpha > 1.5*beta^2" in r.violations
    r = heston32_validate(Heston32Params(alpha=2.0, beta=1.0), 2 ** -4)
    assert r["alpha > 1.5*beta^2"].passed
    assert r.violations == ["alpha >= 2.5*beta^2"]
    assert heston32_validate(Heston32Params(mu=2.0), 0.25).violations == ["h < 1/(2*mu)"]


def test_ait_sahalia_coefficients():
    p = AitSahaliaParams.case_i()
    model = ait_sahalia_dynamics(p)
    assert f(model, 1.0) == pytest.approx(-0.5, abs=1e-15)
    assert g(model, 1.0) == 1.0
    assert gg(model, 1.0) == 2.0
    assert gg(model, 1.0) == pytest.approx(fd_gg(model, 1.0), rel=1e-8)
    assert (p.kappa, p.rho, p.alpha_m1, p.alpha_0, p.alpha_1, p.alpha_2, p.sigma) == \
        (4.0, 2.0, 1.5, 2.0, 1.0, 1.0, 1.0)


def test_ait_sahalia_params_constraints():
    with pytest.raises(ArgumentError):
        AitSahaliaParams(kappa=1.0)
    with pytest.raises(ArgumentError):
        AitSahaliaParams(sigma=0.0)


def test_regime_case_i():
    r = ait_sahalia_regime(AitSahaliaParams.case_i(), 0.25)
    assert r.regime == "Standard" and r.rate_theorem_satisfied
    assert not ait_sahalia_regime(AitSahaliaParams.case_i(), 0.5).rate_theorem_satisfied


def test_regime_case_ii():
    p = AitSahaliaParams.case_ii()
    assert (p.kappa, p.rho, p.alpha_2, p.sigma) == (3.0, 2.0, 4.5, 1.0)
    r = ait_sahalia_regime(p, 2 ** -4)
    assert r.regime == "Critical" and r.rate_theorem_satisfied
    names = [c.name for c in r.checks]
    assert "alpha_2/sigma^2 >= 2*kappa - 3/2" in names
    assert "alpha_2/sigma^2 > (kappa+1)/(2*sqrt(2))" in names


def test_regime_critical_ratio_gate_fails():
    r = ait_sahalia_regime(AitSahaliaParams(kappa=3.0, rho=2.0, alpha_2=4.0), 2 ** -4)
    assert r.regime == "Critical" and not r.rate_theorem_satisfied
    assert r.violated_conditions == ("alpha_2/sigma^2 >= 2*kappa - 3/2",)


def test_regime_unsupported():
    r = ait_sahalia_regime(AitSahaliaParams(kappa=2.0, rho=2.0), 0.1)
    assert r.regime == "Unsupported" and not r.rate_theorem_satisfied


@pytest.mark.parametrize("delta,regime", [(1e-9, "Standard"), (-1e-9, "Unsupported"), (0.0, "Critical")])
def test_regime_perturbation(delta, regime):
    p = AitSahaliaParams(kappa=3.0 + delta, rho=2.0, alpha_2=4.5)
    assert ait_sahalia_regime(p, 2 ** -4).regime == regime


def test_regime_exact_on_binary_rationals():
    # 0.1 + 0.2 style rounding must not produce a spurious critical case
    p = AitSahaliaParams(kappa=2.0 * 1.1 - 1.0, rho=1.1)
    gap = (p.kappa + 1.0) - 2.0 * p.rho
    assert ait_sahalia_regime(p, 0.1).regime == ("Critical" if gap == 0 else
                                                 "Standard" if gap > 0 else "Unsupported")


def test_gbm_exact_terminal():
    assert gbm_exact_terminal(2.0, 0.3, 0.0, 1.5, 0.7) == pytest.approx(2.0 * math.exp(0.45))
    assert gbm_exact_terminal(1.0, 0.5, 0.4, 2.0, 0.0) == pytest.approx(math.exp((0.5 - 0.08) * 2))
    w = np.array([-1.0, 0.0, 1.0])
    assert gbm_exact_terminal(1.0, 0.1, 0.2, 1.0, w).shape == (3,)
    with pytest.raises(ArgumentError):
        gbm_dynamics(sigma=-0.1)
    with pytest.raises(ArgumentError):
        GBMParams(sigma=-1.0)


def test_gbm_whole_line():
    model = gbm_dynamics(0.5, 0.5, -2.0)
    assert model.domain(np.array([-3.0])) and not model.positive_domain
    assert model.initial_state()[0] == -2.0


def test_polynomial_stress():
    model = polynomial_stress_dynamics(1.0)
    assert f(model, 1.0) == -1.0
    assert g(model, 2.0) == 4.0
    assert gg(model, 1.0) == 2.0
    for x in (-10.0, 10.0):
        assert x * f(model, x) <= 1.0 * (1 + x * x)
    assert model.domain(np.array([-5.0]))


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_registry_models_commute_and_match_fd(name, rng):
    model = build_model(name)
    lo, hi = (0.05, 4.0) if model.positive_domain else (-4.0, 4.0)
    pts = [np.array([v]) for v in rng.uniform(lo, hi, 100)]
    assert commutativity_check(model, pts)
    for x in pts:
        a = gg(model, x[0])
        assert abs(a - fd_gg(model, x[0])) <= 1e-5 * max(abs(a), 1e-6)


def test_registry_names_and_params():
    assert set(REGISTRY) == {"heston32", "ait-sahalia", "gbm", "poly-stress"}
    assert model_param_names("heston32") == ("mu", "alpha", "beta", "x0")
    assert make_params("gbm", mu=0.1).mu == 0.1
    assert build_model("heston32").x0 == (1.0,)
    assert build_model("ait-sahalia").x0 == (1.0,)
    with pytest.raises(ArgumentError):
        build_model("cir")
    with pytest.raises(ArgumentError):
        make_params("cir")
