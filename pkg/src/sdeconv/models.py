"""Concrete scalar models with analytic coefficients and parameter gates."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import accel
from .core import Check, ModelDynamics, StepBound, ValidationReport, positive_orthant
from .errors import ArgumentError


def _scalar(fn: Callable[[float], float]):
    return lambda x: np.array([fn(x[0])])


def _matrix(fn: Callable[[float], float]):
    return lambda x, *_: np.array([[fn(x[0])]])


@dataclass(frozen=True)
class Heston32Params:
    mu: float = 2.0
    alpha: float = 2.5
    beta: float = 1.0
    x0: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v > 0 and math.isfinite(v)):
                raise ArgumentError(f"3/2 model parameter {k}={v} must be positive")


@dataclass(frozen=True)
class AitSahaliaParams:
    alpha_m1: float = 1.5
    alpha_0: float = 2.0
    alpha_1: float = 1.0
    alpha_2: float = 1.0
    sigma: float = 1.0
    kappa: float = 4.0
    rho: float = 2.0
    x0: float = 1.0

    def __post_init__(self):
        for k in ("alpha_m1", "alpha_0", "alpha_1", "alpha_2", "sigma", "x0"):
            v = getattr(self, k)
            if not (v > 0 and math.isfinite(v)):
                raise ArgumentError(f"Ait-Sahalia parameter {k}={v} must be positive")
        for k in ("kappa", "rho"):
            v = getattr(self, k)
            if not (v > 1 and math.isfinite(v)):
                raise ArgumentError(f"Ait-Sahalia parameter {k}={v} must exceed 1")

    @classmethod
    def case_i(cls) -> "AitSahaliaParams":
        """Standard regime: kappa + 1 > 2 rho."""
        return cls()

    @classmethod
    def case_ii(cls) -> "AitSahaliaParams":
        """Critical regime: kappa + 1 = 2 rho."""
        return cls(alpha_2=4.5, kappa=3.0)


@dataclass(frozen=True)
class GBMParams:
    mu: float = 0.5
    sigma: float = 0.5
    x0: float = 1.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ArgumentError("GBM sigma must be nonnegative")


@dataclass(frozen=True)
class PolyStressParams:
    sigma: float = 1.0
    x0: float = 1.0


def heston32_dynamics(p: Heston32Params) -> ModelDynamics:
    """``dX = X(mu - alpha X) dt + beta X^{3/2} dW`` on ``(0, inf)``."""
    mu, alpha, beta = p.mu, p.alpha, p.beta
    return ModelDynamics(
        name="heston32", state_dim=1, noise_dim=1,
        drift=_scalar(lambda x: x * (mu - alpha * x)),
        diffusion=_matrix(lambda x: beta * x ** 1.5),
        levy=lambda x, j1, j2: np.array([1.5 * beta * beta * x[0] ** 2]),
        drift_jacobian=_matrix(lambda x: mu - 2.0 * alpha * x),
        diffusion_jacobian=_matrix(lambda x: 1.5 * beta * x ** 0.5),
        levy_trace_jacobian=_matrix(lambda x: 3.0 * beta * beta * x),
        domain=positive_orthant, positive_domain=True, commutative=True,
        step_bounds=(StepBound("h < 1/(2*mu)", 1.0 / (2.0 * mu)),),
        kernel=(accel.HESTON32, (mu, alpha, beta)),
        x0=(p.x0,),
    )


def heston32_validate(p: Heston32Params, h: float) -> ValidationReport:
    """Assumption, rate and stepsize gates of the 3/2 model."""
    b2 = p.beta * p.beta
    return ValidationReport((
        Check("alpha > 1.5*beta^2", p.alpha > 1.5 * b2, f"alpha={p.alpha}, 1.5*beta^2={1.5 * b2}"),
        Check("alpha >= 2.5*beta^2", p.alpha >= 2.5 * b2, f"alpha={p.alpha}, 2.5*beta^2={2.5 * b2}"),
        Check("h < 1/(2*mu)", h < 1.0 / (2.0 * p.mu), f"h={h}, 1/(2*mu)={1.0 / (2.0 * p.mu)}"),
    ))


def ait_sahalia_dynamics(p: AitSahaliaParams) -> ModelDynamics:
    """``dX = (a_{-1}/X - a_0 + a_1 X - a_2 X^kappa) dt + sigma X^rho dW`` on ``(0, inf)``."""
    am1, a0, a1, a2, s, kap, rho = (p.alpha_m1, p.alpha_0, p.alpha_1, p.alpha_2,
                                    p.sigma, p.kappa, p.rho)
    return ModelDynamics(
        name="ait-sahalia", state_dim=1, noise_dim=1,
        drift=_scalar(lambda x: am1 / x - a0 + a1 * x - a2 * x ** kap),
        diffusion=_matrix(lambda x: s * x ** rho),
        levy=lambda x, j1, j2: np.array([rho * s * s * x[0] ** (2.0 * rho - 1.0)]),
        drift_jacobian=_matrix(lambda x: -am1 / (x * x) + a1 - a2 * kap * x ** (kap - 1.0)),
        diffusion_jacobian=_matrix(lambda x: rho * s * x ** (rho - 1.0)),
        levy_trace_jacobian=_matrix(
            lambda x: rho * (2.0 * rho - 1.0) * s * s * x ** (2.0 * rho - 2.0)),
        domain=positive_orthant, positive_domain=True, commutative=True,
        step_bounds=(StepBound("h <= 1/alpha_1", 1.0 / a1, strict=False),
                     StepBound("h < 1/(2*alpha_1)", 1.0 / (2.0 * a1))),
        kernel=(accel.AIT_SAHALIA, (am1, a0, a1, a2, s, kap, rho)),
        x0=(p.x0,),
    )


@dataclass(frozen=True)
class RegimeReport:
    regime: str
    rate_theorem_satisfied: bool
    violated_conditions: tuple[str, ...] = ()
    checks: tuple[Check, ...] = field(default_factory=tuple)


def ait_sahalia_regime(p: AitSahaliaParams, h: float) -> RegimeReport:
    """Classify the parameters as Standard, Critical or Unsupported.

    ``kappa + 1 - 2 rho`` is compared against zero exactly, on the binary
    rationals the floats represent, so a critical configuration must be
    entered with values whose difference is exactly zero.
    """
    gap = Fraction(p.kappa) + 1 - 2 * Fraction(p.rho)
    ratio = p.alpha_2 / (p.sigma * p.sigma)
    checks = [
        Check("h <= 1/alpha_1", h <= 1.0 / p.alpha_1, f"h={h}, 1/alpha_1={1.0 / p.alpha_1}"),
        Check("h < 1/(2*alpha_1)", h < 0.5 / p.alpha_1, f"h={h}, 1/(2*alpha_1)={0.5 / p.alpha_1}"),
    ]
    if gap > 0:
        regime = "Standard"
        checks.append(Check("kappa + 1 > 2*rho", True, f"kappa+1-2rho={float(gap)}"))
    elif gap == 0:
        regime = "Critical"
        checks.append(Check("kappa + 1 = 2*rho", True))
        bound1 = 2.0 * p.kappa - 1.5
        bound2 = (p.kappa + 1.0) / (2.0 * math.sqrt(2.0))
        checks.append(Check("alpha_2/sigma^2 >= 2*kappa - 3/2", ratio >= bound1,
                            f"{ratio} vs {bound1}"))
        checks.append(Check("alpha_2/sigma^2 > (kappa+1)/(2*sqrt(2))", ratio > bound2,
                            f"{ratio} vs {bound2}"))
    else:
        regime = "Unsupported"
        checks.append(Check("kappa + 1 >= 2*rho", False, f"kappa+1-2rho={float(gap)}"))
    violated = tuple(c.name for c in checks if not c.passed)
    return RegimeReport(regime, not violated, violated, tuple(checks))


def gbm_dynamics(mu: float = 0.5, sigma: float = 0.5, x0: float = 1.0) -> ModelDynamics:
    """Geometric Brownian motion on the whole line (exact solution known)."""
    if not sigma >= 0:
        raise ArgumentError("GBM sigma must be nonnegative")
    return ModelDynamics(
        name="gbm", state_dim=1, noise_dim=1,
        drift=_scalar(lambda x: mu * x),
        diffusion=_matrix(lambda x: sigma * x),
        levy=lambda x, j1, j2: np.array([sigma * sigma * x[0]]),
        drift_jacobian=_matrix(lambda x: mu),
        diffusion_jacobian=_matrix(lambda x: sigma),
        levy_trace_jacobian=_matrix(lambda x: sigma * sigma),
        commutative=True,
        kernel=(accel.GBM, (mu, sigma)),
        x0=(x0,),
    )


def gbm_exact_terminal(x0, mu: float, sigma: float, t: float, w_t):
    """``x0 exp((mu - sigma^2/2) t + sigma W_t)``; vectorised over ``w_t``."""
    return x0 * np.exp((mu - 0.5 * sigma * sigma) * t + sigma * np.asarray(w_t))


def polynomial_stress_dynamics(sigma: float = 1.0, x0: float = 1.0) -> ModelDynamics:
    """``dX = -X^5 dt + sigma X^2 dW``: superlinear drift and diffusion on the whole line."""
    s2 = sigma * sigma
    return ModelDynamics(
        name="poly-stress", state_dim=1, noise_dim=1,
        drift=_scalar(lambda x: -x ** 5),
        diffusion=_matrix(lambda x: sigma * x * x),
        levy=lambda x, j1, j2: np.array([2.0 * s2 * x[0] ** 3]),
        drift_jacobian=_matrix(lambda x: -5.0 * x ** 4),
        diffusion_jacobian=_matrix(lambda x: 2.0 * sigma * x),
        levy_trace_jacobian=_matrix(lambda x: 6.0 * s2 * x * x),
        commutative=True,
        kernel=(accel.POLY_STRESS, (sigma,)),
        x0=(x0,),
    )


def _validate_none(p, h: float) -> ValidationReport:
    return ValidationReport(())


def _validate_ait_sahalia(p: AitSahaliaParams, h: float) -> ValidationReport:
    return ValidationReport(ait_sahalia_regime(p, h).checks)


@dataclass(frozen=True)
class ModelEntry:
    params_type: type
    build: Callable
    validate: Callable[..., ValidationReport]
    # gates whose failure makes the scheme ill-defined, not merely outside a theorem
    hard_gates: tuple[str, ...] = ()


REGISTRY: dict[str, ModelEntry] = {
    "heston32": ModelEntry(Heston32Params, heston32_dynamics, heston32_validate),
    "ait-sahalia": ModelEntry(AitSahaliaParams, ait_sahalia_dynamics, _validate_ait_sahalia,
                              hard_gates=("h <= 1/alpha_1",)),
    "gbm": ModelEntry(GBMParams, lambda p: gbm_dynamics(p.mu, p.sigma, p.x0), _validate_none),
    "poly-stress": ModelEntry(PolyStressParams,
                              lambda p: polynomial_stress_dynamics(p.sigma, p.x0), _validate_none),
}


def model_param_names(name: str) -> tuple[str, ...]:
    return tuple(REGISTRY[name].params_type.__dataclass_fields__)


def make_params(name: str, **values):
    if name not in REGISTRY:
        raise ArgumentError(f"unknown model {name!r}; choose from {sorted(REGISTRY)}")
    return REGISTRY[name].params_type(**values)


def build_model(name: str, params=None) -> ModelDynamics:
    if name not in REGISTRY:
        raise ArgumentError(f"unknown model {name!r}; choose from {sorted(REGISTRY)}")
    entry = REGISTRY[name]
    return entry.build(params if params is not None else entry.params_type())
