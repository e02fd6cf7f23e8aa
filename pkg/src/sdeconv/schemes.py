"""One-step kernels of the (theta, eta) double implicit Milstein family.

A step of the family reads::

    Y1 = Y0 + theta f(Y1) h + (1 - theta) f(Y0) h + g(Y0) dW
         + sum_{j1,j2} L^{j1} g_{j2}(Y0) I[j1, j2]
         + eta/2 h sum_j L^j g_j(Y0) - eta/2 h sum_j L^j g_j(Y1)

``eta = 0`` gives the theta-Milstein method, ``theta = eta = 0`` the explicit
Milstein method.  Everything that does not involve ``Y1`` is collected by
:func:`assemble_explicit_part`; :func:`implicit_step` then solves for ``Y1``.

These functions work on single states and are the reference the compiled
Monte Carlo kernels in :mod:`sdeconv.accel` are tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .core import (ModelDynamics, SchemeParams, drift_jacobian, levy_coefficient_eval,
                   levy_trace, levy_trace_jacobian)
from .errors import ArgumentError, DomainError, DomainEscapeError, SolveError
from .noise import iterated_integrals_commutative

MAX_EXPANSIONS = 200
MAX_BISECTIONS = 2000
FIXED_POINT_DAMPING = 0.5


@dataclass(frozen=True)
class StepContext:
    """Inputs of one step: state, stepsize, increments, iterated integrals."""

    x_n: np.ndarray
    h: float
    dW: np.ndarray
    integrals: np.ndarray

    @classmethod
    def commutative(cls, x_n, h: float, dW) -> "StepContext":
        """Context whose integrals come from the increment products alone."""
        dW = np.atleast_1d(np.asarray(dW, dtype=float))
        return cls(np.atleast_1d(np.asarray(x_n, dtype=float)), float(h), dW,
                   iterated_integrals_commutative(dW, h))

    def check(self, model: ModelDynamics) -> np.ndarray:
        if not self.h > 0:
            raise ArgumentError("h must be positive")
        m = model.noise_dim
        if self.dW.shape != (m,) or self.integrals.shape != (m, m):
            raise ArgumentError(
                f"increments {self.dW.shape} / integrals {self.integrals.shape} do not match m={m}")
        return model.check_state(self.x_n)


@dataclass(frozen=True)
class ImplicitSolveReport:
    iterations: int
    final_residual: float
    method: str
    bracket: Optional[tuple[float, float]] = None
    converged: bool = True


def _explicit_report() -> ImplicitSolveReport:
    return ImplicitSolveReport(0, 0.0, "closed_form")


def assemble_explicit_part(model: ModelDynamics, params: SchemeParams, ctx: StepContext) -> np.ndarray:
    """All terms of the step that depend on ``Y_n`` only."""
    x = ctx.check(model)
    h = ctx.h
    out = x + (1.0 - params.theta) * np.asarray(model.drift(x), dtype=float) * h
    out = out + np.asarray(model.diffusion(x), dtype=float) @ ctx.dW
    m = model.noise_dim
    for j1 in range(m):
        for j2 in range(m):
            out = out + levy_coefficient_eval(model, x, j1, j2) * ctx.integrals[j1, j2]
    if params.eta != 0.0:
        out = out + 0.5 * params.eta * h * levy_trace(model, x)
    return out


def assemble_explicit_part_commutative(model: ModelDynamics, params: SchemeParams,
                                       x_n, h: float, dW) -> np.ndarray:
    """Explicit part written with increment products, valid for commutative noise.

    Equal to :func:`assemble_explicit_part` with commutative iterated integrals
    whenever ``L^{j1} g_{j2} = L^{j2} g_{j1}``.
    """
    x = model.check_state(x_n)
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    out = x + (1.0 - params.theta) * np.asarray(model.drift(x), dtype=float) * h
    out = out + np.asarray(model.diffusion(x), dtype=float) @ dW
    m = model.noise_dim
    for j1 in range(m):
        for j2 in range(m):
            out = out + 0.5 * levy_coefficient_eval(model, x, j1, j2) * (dW[j1] * dW[j2])
    out = out - 0.5 * (1.0 - params.eta) * h * levy_trace(model, x)
    return out


def _scaled(r: float, y: float) -> float:
    return abs(r) / (1.0 + abs(y))


def solve_scalar_monotone(residual_fn: Callable[[float], float], predictor: float,
                          params: SchemeParams,
                          derivative: Optional[Callable[[float], float]] = None,
                          lower: Optional[float] = None) -> tuple[float, ImplicitSolveReport]:
    """Root of a strictly increasing scalar function.

    Newton's method starts at ``predictor``.  If an iterate is non-finite,
    leaves ``(lower, inf)``, or Newton stalls, a bracket is grown
    geometrically from the predictor by ``params.bracket_expansion`` until the
    residual changes sign, and bisection finishes the job.  The returned root
    satisfies ``|residual| <= solver_tol * (1 + |root|)``.

    ``lower`` is an exclusive lower bound of the admissible domain (0 for
    positive models); ``None`` means the whole real line.  Without
    ``derivative`` a central difference is used.
    """
    tol = params.solver_tol
    raw_residual, raw_derivative = residual_fn, derivative

    def residual_fn(y: float) -> float:
        with np.errstate(all="ignore"):
            try:
                return float(raw_residual(np.float64(y)))
            except OverflowError:
                return math.inf if y > 0 else -math.inf

    def admissible(y: float) -> bool:
        return math.isfinite(y) and (lower is None or y > lower)

    def deriv(y: float) -> float:
        if raw_derivative is not None:
            with np.errstate(all="ignore"):
                try:
                    return float(raw_derivative(np.float64(y)))
                except OverflowError:
                    return math.nan
        dy = 1e-7 * max(1.0, abs(y))
        if lower is not None and y - dy <= lower:
            dy = 0.5 * (y - lower)
        return (residual_fn(y + dy) - residual_fn(y - dy)) / (2.0 * dy)

    def polish(y: float, r: float) -> tuple[float, float]:
        d = deriv(y)
        if d > 0 and math.isfinite(d):
            y2 = y - r / d
            if admissible(y2):
                r2 = residual_fn(y2)
                if math.isfinite(r2) and abs(r2) <= abs(r):
                    return y2, r2
        return y, r

    iterations = 0
    y = float(predictor)
    tried_newton = False
    if admissible(y):
        tried_newton = True
        for _ in range(params.max_newton_iters):
            r = residual_fn(y)
            if not math.isfinite(r):
                break
            if _scaled(r, y) <= tol:
                y, r = polish(y, r)
                return y, ImplicitSolveReport(iterations, abs(r), "newton")
            d = deriv(y)
            if not (d > 0 and math.isfinite(d)):
                break
            y_next = y - r / d
            iterations += 1
            if not admissible(y_next):
                break
            y = y_next

    # Bracket from the predictor, or from a neutral point when it is unusable.
    c = float(predictor)
    if not admissible(c):
        c = 1.0 if lower is None else (lower + max(1.0, abs(lower)))
    rc = residual_fn(c)
    if not math.isfinite(rc):
        raise SolveError(f"residual is not finite at bracket centre {c}",
                         ImplicitSolveReport(iterations, math.inf, "bisection", None, False))
    grow = params.bracket_expansion
    lo = hi = c
    r_lo = r_hi = rc
    step = max(1.0, abs(c))
    found = rc == 0.0
    for _ in range(MAX_EXPANSIONS):
        if found:
            break
        if rc < 0:
            lo, r_lo = hi, r_hi
            hi = hi * grow if (lower is not None and lower == 0.0 and hi > 0) else hi + step
            step *= grow
            r_hi = residual_fn(hi)
            found = r_hi >= 0
        else:
            hi, r_hi = lo, r_lo
            if lower is not None:
                lo = lower + (lo - lower) / grow
            else:
                lo = lo - step
                step *= grow
            r_lo = residual_fn(lo)
            found = r_lo <= 0
    if not found:
        raise SolveError("no sign change found while expanding the bracket",
                         ImplicitSolveReport(iterations, abs(rc), "bisection", (lo, hi), False))
    method = "newton_then_bisection" if tried_newton else "bisection"
    bracket = (lo, hi)
    if r_lo == 0.0:
        return lo, ImplicitSolveReport(iterations, 0.0, method, bracket)
    if r_hi == 0.0:
        return hi, ImplicitSolveReport(iterations, 0.0, method, bracket)
    best, r_best = (lo, r_lo) if abs(r_lo) < abs(r_hi) else (hi, r_hi)
    for _ in range(MAX_BISECTIONS):
        if _scaled(r_best, best) <= tol:
            break
        mid = 0.5 * (lo + hi)
        if not (lo < mid < hi):
            break
        r_mid = residual_fn(mid)
        iterations += 1
        if r_mid < 0:
            lo, r_lo = mid, r_mid
        else:
            hi, r_hi = mid, r_mid
        if abs(r_mid) < abs(r_best):
            best, r_best = mid, r_mid
    best, r_best = polish(best, r_best)
    if not _scaled(r_best, best) <= tol:
        raise SolveError(f"bisection stalled with residual {abs(r_best):.3e}",
                         ImplicitSolveReport(iterations, abs(r_best), method, bracket, False))
    return best, ImplicitSolveReport(iterations, abs(r_best), method, bracket)


def _implicit_residual(model: ModelDynamics, theta: float, eta: float, h: float, explicit):
    def residual(y: np.ndarray) -> np.ndarray:
        r = y - explicit
        if theta != 0.0:
            r = r - theta * h * np.asarray(model.drift(y), dtype=float)
        if eta != 0.0:
            r = r + 0.5 * eta * h * levy_trace(model, y)
        return r
    return residual


def _solve_implicit(model: ModelDynamics, params: SchemeParams, h: float, explicit: np.ndarray,
                    predictor: np.ndarray, solver: str) -> tuple[np.ndarray, ImplicitSolveReport]:
    theta, eta = params.theta, params.eta
    residual = _implicit_residual(model, theta, eta, h, explicit)
    if solver == "auto":
        solver = "monotone" if model.state_dim == 1 else "newton"

    if solver == "monotone":
        if model.state_dim != 1:
            raise ArgumentError("the monotone solver handles scalar models only")

        def r1(y: float) -> float:
            with np.errstate(all="ignore"):
                return float(residual(np.array([y]))[0])

        def dr1(y: float) -> float:
            yv = np.array([y])
            with np.errstate(all="ignore"):
                d = 1.0
                if theta != 0.0:
                    d -= theta * h * float(drift_jacobian(model, yv)[0, 0])
                if eta != 0.0:
                    d += 0.5 * eta * h * float(levy_trace_jacobian(model, yv)[0, 0])
            return d

        lower = 0.0 if model.positive_domain else None
        root, report = solve_scalar_monotone(r1, float(predictor[0]), params, dr1, lower)
        y = np.array([root])
        if not model.domain(y):
            raise DomainEscapeError(f"solver returned {root!r} outside the domain", report)
        return y, report

    tol = params.solver_tol
    y = np.array(predictor, dtype=float)
    use_newton = solver == "newton" and model.drift_jacobian is not None
    if solver not in ("newton", "fixed_point"):
        raise ArgumentError(f"unknown solver {solver!r}")
    limit = params.max_newton_iters if use_newton else 20 * params.max_newton_iters
    method = "newton" if use_newton else "fixed_point"
    r = residual(y)
    for it in range(limit + 1):
        res = float(np.linalg.norm(r))
        if not math.isfinite(res):
            break
        if res <= tol * (1.0 + float(np.linalg.norm(y))):
            if not model.domain(y):
                raise DomainEscapeError(f"implicit solve left the domain at {y!r}",
                                        ImplicitSolveReport(it, res, method))
            return y, ImplicitSolveReport(it, res, method)
        if it == limit:
            break
        if use_newton:
            jac = np.eye(model.state_dim)
            if theta != 0.0:
                jac = jac - theta * h * drift_jacobian(model, y)
            if eta != 0.0:
                jac = jac + 0.5 * eta * h * levy_trace_jacobian(model, y)
            try:
                y = y - np.linalg.solve(jac, r)
            except np.linalg.LinAlgError:
                break
        else:
            y = y - FIXED_POINT_DAMPING * r
        if not model.domain(y):
            raise DomainEscapeError(f"implicit iterate left the domain at {y!r}",
                                    ImplicitSolveReport(it + 1, res, method, None, False))
        r = residual(y)
    raise SolveError("implicit solve did not converge",
                     ImplicitSolveReport(limit, float(np.linalg.norm(r)), method, None, False))


def implicit_step(model: ModelDynamics, params: SchemeParams, ctx: StepContext,
                  solver: str = "auto") -> tuple[np.ndarray, ImplicitSolveReport]:
    """Advance one step of the (theta, eta) family.

    ``solver`` is ``"auto"`` (the bracketing ``"monotone"`` solver for scalar
    models, ``"newton"`` otherwise), ``"monotone"``, ``"newton"`` or
    ``"fixed_point"``.  Newton falls back to damped fixed-point iteration when
    the model has no drift Jacobian.
    """
    explicit = assemble_explicit_part(model, params, ctx)
    if params.is_explicit:
        if not model.domain(explicit) or not np.all(np.isfinite(explicit)):
            raise DomainEscapeError(f"explicit step left the domain at {explicit!r}",
                                    _explicit_report())
        return explicit, _explicit_report()
    x = ctx.x_n
    predictor = explicit + params.theta * ctx.h * np.asarray(model.drift(x), dtype=float)
    if params.eta != 0.0:
        predictor = predictor - 0.5 * params.eta * ctx.h * levy_trace(model, x)
    return _solve_implicit(model, params, ctx.h, explicit, predictor, solver)


def step_theta_milstein(model: ModelDynamics, params: SchemeParams, ctx: StepContext,
                        solver: str = "auto") -> np.ndarray:
    """theta-Milstein step: :func:`implicit_step` with ``eta`` forced to 0."""
    return implicit_step(model, replace(params, eta=0.0), ctx, solver)[0]


def _scalar_coeffs(model: ModelDynamics, y: float) -> tuple[float, float, float]:
    v = np.array([y])
    return (float(model.drift(v)[0]), float(np.asarray(model.diffusion(v))[0, 0]),
            float(levy_coefficient_eval(model, v, 0, 0)[0]))


def step_scalar_ddim(model: ModelDynamics, params: SchemeParams, ctx: StepContext) -> np.ndarray:
    """The family written out for ``d = m = 1`` with ``g'g`` terms."""
    if model.state_dim != 1 or model.noise_dim != 1:
        raise ArgumentError("step_scalar_ddim needs d = m = 1")
    x = float(ctx.check(model)[0])
    h = ctx.h
    dw = float(ctx.dW[0])
    theta, eta = params.theta, params.eta
    f0, g0, gg0 = _scalar_coeffs(model, x)
    explicit = (x + (1.0 - theta) * f0 * h + g0 * dw + 0.5 * gg0 * dw * dw
                - 0.5 * (1.0 - eta) * gg0 * h)
    if params.is_explicit:
        y = np.array([explicit])
        if not (math.isfinite(explicit) and model.domain(y)):
            raise DomainEscapeError(f"explicit step left the domain at {explicit!r}")
        return y
    predictor = explicit + theta * f0 * h - 0.5 * eta * gg0 * h

    def residual(y: float) -> float:
        with np.errstate(all="ignore"):
            f1, _, gg1 = _scalar_coeffs(model, y)
        return y - theta * h * f1 + 0.5 * eta * h * gg1 - explicit

    def derivative(y: float) -> float:
        v = np.array([y])
        with np.errstate(all="ignore"):
            d = 1.0 - theta * h * float(drift_jacobian(model, v)[0, 0])
            if eta != 0.0:
                d += 0.5 * eta * h * float(levy_trace_jacobian(model, v)[0, 0])
        return d

    lower = 0.0 if model.positive_domain else None
    root, _ = solve_scalar_monotone(residual, predictor, params, derivative, lower)
    return np.array([root])


def step_euler_maruyama(model: ModelDynamics, ctx: StepContext) -> np.ndarray:
    x = ctx.check(model)
    y = (x + np.asarray(model.drift(x), dtype=float) * ctx.h
         + np.asarray(model.diffusion(x), dtype=float) @ ctx.dW)
    if not (np.all(np.isfinite(y)) and model.domain(y)):
        raise DomainEscapeError(f"Euler-Maruyama step left the domain at {y!r}")
    return y


def step_backward_euler(model: ModelDynamics, params: SchemeParams, ctx: StepContext,
                        solver: str = "auto") -> np.ndarray:
    """Drift-implicit Euler: theta = 1 with every Milstein correction dropped."""
    x = ctx.check(model)
    explicit = x + np.asarray(model.diffusion(x), dtype=float) @ ctx.dW
    be = replace(params, theta=1.0, eta=0.0)
    predictor = explicit + ctx.h * np.asarray(model.drift(x), dtype=float)
    return _solve_implicit(model, be, ctx.h, explicit, predictor, solver)[0]


def heston32_residual(p, x: float, h: float, dw: float, y: float) -> float:
    """Residual of the theta = eta = 1 step for the 3/2 model at candidate ``y``."""
    c = 0.75 * p.beta * p.beta
    return (y - x - h * y * (p.mu - p.alpha * y) - p.beta * x ** 1.5 * dw
            - c * x * x * dw * dw + c * y * y * h)


def heston32_closed_form_step(p, x: float, h: float, dw: float) -> tuple[float, ImplicitSolveReport]:
    """Positive root of ``(alpha + 3/4 beta^2) h y^2 + (1 - mu h) y - B = 0``.

    ``p`` carries ``mu``, ``alpha`` and ``beta``.  When ``1 - mu h > 0`` the
    root is taken as ``2B / (b + sqrt(b^2 + 4aB))``, which does not cancel for
    small ``h B``.
    """
    if not x > 0:
        raise DomainError(f"3/2 model state must be positive, got {x}")
    if not h > 0:
        raise ArgumentError("h must be positive")
    c = 0.75 * p.beta * p.beta
    big_b = x + p.beta * x ** 1.5 * dw + c * x * x * dw * dw
    a = (p.alpha + c) * h
    b = 1.0 - p.mu * h
    disc = math.sqrt(b * b + 4.0 * a * big_b)
    if b > 0:
        y = 2.0 * big_b / (b + disc)
    else:
        y = (disc - b) / (2.0 * a)
    return y, ImplicitSolveReport(0, abs(heston32_residual(p, x, h, dw, y)), "closed_form")


def ait_sahalia_rhs(p, x: float, h: float, dw: float) -> float:
    return (x + p.sigma * x ** p.rho * dw
            + 0.5 * p.rho * p.sigma * p.sigma * x ** (2.0 * p.rho - 1.0) * (dw * dw - h))


def ait_sahalia_drift(p, y: float) -> float:
    return p.alpha_m1 / y - p.alpha_0 + p.alpha_1 * y - p.alpha_2 * y ** p.kappa


def ait_sahalia_residual(p, x: float, h: float, dw: float, y: float) -> float:
    return y - h * ait_sahalia_drift(p, y) - ait_sahalia_rhs(p, x, h, dw)


def ait_sahalia_implicit_step(p, x: float, h: float, dw: float,
                              params: Optional[SchemeParams] = None) -> tuple[float, ImplicitSolveReport]:
    """Semi-implicit (theta = 1, eta = 0) Milstein step of the Ait-Sahalia model.

    The residual is strictly increasing on ``(0, inf)`` for ``h <= 1/alpha_1``
    and runs from ``-inf`` to ``+inf``, so a positive root exists for every
    increment.
    """
    if not x > 0:
        raise ArgumentError(f"Ait-Sahalia state must be positive, got {x}")
    if not (0 < h <= 1.0 / p.alpha_1):
        raise ArgumentError(f"h={h} outside (0, 1/alpha_1]")
    params = params or SchemeParams(1.0, 0.0)
    rhs = ait_sahalia_rhs(p, x, h, dw)

    def residual(y: float) -> float:
        return y - h * ait_sahalia_drift(p, y) - rhs

    def derivative(y: float) -> float:
        return 1.0 - h * (-p.alpha_m1 / (y * y) + p.alpha_1
                          - p.alpha_2 * p.kappa * y ** (p.kappa - 1.0))

    predictor = rhs + h * ait_sahalia_drift(p, x)
    return solve_scalar_monotone(residual, predictor, params, derivative, lower=0.0)
