"""SDE and scheme abstractions consumed by every other module.

An Ito SDE ``dX = f(X) dt + sum_j g_j(X) dW^j`` on ``R^d`` is described by a
:class:`ModelDynamics`.  Noise columns are indexed from 0, so ``j`` runs over
``range(model.noise_dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ArgumentError, CapabilityError, DomainError

Array = np.ndarray
VectorMap = Callable[[Array], Array]

FD_REL_STEP = 1e-6


def _always(x: Array) -> bool:
    return True


def positive_orthant(x: Array) -> bool:
    """Domain predicate ``x_k > 0`` for every coordinate."""
    return bool(np.all(x > 0.0))


@dataclass(frozen=True)
class StepBound:
    """A model-specific upper bound on the stepsize.

    ``strict`` selects ``h < upper`` over ``h <= upper``.
    """

    name: str
    upper: float
    strict: bool = True

    def holds(self, h: float) -> bool:
        return h < self.upper if self.strict else h <= self.upper


@dataclass(frozen=True)
class ModelDynamics:
    """Coefficients and capabilities of one SDE.

    ``diffusion`` returns the full ``d x m`` matrix whose columns are the
    ``g_j``.  The optional maps let callers skip finite differences:

    * ``levy(x, j1, j2)`` -- analytic ``L^{j1} g_{j2}(x)``
    * ``drift_jacobian(x)`` -- ``df/dx`` as a ``d x d`` matrix
    * ``diffusion_jacobian(x, j)`` -- ``dg_j/dx`` as a ``d x d`` matrix
    * ``levy_trace_jacobian(x)`` -- Jacobian of ``sum_j L^j g_j``

    ``kernel`` names a compiled fast path as ``(kernel_id, params)``; it is
    used by the Monte Carlo harness and ignored by the reference steppers.
    """

    name: str
    state_dim: int
    noise_dim: int
    drift: VectorMap
    diffusion: Callable[[Array], Array]
    levy: Optional[Callable[[Array, int, int], Array]] = None
    drift_jacobian: Optional[Callable[[Array], Array]] = None
    diffusion_jacobian: Optional[Callable[[Array, int], Array]] = None
    levy_trace_jacobian: Optional[Callable[[Array], Array]] = None
    domain: Callable[[Array], bool] = _always
    positive_domain: bool = False
    commutative: bool = False
    step_bounds: tuple[StepBound, ...] = ()
    kernel: Optional[tuple[int, tuple[float, ...]]] = None
    x0: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.state_dim < 1 or self.noise_dim < 1:
            raise ArgumentError("state_dim and noise_dim must be positive")

    def diffusion_column(self, x: Array, j: int) -> Array:
        return np.asarray(self.diffusion(x), dtype=float)[:, j]

    def initial_state(self) -> Array:
        if self.x0 is None:
            raise ArgumentError(f"model {self.name!r} has no default initial state")
        return np.array(self.x0, dtype=float)

    def check_state(self, x: Array) -> Array:
        """Return ``x`` as a float vector, raising if it is malformed or outside the domain."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.state_dim:
            raise ArgumentError(
                f"state has length {x.shape[0]}, model {self.name!r} expects {self.state_dim}")
        if not np.all(np.isfinite(x)):
            raise DomainError(f"non-finite state {x!r}")
        if not self.domain(x):
            raise DomainError(f"state {x!r} outside the domain of {self.name!r}")
        return x


@dataclass(frozen=True)
class SchemeParams:
    """Method parameters ``(theta, eta)`` and implicit-solver settings."""

    theta: float
    eta: float
    solver_tol: float = 1e-12
    max_newton_iters: int = 50
    bracket_expansion: float = 2.0

    def __post_init__(self):
        for name in ("theta", "eta"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ArgumentError(f"{name}={value} outside the bound [0,1]")
        if not self.solver_tol > 0:
            raise ArgumentError("solver_tol must be positive")
        if self.max_newton_iters < 1:
            raise ArgumentError("max_newton_iters must be positive")
        if not self.bracket_expansion > 1.0:
            raise ArgumentError("bracket_expansion must exceed 1")

    @property
    def is_explicit(self) -> bool:
        return self.theta == 0.0 and self.eta == 0.0


@dataclass(frozen=True)
class AssumptionConstants:
    """User-supplied constants of the monotonicity and growth assumptions.

    They document the regime a run claims to be in and gate stepsizes; the
    step kernels never read them.  ``nu`` defaults to 0.5.
    """

    q: float = 4.0
    varrho: float = 2.0
    nu: float = 0.5
    L1: float = 0.0
    L2: float = 0.0
    L3: float = 0.0
    L4: float = 0.0
    L5: float = 0.0
    L6: float = 0.0
    h0: float = 1.0
    gamma: float = 1.0
    p_star: float = 2.0

    def __post_init__(self):
        if not self.q > 2:
            raise ArgumentError("q must exceed 2")
        if not self.varrho > 1:
            raise ArgumentError("varrho must exceed 1")
        if not 0 < self.nu < 1:
            raise ArgumentError("nu must lie in (0,1)")
        for i in range(1, 7):
            if getattr(self, f"L{i}") < 0:
                raise ArgumentError(f"L{i} must be nonnegative")
        if not self.h0 > 0:
            raise ArgumentError("h0 must be positive")
        if not self.gamma >= 1:
            raise ArgumentError("gamma must be at least 1")
        if not self.p_star >= 6 * self.gamma - 4:
            raise ArgumentError("p_star must be at least 6*gamma - 4")


@dataclass(frozen=True)
class TimeGrid:
    t_end: float
    steps: int

    def __post_init__(self):
        if not self.t_end > 0:
            raise ArgumentError("t_end must be positive")
        if self.steps < 1:
            raise ArgumentError("steps must be positive")

    @property
    def h(self) -> float:
        return self.t_end / self.steps

    def nodes(self) -> Array:
        return np.arange(self.steps + 1) * self.h


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def violations(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def validate_step_size(params: SchemeParams, constants: AssumptionConstants, h: float,
                       bounds: Sequence[StepBound] = ()) -> ValidationReport:
    """Check ``2 L2 h <= nu``, ``h <= h0`` and any model-registered bounds.

    Pass ``model.step_bounds`` as ``bounds`` to include the model gates.
    Never raises; inspect ``report.passed``.
    """
    checks = [
        Check("2*L2*h <= nu", 2.0 * constants.L2 * h <= constants.nu,
              f"2*{constants.L2}*{h} = {2.0 * constants.L2 * h} vs nu = {constants.nu}"),
        Check("h <= h0", h <= constants.h0, f"h = {h}, h0 = {constants.h0}"),
    ]
    for b in bounds:
        op = "<" if b.strict else "<="
        checks.append(Check(b.name, b.holds(h), f"h = {h} {op} {b.upper}"))
    return ValidationReport(tuple(checks))


def _fd_step(model: ModelDynamics, x: Array, k: int) -> float:
    delta = FD_REL_STEP * max(1.0, abs(x[k]))
    if model.positive_domain and x[k] - delta <= 0.0:
        delta = 0.5 * x[k]
    return delta


def fd_jacobian(model: ModelDynamics, fn: VectorMap, x: Array) -> Array:
    """Central-difference Jacobian of ``fn`` at ``x``.

    The per-coordinate step is ``1e-6 * max(1, |x_k|)``, halved towards the
    boundary when the model lives on the positive orthant.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    cols = []
    for k in range(d):
        delta = _fd_step(model, x, k)
        xp = x.copy()
        xm = x.copy()
        xp[k] += delta
        xm[k] -= delta
        cols.append((np.asarray(fn(xp), dtype=float) - np.asarray(fn(xm), dtype=float))
                    / (xp[k] - xm[k]))
    return np.column_stack(cols)


def diffusion_jacobian(model: ModelDynamics, x: Array, j: int) -> Array:
    if model.diffusion_jacobian is not None:
        return np.asarray(model.diffusion_jacobian(x, j), dtype=float)
    return fd_jacobian(model, lambda y: model.diffusion_column(y, j), x)


def drift_jacobian(model: ModelDynamics, x: Array) -> Array:
    if model.drift_jacobian is not None:
        return np.asarray(model.drift_jacobian(x), dtype=float)
    return fd_jacobian(model, model.drift, x)


def _check_index(model: ModelDynamics, j: int) -> None:
    if not 0 <= j < model.noise_dim:
        raise ArgumentError(f"noise index {j} outside 0..{model.noise_dim - 1}")


def levy_coefficient_eval(model: ModelDynamics, x: Array, j1: int, j2: int,
                          route: str = "auto") -> Array:
    """Evaluate ``L^{j1} g_{j2}(x) = (dg_{j2}/dx)(x) g_{j1}(x)``.

    ``route`` is ``"auto"`` (analytic, then Jacobian product, then finite
    differences), or one of ``"analytic"``, ``"jacobian"``, ``"fd"`` to force
    a particular evaluation.
    """
    x = model.check_state(x)
    _check_index(model, j1)
    _check_index(model, j2)
    if route == "auto":
        if model.levy is not None:
            route = "analytic"
        elif model.diffusion_jacobian is not None:
            route = "jacobian"
        else:
            route = "fd"
    if route == "analytic":
        if model.levy is None:
            raise CapabilityError(f"model {model.name!r} has no analytic Levy coefficient")
        return np.asarray(model.levy(x, j1, j2), dtype=float).reshape(model.state_dim)
    g1 = model.diffusion_column(x, j1)
    if route == "jacobian":
        if model.diffusion_jacobian is None:
            raise CapabilityError(f"model {model.name!r} has no diffusion Jacobian")
        return np.asarray(model.diffusion_jacobian(x, j2), dtype=float) @ g1
    if route == "fd":
        jac = fd_jacobian(model, lambda y: model.diffusion_column(y, j2), x)
        return jac @ g1
    raise ArgumentError(f"unknown route {route!r}")


def levy_trace(model: ModelDynamics, x: Array) -> Array:
    """``sum_j L^j g_j(x)``, the term carrying the second implicit weight."""
    out = np.zeros(model.state_dim)
    for j in range(model.noise_dim):
        out += levy_coefficient_eval(model, x, j, j)
    return out


def levy_trace_jacobian(model: ModelDynamics, x: Array) -> Array:
    if model.levy_trace_jacobian is not None:
        return np.asarray(model.levy_trace_jacobian(x), dtype=float)
    return fd_jacobian(model, lambda y: levy_trace(model, y), x)


def commutativity_check(model: ModelDynamics, sample_points: Sequence[Array],
                        tol: float = 1e-8) -> bool:
    """True iff ``L^{j1} g_{j2} = L^{j2} g_{j1}`` on every sample point.

    The mismatch at ``x`` is compared against ``tol * (1 + |x|)``.
    """
    points = list(sample_points)
    if not points:
        raise ArgumentError("commutativity_check needs at least one sample point")
    m = model.noise_dim
    for x in points:
        x = model.check_state(x)
        scale = tol * (1.0 + float(np.linalg.norm(x)))
        for j1 in range(m):
            for j2 in range(j1 + 1, m):
                a = levy_coefficient_eval(model, x, j1, j2)
                b = levy_coefficient_eval(model, x, j2, j1)
                if not float(np.linalg.norm(a - b)) <= scale:
                    return False
    return True


def relative_close(a: float, b: float, rtol: float) -> bool:
    """``|a - b| <= rtol * (1 + |a|)``, the scale used for all residual contracts."""
    return abs(a - b) <= rtol * (1.0 + abs(a))
