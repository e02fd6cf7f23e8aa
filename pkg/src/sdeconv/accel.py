"""Compiled path kernels for the registered scalar models.

The Monte Carlo harness spends nearly all of its time stepping thousands of
scalar paths through a few thousand steps each, so that loop is compiled with
numba.  A pure-numpy implementation, vectorised across samples, is kept as a
fallback and as an independent second route; set ``SDECONV_DISABLE_NUMBA=1``
(or pass ``backend="numpy"``) to use it.

Models are selected by integer id with a flat parameter array:

==============  ==========================================================
``HESTON32``    ``(mu, alpha, beta)``
``AIT_SAHALIA`` ``(alpha_m1, alpha_0, alpha_1, alpha_2, sigma, kappa, rho)``
``GBM``         ``(mu, sigma)``
``POLY_STRESS`` ``(sigma,)``
==============  ==========================================================

Every kernel returns per-sample status codes instead of raising, so a batch
never aborts half way; callers turn non-zero codes into exceptions.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn

HESTON32 = 0
AIT_SAHALIA = 1
GBM = 2
POLY_STRESS = 3

OK = 0
SOLVE_FAILED = 1
DOMAIN_ESCAPE = 2

MAX_EXPANSIONS = 200
MAX_BISECTIONS = 2000


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("SDECONV_DISABLE_NUMBA", "").lower() not in ("1", "true", "yes")


@dataclass(frozen=True)
class KernelScheme:
    """Flat scheme description understood by the kernels.

    ``milstein=False`` drops every ``g'g`` term: ``theta=0`` is then
    Euler-Maruyama and ``theta=1`` drift-implicit Euler.
    """

    theta: float
    eta: float
    milstein: bool = True
    tol: float = 1e-12
    max_iters: int = 50
    expansion: float = 2.0

    @property
    def eta_eff(self) -> float:
        return self.eta if self.milstein else 0.0


# --- numba route -----------------------------------------------------------------

@njit(cache=True)
def _powf(x, a):
    """``x ** a`` with small integer exponents done by multiplication (a general pow is slow)."""
    n = int(a)
    if n == a and 0 <= n <= 8:
        r = 1.0
        for _ in range(n):
            r *= x
        return r
    return x ** a


@njit(cache=True)
def _coef(mid, p, x):
    """Return ``(f, f', g, g'g, (g'g)')`` at ``x``."""
    if mid == HESTON32:
        mu, alpha, beta = p[0], p[1], p[2]
        return (x * (mu - alpha * x), mu - 2.0 * alpha * x, beta * x ** 1.5,
                1.5 * beta * beta * x * x, 3.0 * beta * beta * x)
    elif mid == AIT_SAHALIA:
        am1, a0, a1, a2, s, kap, rho = p[0], p[1], p[2], p[3], p[4], p[5], p[6]
        return (am1 / x - a0 + a1 * x - a2 * _powf(x, kap),
                -am1 / (x * x) + a1 - a2 * kap * _powf(x, kap - 1.0),
                s * _powf(x, rho),
                rho * s * s * _powf(x, 2.0 * rho - 1.0),
                rho * (2.0 * rho - 1.0) * s * s * _powf(x, 2.0 * rho - 2.0))
    elif mid == GBM:
        mu, s = p[0], p[1]
        return mu * x, mu, s * x, s * s * x, s * s
    else:
        s = p[0]
        return -x ** 5, -5.0 * x ** 4, s * x * x, 2.0 * s * s * x ** 3, 6.0 * s * s * x * x


@njit(cache=True)
def _residual(mid, p, y, explicit, h, theta, eta):
    f, fp, g, gg, ggp = _coef(mid, p, y)
    return y - theta * h * f + 0.5 * eta * h * gg - explicit


@njit(cache=True)
def _dresidual(mid, p, y, h, theta, eta):
    f, fp, g, gg, ggp = _coef(mid, p, y)
    return 1.0 - theta * h * fp + 0.5 * eta * h * ggp


@njit(cache=True)
def _admissible(y, positive):
    if not math.isfinite(y):
        return False
    return y > 0.0 or not positive


@njit(cache=True)
def _solve_nb(mid, p, explicit, predictor, h, theta, eta, tol, max_iters, grow, positive):
    """Newton from the predictor, then bracket expansion and bisection.

    Returns ``(root, residual, iterations, status)``.
    """
    it = 0
    y = predictor
    if _admissible(y, positive):
        for _ in range(max_iters):
            r = _residual(mid, p, y, explicit, h, theta, eta)
            if not math.isfinite(r):
                break
            if abs(r) <= tol * (1.0 + abs(y)):
                d = _dresidual(mid, p, y, h, theta, eta)
                if d > 0.0 and math.isfinite(d):
                    y2 = y - r / d
                    if _admissible(y2, positive):
                        r2 = _residual(mid, p, y2, explicit, h, theta, eta)
                        if math.isfinite(r2) and abs(r2) <= abs(r):
                            return y2, abs(r2), it, OK
                return y, abs(r), it, OK
            d = _dresidual(mid, p, y, h, theta, eta)
            if not (d > 0.0 and math.isfinite(d)):
                break
            y_next = y - r / d
            it += 1
            if not _admissible(y_next, positive):
                break
            y = y_next

    c = predictor
    if not _admissible(c, positive):
        c = 1.0
    rc = _residual(mid, p, c, explicit, h, theta, eta)
    if not math.isfinite(rc):
        return c, math.inf, it, SOLVE_FAILED
    lo = c
    hi = c
    r_lo = rc
    r_hi = rc
    step = max(1.0, abs(c))
    found = rc == 0.0
    for _ in range(MAX_EXPANSIONS):
        if found:
            break
        if rc < 0.0:
            lo = hi
            r_lo = r_hi
            if positive and hi > 0.0:
                hi = hi * grow
            else:
                hi = hi + step
            step *= grow
            r_hi = _residual(mid, p, hi, explicit, h, theta, eta)
            found = r_hi >= 0.0
        else:
            hi = lo
            r_hi = r_lo
            if positive:
                lo = lo / grow
            else:
                lo = lo - step
                step *= grow
            r_lo = _residual(mid, p, lo, explicit, h, theta, eta)
            found = r_lo <= 0.0
    if not found:
        return c, abs(rc), it, SOLVE_FAILED
    if r_lo == 0.0:
        return lo, 0.0, it, OK
    if r_hi == 0.0:
        return hi, 0.0, it, OK
    if abs(r_lo) < abs(r_hi):
        best = lo
        r_best = r_lo
    else:
        best = hi
        r_best = r_hi
    for _ in range(MAX_BISECTIONS):
        if abs(r_best) <= tol * (1.0 + abs(best)):
            break
        mid_pt = 0.5 * (lo + hi)
        if not (lo < mid_pt < hi):
            break
        r_mid = _residual(mid, p, mid_pt, explicit, h, theta, eta)
        it += 1
        if r_mid < 0.0:
            lo = mid_pt
            r_lo = r_mid
        else:
            hi = mid_pt
            r_hi = r_mid
        if abs(r_mid) < abs(r_best):
            best = mid_pt
            r_best = r_mid
    d = _dresidual(mid, p, best, h, theta, eta)
    if d > 0.0 and math.isfinite(d):
        y2 = best - r_best / d
        if _admissible(y2, positive):
            r2 = _residual(mid, p, y2, explicit, h, theta, eta)
            if math.isfinite(r2) and abs(r2) <= abs(r_best):
                best = y2
                r_best = r2
    if abs(r_best) <= tol * (1.0 + abs(best)):
        return best, abs(r_best), it, OK
    return best, abs(r_best), it, SOLVE_FAILED


@njit(cache=True)
def _step_nb(mid, p, x, h, dw, theta, eta, milstein, tol, max_iters, grow, positive):
    """One step; returns ``(y, residual, iterations, status)``."""
    f, fp, g, gg, ggp = _coef(mid, p, x)
    if milstein:
        lev = gg * 0.5 * (dw * dw - h)
        explicit = x + (1.0 - theta) * f * h + g * dw + lev + 0.5 * eta * h * gg
        predictor = x + f * h + g * dw + lev
    else:
        eta = 0.0
        explicit = x + (1.0 - theta) * f * h + g * dw
        predictor = x + f * h + g * dw
    if theta == 0.0 and eta == 0.0:
        y = explicit
        if not _admissible(y, positive):
            return y, 0.0, 0, DOMAIN_ESCAPE
        return y, 0.0, 0, OK
    if mid == HESTON32 and milstein and theta == 1.0 and eta == 1.0 and x > 0.0:
        mu, alpha, beta = p[0], p[1], p[2]
        c = 0.75 * beta * beta
        big_b = x + beta * x ** 1.5 * dw + c * x * x * dw * dw
        a = (alpha + c) * h
        b = 1.0 - mu * h
        disc = math.sqrt(b * b + 4.0 * a * big_b)
        if b > 0.0:
            y = 2.0 * big_b / (b + disc)
        else:
            y = (disc - b) / (2.0 * a)
        r = _residual(mid, p, y, explicit, h, theta, eta)
        return y, abs(r), 0, OK
    return _solve_nb(mid, p, explicit, predictor, h, theta, eta, tol, max_iters, grow, positive)


@njit(cache=True)
def _simulate_nb(mid, p, x0, dW, h, theta, eta, milstein, tol, max_iters, grow, positive,
                 store_path):
    n_samples, n_steps = dW.shape
    terminal = np.empty(n_samples)
    n_positive = np.zeros(n_samples, dtype=np.int64)
    status = np.zeros(n_samples, dtype=np.int64)
    fail_step = np.full(n_samples, -1, dtype=np.int64)
    max_resid = np.zeros(n_samples)
    if store_path:
        path = np.empty((n_samples, n_steps + 1))
    else:
        path = np.empty((0, 0))
    for s in range(n_samples):
        x = x0
        if store_path:
            path[s, 0] = x
        for n in range(n_steps):
            y, r, it, st = _step_nb(mid, p, x, h, dW[s, n], theta, eta, milstein, tol,
                                    max_iters, grow, positive)
            if r > max_resid[s]:
                max_resid[s] = r
            if st != OK and status[s] == OK:
                status[s] = st
                fail_step[s] = n
            if st == SOLVE_FAILED:
                y = math.nan
            x = y
            if x > 0.0:
                n_positive[s] += 1
            if store_path:
                path[s, n + 1] = x
            if st == SOLVE_FAILED:
                if store_path:
                    path[s, n + 2:] = math.nan
                break
        terminal[s] = x
    return terminal, n_positive, status, fail_step, max_resid, path


# --- numpy route -----------------------------------------------------------------

def _coef_np(mid, p, x):
    with np.errstate(all="ignore"):
        if mid == HESTON32:
            mu, alpha, beta = p
            return (x * (mu - alpha * x), mu - 2.0 * alpha * x, beta * x ** 1.5,
                    1.5 * beta * beta * x * x, 3.0 * beta * beta * x)
        if mid == AIT_SAHALIA:
            am1, a0, a1, a2, s, kap, rho = p
            return (am1 / x - a0 + a1 * x - a2 * x ** kap,
                    -am1 / (x * x) + a1 - a2 * kap * x ** (kap - 1.0),
                    s * x ** rho,
                    rho * s * s * x ** (2.0 * rho - 1.0),
                    rho * (2.0 * rho - 1.0) * s * s * x ** (2.0 * rho - 2.0))
        if mid == GBM:
            mu, s = p
            return mu * x, np.full_like(x, mu), s * x, s * s * x, np.full_like(x, s * s)
        (s,) = p
        return -x ** 5, -5.0 * x ** 4, s * x * x, 2.0 * s * s * x ** 3, 6.0 * s * s * x * x


def _fallback_solve(mid, p, explicit, predictor, h, theta, eta, scheme, positive):
    # Scalar rescue for the few samples where vectorised Newton gives up.
    from .core import SchemeParams
    from .errors import SolveError
    from .schemes import solve_scalar_monotone

    def residual(y):
        f, _, _, gg, _ = _coef_np(mid, p, np.float64(y))
        return y - theta * h * f + 0.5 * eta * h * gg - explicit

    def derivative(y):
        _, fp, _, _, ggp = _coef_np(mid, p, np.float64(y))
        return 1.0 - theta * h * fp + 0.5 * eta * h * ggp

    params = SchemeParams(theta, max(eta, 0.0), scheme.tol, scheme.max_iters, scheme.expansion)
    try:
        y, rep = solve_scalar_monotone(residual, predictor, params, derivative,
                                       0.0 if positive else None)
    except SolveError as exc:
        r = exc.report.final_residual if exc.report is not None else math.inf
        return math.nan, r, SOLVE_FAILED
    return y, rep.final_residual, OK


def _step_np(mid, p, x, h, dw, scheme: KernelScheme, positive: bool):
    theta = scheme.theta
    eta = scheme.eta_eff
    hv = np.broadcast_to(h, x.shape)
    f, fp, g, gg, ggp = _coef_np(mid, p, x)
    with np.errstate(all="ignore"):
        if scheme.milstein:
            lev = gg * 0.5 * (dw * dw - h)
            explicit = x + (1.0 - theta) * f * h + g * dw + lev + 0.5 * eta * h * gg
            predictor = x + f * h + g * dw + lev
        else:
            explicit = x + (1.0 - theta) * f * h + g * dw
            predictor = x + f * h + g * dw
    status = np.zeros(x.shape, dtype=np.int64)
    resid = np.zeros(x.shape)

    def admissible(v):
        ok = np.isfinite(v)
        return ok & (v > 0.0) if positive else ok

    if theta == 0.0 and eta == 0.0:
        status[~admissible(explicit)] = DOMAIN_ESCAPE
        return explicit, resid, status

    if mid == HESTON32 and scheme.milstein and theta == 1.0 and eta == 1.0:
        mu, alpha, beta = p
        with np.errstate(all="ignore"):
            c = 0.75 * beta * beta
            big_b = x + beta * x ** 1.5 * dw + c * x * x * dw * dw
            a = (alpha + c) * h
            b = 1.0 - mu * h
            disc = np.sqrt(b * b + 4.0 * a * big_b)
            y = np.where(b > 0.0, 2.0 * big_b / (b + disc), (disc - b) / (2.0 * a))
            f1, _, _, gg1, _ = _coef_np(mid, p, y)
            resid = np.abs(y - theta * h * f1 + 0.5 * eta * h * gg1 - explicit)
        bad = ~(x > 0.0)
        if np.any(bad):
            # Off-domain input: hand those samples to the general solver.
            for i in np.flatnonzero(bad):
                y[i], resid[i], status[i] = _fallback_solve(
                    mid, p, explicit[i], predictor[i], hv[i], theta, eta, scheme, positive)
        return y, resid, status

    tol = scheme.tol
    y = predictor.copy()
    active = admissible(y)
    done = np.zeros(x.shape, dtype=bool)
    with np.errstate(all="ignore"):
        for _ in range(scheme.max_iters):
            if not active.any():
                break
            f1, fp1, _, gg1, ggp1 = _coef_np(mid, p, y)
            r = y - theta * h * f1 + 0.5 * eta * h * gg1 - explicit
            d = 1.0 - theta * h * fp1 + 0.5 * eta * h * ggp1
            conv = active & np.isfinite(r) & (np.abs(r) <= tol * (1.0 + np.abs(y)))
            if conv.any():
                # one polishing Newton step, kept only when it does not hurt
                y2 = y - r / d
                f2, _, _, gg2, _ = _coef_np(mid, p, y2)
                r2 = y2 - theta * h * f2 + 0.5 * eta * h * gg2 - explicit
                take = conv & (d > 0) & admissible(y2) & np.isfinite(r2) & (np.abs(r2) <= np.abs(r))
                y = np.where(take, y2, y)
                resid = np.where(conv, np.where(take, np.abs(r2), np.abs(r)), resid)
                done |= conv
                active &= ~conv
            step_ok = active & np.isfinite(r) & (d > 0) & np.isfinite(d)
            active &= step_ok
            y_next = np.where(step_ok, y - r / d, y)
            active &= admissible(y_next)
            y = np.where(active, y_next, y)
    for i in np.flatnonzero(~done):
        y[i], resid[i], status[i] = _fallback_solve(
            mid, p, explicit[i], predictor[i], hv[i], theta, eta, scheme, positive)
    return y, resid, status


def _simulate_np(mid, p, x0, dW, h, scheme: KernelScheme, positive: bool, store_path: bool):
    n_samples, n_steps = dW.shape
    x = np.full(n_samples, float(x0))
    n_positive = np.zeros(n_samples, dtype=np.int64)
    status = np.zeros(n_samples, dtype=np.int64)
    fail_step = np.full(n_samples, -1, dtype=np.int64)
    max_resid = np.zeros(n_samples)
    path = np.empty((n_samples, n_steps + 1)) if store_path else np.empty((0, 0))
    if store_path:
        path[:, 0] = x
    alive = np.ones(n_samples, dtype=bool)
    for n in range(n_steps):
        y, r, st = _step_np(mid, p, x, h, dW[:, n], scheme, positive)
        y = np.where(alive, y, np.nan)
        st = np.where(alive, st, OK)
        max_resid = np.where(alive & (r > max_resid), r, max_resid)
        first = (st != OK) & (status == OK)
        status[first] = st[first]
        fail_step[first] = n
        failed = st == SOLVE_FAILED
        y[failed] = np.nan
        x = y
        n_positive += (x > 0.0) & alive
        if store_path:
            path[:, n + 1] = x
        alive &= ~failed
    return x, n_positive, status, fail_step, max_resid, path


# --- dispatch --------------------------------------------------------------------

@dataclass
class PathResult:
    terminal: np.ndarray
    n_positive: np.ndarray
    status: np.ndarray
    fail_step: np.ndarray
    max_residual: np.ndarray
    path: np.ndarray


def simulate(kernel: tuple[int, tuple[float, ...]], x0: float, dW: np.ndarray, h: float,
             scheme: KernelScheme, positive: bool, store_path: bool = False,
             backend: str | None = None) -> PathResult:
    """Run ``dW.shape[0]`` scalar paths of ``dW.shape[1]`` steps each.

    ``backend`` is ``"numba"``, ``"numpy"`` or ``None`` for the environment
    default.
    """
    mid, params = kernel
    dW = np.ascontiguousarray(dW, dtype=float)
    if dW.ndim != 2:
        raise ValueError("dW must have shape (samples, steps)")
    if backend is None:
        backend = "numba" if numba_enabled() else "numpy"
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        out = _simulate_nb(int(mid), np.asarray(params, dtype=float), float(x0), dW, float(h),
                           float(scheme.theta), float(scheme.eta_eff), bool(scheme.milstein),
                           float(scheme.tol), int(scheme.max_iters), float(scheme.expansion),
                           bool(positive), bool(store_path))
    elif backend == "numpy":
        out = _simulate_np(int(mid), tuple(float(v) for v in params), x0, dW, float(h), scheme,
                           bool(positive), bool(store_path))
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return PathResult(*out)


def step_batch(kernel, x: np.ndarray, h: float, dW: np.ndarray, scheme: KernelScheme,
               positive: bool, backend: str | None = None):
    """One step for a batch of states; returns ``(y, residual, status)``.

    ``h`` may be a scalar or one stepsize per state.
    """
    mid, params = kernel
    x = np.ascontiguousarray(x, dtype=float)
    dW = np.ascontiguousarray(dW, dtype=float)
    h = np.ascontiguousarray(np.broadcast_to(np.asarray(h, dtype=float), x.shape))
    if backend is None:
        backend = "numba" if numba_enabled() else "numpy"
    if backend == "numpy":
        return _step_np(int(mid), tuple(float(v) for v in params), x, h, dW, scheme, positive)
    return _step_batch_nb(int(mid), np.asarray(params, dtype=float), x, h, dW,
                          float(scheme.theta), float(scheme.eta_eff), bool(scheme.milstein),
                          float(scheme.tol), int(scheme.max_iters), float(scheme.expansion),
                          bool(positive))


@njit(cache=True)
def _step_batch_nb(mid, p, x, h, dW, theta, eta, milstein, tol, max_iters, grow, positive):
    n = x.shape[0]
    y = np.empty(n)
    resid = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    for i in range(n):
        y[i], resid[i], _, status[i] = _step_nb(mid, p, x[i], h[i], dW[i], theta, eta, milstein,
                                                tol, max_iters, grow, positive)
    return y, resid, status
