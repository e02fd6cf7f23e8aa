"""Coupled-path Monte Carlo estimation of mean-square convergence rates.

For each sample a fine Brownian path is drawn once.  The reference terminal
value is computed on the fine grid and every coarse run uses increments
aggregated from the same fine path, so the difference between the two
measures discretisation error only.

Samples are processed in fixed blocks of ``BLOCK_SIZE`` consecutive ids.  A
block is the unit of work handed to a worker, and per-sample squared errors
are reassembled in sample order before the (exactly rounded) ``math.fsum``
reduction, so the output does not depend on the number of workers.
"""

from __future__ import annotations

import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import accel
from .core import ModelDynamics, SchemeParams, ValidationReport
from .errors import ArgumentError, CapabilityError, DomainEscapeError, SolveError
from .models import REGISTRY, build_model, gbm_exact_terminal
from .noise import aggregate_increments, sample_block
from .schemes import (StepContext, implicit_step, step_backward_euler,
                      step_euler_maruyama)

log = logging.getLogger(__name__)

BLOCK_SIZE = 256
METHODS = ("milstein", "euler-maruyama", "backward-euler")


@dataclass(frozen=True)
class ConvergenceStudyConfig:
    """Everything that determines a convergence study, seed included.

    ``model`` is a registry name (``"heston32"``, ``"ait-sahalia"``,
    ``"gbm"``, ``"poly-stress"``) with ``model_params`` an instance of the
    matching params dataclass, or ``None`` for its defaults.
    ``reference="exact"`` replaces the fine-grid reference by the closed-form
    solution and is only available for ``gbm``.
    """

    model: str
    scheme: SchemeParams
    model_params: object = None
    method: str = "milstein"
    t_end: float = 1.0
    samples: int = 10000
    fine_exponent: int = 12
    coarse_exponents: tuple[int, ...] = (4, 5, 6, 7, 8, 9)
    seed: int = 0
    reference: str = "fine"

    def __post_init__(self):
        if self.model not in REGISTRY:
            raise ArgumentError(f"unknown model {self.model!r}; choose from {sorted(REGISTRY)}")
        if self.model_params is None:
            object.__setattr__(self, "model_params", REGISTRY[self.model].params_type())
        object.__setattr__(self, "coarse_exponents", tuple(int(e) for e in self.coarse_exponents))
        if self.method not in METHODS:
            raise ArgumentError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.coarse_exponents:
            raise ArgumentError("at least one coarse exponent is required")
        if any(e < 0 for e in self.coarse_exponents):
            raise ArgumentError("coarse exponents must be nonnegative")
        if not all(self.fine_exponent > e for e in self.coarse_exponents):
            raise ArgumentError("fine_exponent must exceed every coarse exponent")
        if self.samples < 2:
            raise ArgumentError("samples must be at least 2")
        if not self.t_end > 0:
            raise ArgumentError("t_end must be positive")
        if self.reference not in ("fine", "exact"):
            raise ArgumentError("reference must be 'fine' or 'exact'")
        if self.reference == "exact" and self.model != "gbm":
            raise ArgumentError("an exact reference is only available for gbm")
        if not 0 <= int(self.seed) < 1 << 64:
            raise ArgumentError("seed must be a 64-bit unsigned integer")

    @property
    def n_fine(self) -> int:
        return 2 ** self.fine_exponent

    def stepsizes(self) -> list[float]:
        return [self.t_end / 2 ** e for e in sorted(self.coarse_exponents)]

    def dynamics(self) -> ModelDynamics:
        return build_model(self.model, self.model_params)

    def kernel_scheme(self) -> accel.KernelScheme:
        s = self.scheme
        if self.method == "milstein":
            theta, eta, milstein = s.theta, s.eta, True
        elif self.method == "euler-maruyama":
            theta, eta, milstein = 0.0, 0.0, False
        else:
            theta, eta, milstein = 1.0, 0.0, False
        return accel.KernelScheme(theta, eta, milstein, s.solver_tol, s.max_newton_iters,
                                  s.bracket_expansion)


def study_gates(cfg: ConvergenceStudyConfig) -> list[tuple[float, ValidationReport]]:
    """Model gates evaluated at every coarse stepsize and at the fine stepsize."""
    entry = REGISTRY[cfg.model]
    hs = cfg.stepsizes() + [cfg.t_end / cfg.n_fine]
    return [(h, entry.validate(cfg.model_params, h)) for h in hs]


def gate_messages(cfg: ConvergenceStudyConfig) -> tuple[list[str], list[str]]:
    """Split failed gates into (hard errors, warnings)."""
    hard = set(REGISTRY[cfg.model].hard_gates)
    errors, warnings = [], []
    for h, report in study_gates(cfg):
        for c in report.checks:
            if not c.passed:
                msg = f"h={h:.17g}: gate '{c.name}' fails ({c.detail})"
                (errors if c.name in hard else warnings).append(msg)
    return errors, warnings


@dataclass(frozen=True)
class ErrorRow:
    h: float
    rmse: float
    sem: float
    samples: int


@dataclass(frozen=True)
class ErrorTable:
    """Root-mean-square errors per stepsize, sorted by decreasing ``h``.

    ``sem`` is the standard error of the mean-square error estimate.
    """

    rows: tuple[ErrorRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(sorted(self.rows, key=lambda r: -r.h)))

    @property
    def h(self) -> np.ndarray:
        return np.array([r.h for r in self.rows])

    @property
    def rmse(self) -> np.ndarray:
        return np.array([r.rmse for r in self.rows])

    @property
    def sem(self) -> np.ndarray:
        return np.array([r.sem for r in self.rows])

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("h,rmse,sem,samples\n")
        for r in self.rows:
            out.write(f"{r.h:.17g},{r.rmse:.17g},{r.sem:.17g},{r.samples:d}\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ErrorTable":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "h,rmse,sem,samples":
            raise ArgumentError("CSV header must be 'h,rmse,sem,samples'")
        rows = []
        for ln in lines[1:]:
            h, rmse, sem, n = ln.split(",")
            rows.append(ErrorRow(float(h), float(rmse), float(sem), int(n)))
        return cls(tuple(rows))


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    residual_norm: float

    def summary(self) -> str:
        return f"rate={self.slope:.4f} residual={self.residual_norm:.4f}"


def fit_power_law(table: Union[ErrorTable, tuple[Sequence[float], Sequence[float]]]) -> FitResult:
    """Least-squares fit of ``log e = log C + delta log h`` (natural logs).

    ``residual_norm`` is the Euclidean norm of the log-space residuals.
    """
    if isinstance(table, ErrorTable):
        h, e = table.h, table.rmse
    else:
        h, e = (np.asarray(v, dtype=float) for v in table)
    if h.shape != e.shape or h.size < 2:
        raise ArgumentError("need at least two (h, error) pairs")
    if not (np.all(e > 0) and np.all(h > 0)) or not np.all(np.isfinite(e)):
        raise ArgumentError("errors and stepsizes must be positive and finite for a log-log fit")
    lh, le = np.log(h), np.log(e)
    design = np.column_stack([lh, np.ones_like(lh)])
    (slope, intercept), *_ = np.linalg.lstsq(design, le, rcond=None)
    resid = le - (slope * lh + intercept)
    return FitResult(float(slope), float(intercept), float(np.linalg.norm(resid)))


def _mse_stats(sq: np.ndarray) -> tuple[float, float]:
    m = sq.shape[0]
    mean = math.fsum(sq.tolist()) / m
    var = math.fsum(((sq - mean) ** 2).tolist()) / (m - 1)
    return mean, math.sqrt(var / m)


def _raise_status(res: accel.PathResult, sample_ids: np.ndarray, h: float, label: str) -> None:
    bad = np.flatnonzero(res.status != accel.OK)
    if bad.size == 0:
        return
    i = bad[0]
    sid, step = int(sample_ids[i]), int(res.fail_step[i])
    if res.status[i] == accel.SOLVE_FAILED:
        raise SolveError(f"implicit solve failed for sample {sid} at step {step} ({label}, h={h:.6g})",
                         sample_id=sid, step_index=step)
    raise DomainEscapeError(f"sample {sid} left the domain at step {step} ({label}, h={h:.6g})")


def _block_ids(samples: int) -> list[np.ndarray]:
    return [np.arange(a, min(a + BLOCK_SIZE, samples)) for a in range(0, samples, BLOCK_SIZE)]


def _run_block(cfg: ConvergenceStudyConfig, ids: np.ndarray, backend: Optional[str],
               want_errors: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    model = cfg.dynamics()
    scheme = cfg.kernel_scheme()
    x0 = model.initial_state()[0]
    fine = sample_block(cfg.seed, ids.tolist(), cfg.n_fine, 1, cfg.t_end)[:, :, 0]
    h_fine = cfg.t_end / cfg.n_fine
    exps = sorted(cfg.coarse_exponents)
    sq = np.empty((len(exps), ids.size))
    n_pos = np.zeros(len(exps), dtype=np.int64)
    n_states = np.zeros(len(exps), dtype=np.int64)
    ref = None
    if want_errors:
        if cfg.reference == "exact":
            w_t = aggregate_increments(fine, cfg.n_fine, axis=1)[:, 0]
            p = cfg.model_params
            ref = gbm_exact_terminal(x0, p.mu, p.sigma, cfg.t_end, w_t)
        else:
            res = accel.simulate(model.kernel, x0, fine, h_fine, scheme, model.positive_domain,
                                 backend=backend)
            _raise_status(res, ids, h_fine, "reference")
            ref = res.terminal
    for k, e in enumerate(exps):
        ratio = 2 ** (cfg.fine_exponent - e)
        coarse = aggregate_increments(fine, ratio, axis=1)
        h = cfg.t_end / 2 ** e
        res = accel.simulate(model.kernel, x0, coarse, h, scheme, model.positive_domain,
                             backend=backend)
        if want_errors:
            _raise_status(res, ids, h, "coarse")
            sq[k] = (ref - res.terminal) ** 2
        n_pos[k] = int(res.n_positive.sum())
        n_states[k] = coarse.size
    return sq, n_pos, n_states


def _map_blocks(cfg: ConvergenceStudyConfig, workers: int, backend: Optional[str], want_errors: bool):
    blocks = _block_ids(cfg.samples)
    args = [(cfg, ids, backend, want_errors) for ids in blocks]
    if workers <= 1 or len(blocks) == 1:
        return [_run_block(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_block, *zip(*args)))


def run_convergence_study(cfg: ConvergenceStudyConfig, workers: int = 1,
                          backend: Optional[str] = None) -> tuple[ErrorTable, FitResult]:
    """Estimate ``e_h = (E|X_T - Y_N|^2)^{1/2}`` over the stepsize ladder and fit the rate.

    Failed hard gates raise :class:`ArgumentError`; other failed gates are
    logged as warnings and the study proceeds.
    """
    errors, warnings = gate_messages(cfg)
    if errors:
        raise ArgumentError("; ".join(errors))
    for w in warnings:
        log.warning(w)
    parts = _map_blocks(cfg, workers, backend, want_errors=True)
    sq = np.concatenate([p[0] for p in parts], axis=1)
    rows = []
    for k, h in enumerate(cfg.stepsizes()):
        mse, sem = _mse_stats(sq[k])
        rows.append(ErrorRow(h, math.sqrt(mse), sem, cfg.samples))
    table = ErrorTable(tuple(rows))
    return table, fit_power_law(table)


def positivity_audit(cfg: ConvergenceStudyConfig, workers: int = 1,
                     backend: Optional[str] = None) -> float:
    """Fraction of all coarse-run states ``(sample, step)`` that are strictly positive."""
    model = cfg.dynamics()
    if not model.positive_domain:
        raise ArgumentError(f"model {cfg.model!r} does not live on (0, inf); nothing to audit")
    parts = _map_blocks(cfg, workers, backend, want_errors=False)
    pos = sum(int(p[1].sum()) for p in parts)
    total = sum(int(p[2].sum()) for p in parts)
    return pos / total


# --- remainder diagnostic ----------------------------------------------------------

def _scalar_coefficients(model: ModelDynamics, x: np.ndarray):
    """``(f, g, g'g)`` evaluated elementwise on an array of scalar states."""
    if model.kernel is not None:
        f, _, g, gg, _ = accel._coef_np(model.kernel[0], tuple(model.kernel[1]), x)
        return f, g, gg
    if model.state_dim != 1 or model.noise_dim != 1:
        raise CapabilityError("the remainder diagnostic supports scalar models only")
    from .core import levy_coefficient_eval
    flat = x.reshape(-1)
    f = np.array([model.drift(np.array([v]))[0] for v in flat])
    g = np.array([np.asarray(model.diffusion(np.array([v])))[0, 0] for v in flat])
    gg = np.array([levy_coefficient_eval(model, np.array([v]), 0, 0)[0] for v in flat])
    return f.reshape(x.shape), g.reshape(x.shape), gg.reshape(x.shape)


def simulate_generic(model: ModelDynamics, params: SchemeParams, x0, dW: np.ndarray, h: float,
                     method: str = "milstein", store_path: bool = False) -> np.ndarray:
    """Step commutative-noise paths one state at a time with the reference steppers.

    ``dW`` has shape ``(samples, steps, m)``.  Returns terminal states
    ``(samples, d)`` or, with ``store_path``, ``(samples, steps + 1, d)``.
    Slow; meant for models without a compiled kernel.
    """
    dW = np.asarray(dW, dtype=float)
    n_samples, n_steps, _ = dW.shape
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    out = np.empty((n_samples, n_steps + 1, model.state_dim))
    for s in range(n_samples):
        x = x0.copy()
        out[s, 0] = x
        for n in range(n_steps):
            ctx = StepContext.commutative(x, h, dW[s, n])
            try:
                if method == "milstein":
                    x = implicit_step(model, params, ctx)[0]
                elif method == "euler-maruyama":
                    x = step_euler_maruyama(model, ctx)
                else:
                    x = step_backward_euler(model, params, ctx)
            except SolveError as exc:
                exc.sample_id, exc.step_index = s, n
                raise
            out[s, n + 1] = x
    return out if store_path else out[:, -1]


def remainder_terms(model: ModelDynamics, params: SchemeParams, path: np.ndarray,
                    increments: np.ndarray, h_fine: float, ratio: int) -> np.ndarray:
    """Local defect ``R_i`` of the exact solution in every window of ``ratio`` fine steps.

    ``path`` is ``(samples, N + 1)`` and stands in for the exact solution;
    ``increments`` is ``(samples, N)``.  Every integral over a window is a
    left-endpoint sum on the fine grid, including the iterated integral.
    Returns an array ``(samples, N // ratio)``.
    """
    path = np.asarray(path, dtype=float)
    inc = np.asarray(increments, dtype=float)
    n_samples, n_fine = inc.shape
    if ratio < 2 or n_fine % ratio:
        raise ArgumentError(f"window of {ratio} fine steps is not aligned to {n_fine} fine steps")
    theta, eta = params.theta, params.eta
    n_win = n_fine // ratio
    f, g, gg = _scalar_coefficients(model, path)
    h = ratio * h_fine
    f_in = f[:, :-1].reshape(n_samples, n_win, ratio)
    g_in = g[:, :-1].reshape(n_samples, n_win, ratio)
    dw = inc.reshape(n_samples, n_win, ratio)
    left = np.s_[:, :-1:ratio]
    f_a, g_a, gg_a = f[left], g[left], gg[left]
    f_b, gg_b = f[:, ratio::ratio], gg[:, ratio::ratio]
    # Brownian motion relative to each window's left node, before each fine step
    w_rel = np.cumsum(dw, axis=2) - dw
    drift_implicit = theta * h_fine * (f_in - f_b[:, :, None]).sum(axis=2)
    drift_explicit = (1.0 - theta) * h_fine * (f_in - f_a[:, :, None]).sum(axis=2)
    stoch = ((g_in - g_a[:, :, None]) * dw).sum(axis=2)
    iterated = (w_rel * dw).sum(axis=2)
    return (drift_implicit + drift_explicit + stoch - gg_a * iterated
            + 0.5 * eta * h * (gg_b - gg_a))


def remainder_diagnostic(model: ModelDynamics, params: SchemeParams, increments: np.ndarray,
                         t_end: float, window_h: float, path: Optional[np.ndarray] = None,
                         backend: Optional[str] = None) -> float:
    """Monte Carlo estimate of ``(E|R_i|^2)^{1/2}`` for windows of length ``window_h``.

    ``increments`` is ``(samples, N)`` on the fine grid.  Without ``path`` the
    fine reference path is computed with the same scheme on the fine grid.
    """
    inc = np.asarray(increments, dtype=float)
    n_fine = inc.shape[1]
    h_fine = t_end / n_fine
    ratio_f = window_h / h_fine
    ratio = int(round(ratio_f))
    if ratio < 1 or abs(ratio_f - ratio) > 1e-9 * ratio_f or n_fine % ratio:
        raise ArgumentError(f"window h={window_h} is not aligned to the fine grid h={h_fine}")
    if path is None:
        path = fine_path(model, params, inc, h_fine, backend)
    r = remainder_terms(model, params, path, inc, h_fine, ratio)
    sq = (r * r).reshape(-1)
    return math.sqrt(math.fsum(sq.tolist()) / sq.size)


def fine_path(model: ModelDynamics, params: SchemeParams, increments: np.ndarray, h_fine: float,
              backend: Optional[str] = None) -> np.ndarray:
    """Fine-grid paths ``(samples, N + 1)`` from the (theta, eta) scheme."""
    x0 = model.initial_state()[0]
    if model.kernel is not None:
        scheme = accel.KernelScheme(params.theta, params.eta, True, params.solver_tol,
                                    params.max_newton_iters, params.bracket_expansion)
        res = accel.simulate(model.kernel, x0, increments, h_fine, scheme, model.positive_domain,
                             store_path=True, backend=backend)
        _raise_status(res, np.arange(increments.shape[0]), h_fine, "fine path")
        return res.path
    return simulate_generic(model, params, x0, increments[:, :, None], h_fine,
                            store_path=True)[:, :, 0]


@dataclass(frozen=True)
class RemainderLadder:
    table: ErrorTable
    fit: FitResult


def remainder_ladder(cfg: ConvergenceStudyConfig, backend: Optional[str] = None) -> RemainderLadder:
    """``(E|R_i|^2)^{1/2}`` over the coarse ladder of ``cfg``, with a power-law fit."""
    model = cfg.dynamics()
    ids = np.arange(cfg.samples)
    inc = sample_block(cfg.seed, ids.tolist(), cfg.n_fine, 1, cfg.t_end)[:, :, 0]
    h_fine = cfg.t_end / cfg.n_fine
    path = fine_path(model, cfg.scheme, inc, h_fine, backend)
    rows = []
    for h in cfg.stepsizes():
        val = remainder_diagnostic(model, cfg.scheme, inc, cfg.t_end, h, path=path)
        rows.append(ErrorRow(h, val, 0.0, cfg.samples))
    table = ErrorTable(tuple(rows))
    return RemainderLadder(table, fit_power_law(table))
