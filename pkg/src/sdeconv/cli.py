"""``sdeconv`` command line: convergence studies, step traces, positivity audits.

A study is described by a plain-text spec file of ``key = value`` lines::

    # Heston 3/2, theta = eta = 1
    model = heston32
    mu = 2
    alpha = 5/2
    beta = 1
    theta = 1
    eta = 1
    samples = 2000
    h_exact = 2^-12
    stepsizes = 2^-4, 2^-5, 2^-6, 2^-7, 2^-8, 2^-9
    seed = 20240101

Numbers may be decimals, ``p/q`` fractions or ``2^-k`` powers.  Exit codes:
0 success, 2 invalid input, 3 solver failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import re
import sys
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .core import SchemeParams
from .errors import ArgumentError, DomainError, SolveError
from .experiments import (METHODS, ConvergenceStudyConfig, gate_messages, positivity_audit,
                          run_convergence_study)
from .models import REGISTRY, make_params, model_param_names
from .noise import RngStreamKey, aggregate_increments, sample_fine_increments
from .schemes import (StepContext, ait_sahalia_implicit_step, heston32_closed_form_step,
                      implicit_step, step_backward_euler, step_euler_maruyama)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3
EXIT_IO = 4

STUDY_KEYS = {"model", "theta", "eta", "method", "t_end", "samples", "fine_exponent", "h_exact",
              "coarse_exponents", "stepsizes", "seed", "output", "reference", "solver_tol",
              "max_newton_iters", "bracket_expansion"}
REQUIRED_KEYS = {"model", "theta", "eta"}

_POW2 = re.compile(r"^\s*2\s*\^\s*(-?\d+)\s*$")


class SpecError(ArgumentError):
    pass


def parse_number(text: str) -> float:
    """Parse ``1.5``, ``3/2`` or ``2^-12``."""
    m = _POW2.match(text)
    if m:
        return math.ldexp(1.0, int(m.group(1)))
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise SpecError(f"cannot parse number {text!r}") from None


def _parse_int(key: str, text: str) -> int:
    v = parse_number(text)
    if v != int(v):
        raise SpecError(f"{key} must be an integer, got {text!r}")
    return int(v)


def _exponent_for(key: str, h: float, t_end: float) -> int:
    ratio = t_end / h
    k = round(math.log2(ratio)) if ratio > 0 else -1
    if k < 0 or math.ldexp(t_end, -k) != h:
        raise SpecError(f"{key}: stepsize {h!r} is not t_end * 2^-k")
    return k


@dataclass(frozen=True)
class StudySpec:
    config: ConvergenceStudyConfig
    output: Optional[str] = None


def parse_spec(text: str, env: Optional[dict] = None) -> StudySpec:
    """Parse a spec file's text.  ``SDECONV_SEED`` in ``env`` overrides ``seed``."""
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise SpecError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    missing = REQUIRED_KEYS - raw.keys()
    if missing:
        raise SpecError(f"missing required keys: {', '.join(sorted(missing))}")
    model = raw["model"]
    if model not in REGISTRY:
        raise SpecError(f"unknown model {model!r}; choose from {', '.join(sorted(REGISTRY))}")
    param_keys = set(model_param_names(model))
    unknown = raw.keys() - STUDY_KEYS - param_keys
    if unknown:
        raise SpecError(f"unknown keys for model {model!r}: {', '.join(sorted(unknown))}")
    for a, b in (("fine_exponent", "h_exact"), ("coarse_exponents", "stepsizes")):
        if a in raw and b in raw:
            raise SpecError(f"give either {a} or {b}, not both")

    mparams = make_params(model, **{k: parse_number(raw[k]) for k in param_keys & raw.keys()})
    solver = {}
    if "solver_tol" in raw:
        solver["solver_tol"] = parse_number(raw["solver_tol"])
    if "max_newton_iters" in raw:
        solver["max_newton_iters"] = _parse_int("max_newton_iters", raw["max_newton_iters"])
    if "bracket_expansion" in raw:
        solver["bracket_expansion"] = parse_number(raw["bracket_expansion"])
    scheme = SchemeParams(parse_number(raw["theta"]), parse_number(raw["eta"]), **solver)

    t_end = parse_number(raw.get("t_end", "1"))
    kw = {}
    if "fine_exponent" in raw:
        kw["fine_exponent"] = _parse_int("fine_exponent", raw["fine_exponent"])
    elif "h_exact" in raw:
        kw["fine_exponent"] = _exponent_for("h_exact", parse_number(raw["h_exact"]), t_end)
    if "coarse_exponents" in raw:
        kw["coarse_exponents"] = tuple(_parse_int("coarse_exponents", v)
                                       for v in raw["coarse_exponents"].split(","))
    elif "stepsizes" in raw:
        kw["coarse_exponents"] = tuple(_exponent_for("stepsizes", parse_number(v), t_end)
                                       for v in raw["stepsizes"].split(","))
    if "samples" in raw:
        kw["samples"] = _parse_int("samples", raw["samples"])
    seed_text = env.get("SDECONV_SEED") or raw.get("seed", "0")
    kw["seed"] = _parse_int("seed", seed_text)
    if "method" in raw:
        kw["method"] = raw["method"]
        if raw["method"] not in METHODS:
            raise SpecError(f"method must be one of {', '.join(METHODS)}")
    if "reference" in raw:
        kw["reference"] = raw["reference"]
    cfg = ConvergenceStudyConfig(model, scheme, mparams, t_end=t_end, **kw)
    return StudySpec(cfg, raw.get("output"))


def _load(path: str) -> StudySpec:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_spec(text)


def _warn_gates(cfg: ConvergenceStudyConfig) -> None:
    errors, warnings = gate_messages(cfg)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if errors:
        raise ArgumentError("; ".join(errors))


def cmd_run(args) -> int:
    spec = _load(args.spec)
    cfg = spec.config
    _warn_gates(cfg)
    logging.getLogger("sdeconv.experiments").setLevel(logging.ERROR)
    table, fit = run_convergence_study(cfg, workers=args.workers)
    csv_text = table.to_csv()
    out = args.out or spec.output
    if out and out != "-":
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    print(f"rate={fit.slope:.6f} residual={fit.residual_norm:.6f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    spec = _load(args.spec)
    cfg = spec.config
    model = cfg.dynamics()
    h = args.h if args.h is not None else cfg.stepsizes()[0]
    k = _exponent_for("--h", h, cfg.t_end)
    if k > cfg.fine_exponent:
        raise SpecError("--h must not be finer than the fine grid")
    fabric = sample_fine_increments(RngStreamKey(cfg.seed, args.sample), cfg.n_fine, 1, cfg.t_end)
    dws = aggregate_increments(fabric, 2 ** (cfg.fine_exponent - k))[:, 0]
    n_steps = len(dws) if args.steps is None else args.steps
    if n_steps < 0 or n_steps > len(dws):
        raise SpecError(f"--steps must lie in 0..{len(dws)}")
    _warn_gates(cfg)
    print(f"{'step':>6} {'t':>12} {'x':>24} {'dW':>24} {'iters':>6} {'residual':>12} method")
    x = model.initial_state()
    s, p = cfg.scheme, cfg.model_params
    for n in range(n_steps):
        dw = float(dws[n])
        iters, resid, method = 0, 0.0, "explicit"
        try:
            if cfg.method == "euler-maruyama":
                x = step_euler_maruyama(model, StepContext.commutative(x, h, [dw]))
            elif cfg.method == "backward-euler":
                x = step_backward_euler(model, s, StepContext.commutative(x, h, [dw]))
                method = "implicit"
            elif cfg.model == "heston32" and s.theta == 1.0 and s.eta == 1.0:
                y, rep = heston32_closed_form_step(p, float(x[0]), h, dw)
                x, iters, resid, method = np.array([y]), rep.iterations, rep.final_residual, rep.method
            elif cfg.model == "ait-sahalia" and s.theta == 1.0 and s.eta == 0.0:
                y, rep = ait_sahalia_implicit_step(p, float(x[0]), h, dw, s)
                x, iters, resid, method = np.array([y]), rep.iterations, rep.final_residual, rep.method
            else:
                x, rep = implicit_step(model, s, StepContext.commutative(x, h, [dw]))
                iters, resid, method = rep.iterations, rep.final_residual, rep.method
        except (SolveError, DomainError) as exc:
            print(f"error: step {n}: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        print(f"{n + 1:>6d} {(n + 1) * h:>12.6g} {x[0]:>24.17g} {dw:>24.17g} {iters:>6d} "
              f"{resid:>12.3e} {method}")
    return EXIT_OK


def cmd_positivity(args) -> int:
    spec = _load(args.spec)
    cfg = spec.config
    if not cfg.dynamics().positive_domain:
        raise ArgumentError(f"model {cfg.model!r} has a whole-line domain; positivity is undefined")
    _warn_gates(cfg)
    frac = positivity_audit(cfg, workers=args.workers)
    print(f"positivity={frac:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdeconv", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a coupled convergence study and fit the rate")
    run.add_argument("--spec", required=True)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--out", help="CSV destination ('-' for stdout); overrides the spec")
    run.set_defaults(func=cmd_run)

    trace = sub.add_parser("trace", help="print the per-step states of one sample")
    trace.add_argument("--spec", required=True)
    trace.add_argument("--steps", type=int)
    trace.add_argument("--sample", type=int, default=0)
    trace.add_argument("--h", type=parse_number, help="stepsize (default: coarsest in the spec)")
    trace.set_defaults(func=cmd_trace)

    pos = sub.add_parser("positivity", help="fraction of strictly positive coarse states")
    pos.add_argument("--spec", required=True)
    pos.add_argument("--workers", type=int, default=1)
    pos.set_defaults(func=cmd_positivity)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SolveError as exc:
        where = ""
        if exc.sample_id is not None:
            where = f" (sample {exc.sample_id}, step {exc.step_index})"
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_SOLVER
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
