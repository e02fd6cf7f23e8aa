import math

import numpy as np
import pytest

from sdeconv import accel
from sdeconv.core import SchemeParams
from sdeconv.errors import DomainError, SolveError
from sdeconv.models import REGISTRY, build_model
from sdeconv.schemes import (StepContext, heston32_closed_form_step, implicit_step,
                             step_backward_euler, step_euler_maruyama)

SCHEMES = [
    accel.KernelScheme(1.0, 1.0),
    accel.KernelScheme(1.0, 0.0),
    accel.KernelScheme(0.5, 0.5),
    accel.KernelScheme(0.0, 1.0),
    accel.KernelScheme(1.0, 0.0, milstein=False),
]


def _paths(seed, n_samples, n_steps, h):
    return np.random.default_rng(seed).standard_normal((n_samples, n_steps)) * math.sqrt(h)


# explicit drift can leave (0, inf) on the positive models; the status test covers that
_AGREE_CASES = [(n, s) for n in sorted(REGISTRY) for s in SCHEMES
                if not (n in ("heston32", "ait-sahalia") and s.theta == 0.0)]


@pytest.mark.parametrize("name,scheme", _AGREE_CASES, ids=str)
def test_backends_agree(name, scheme):
    model = build_model(name)
    h = 2 ** -6
    dw = _paths(3, 64, 64, h)
    a = accel.simulate(model.kernel, model.x0[0], dw, h, scheme, model.positive_domain,
                       store_path=True, backend="numba")
    b = accel.simulate(model.kernel, model.x0[0], dw, h, scheme, model.positive_domain,
                       store_path=True, backend="numpy")
    assert np.array_equal(a.status, b.status)
    ok = a.status == accel.OK
    assert ok.all()
    assert np.allclose(a.path, b.path, rtol=1e-12, atol=1e-14)
    assert np.array_equal(a.n_positive, b.n_positive)
    assert np.all(a.max_residual <= 1e-12 * (1 + np.abs(a.path).max(axis=1)))


def test_explicit_escape_status_matches():
    model = build_model("heston32")
    h = 0.2
    dw = np.full((4, 3), -1 / (1.5 * math.sqrt(10.0)))
    scheme = accel.KernelScheme(0.0, 0.0)
    a = accel.simulate(model.kernel, 10.0, dw, h, scheme, True, backend="numba")
    b = accel.simulate(model.kernel, 10.0, dw, h, scheme, True, backend="numpy")
    assert np.all(a.status == accel.DOMAIN_ESCAPE)
    assert np.array_equal(a.status, b.status) and np.array_equal(a.fail_step, b.fail_step)


def _reference_step(model, name, params, scheme, x, h, dw):
    ctx = StepContext.commutative(x, h, dw)
    if not scheme.milstein:
        if scheme.theta == 0.0:
            return step_euler_maruyama(model, ctx)[0]
        return step_backward_euler(model, params, ctx)[0]
    if name == "heston32" and scheme.theta == 1.0 and scheme.eta == 1.0:
        return heston32_closed_form_step(REGISTRY[name].params_type(), x, h, dw)[0]
    return implicit_step(model, params, ctx)[0][0]


@pytest.mark.parametrize("backend", ["numba", "numpy"])
@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_kernel_matches_reference_steppers(name, backend, rng):
    model = build_model(name)
    schemes = SCHEMES + [accel.KernelScheme(0.0, 0.0, milstein=False)]
    lo, hi = (0.2, 2.0) if model.positive_domain else (-1.5, 1.5)
    n = 40
    x = rng.uniform(lo, hi, n)
    h = rng.uniform(1e-3, 0.05, n)
    dw = rng.normal(0, 1, n) * np.sqrt(h)
    for scheme in schemes:
        y, resid, status = accel.step_batch(model.kernel, x, h, dw, scheme,
                                            model.positive_domain, backend=backend)
        params = SchemeParams(scheme.theta, scheme.eta)
        for i in range(n):
            try:
                want = _reference_step(model, name, params, scheme, x[i], h[i], dw[i])
            except (SolveError, DomainError):
                assert status[i] != accel.OK
                continue
            assert status[i] == accel.OK
            assert abs(y[i] - want) <= 1e-12 * (1 + abs(want)), (scheme, x[i], h[i], dw[i])


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("SDECONV_DISABLE_NUMBA", "1")
    assert not accel.numba_enabled()
    monkeypatch.setenv("SDECONV_DISABLE_NUMBA", "0")
    assert accel.numba_enabled() == accel.HAVE_NUMBA


def test_bad_backend():
    model = build_model("gbm")
    with pytest.raises(ValueError):
        accel.simulate(model.kernel, 1.0, np.zeros((1, 2)), 0.1, SCHEMES[0], False, backend="gpu")
