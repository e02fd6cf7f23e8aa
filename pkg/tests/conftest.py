import numpy as np
import pytest

from sdeconv.core import ModelDynamics


def linear_model(lam: float, sigma: float = 0.0) -> ModelDynamics:
    """``dX = lam X dt + sigma X dW`` with every optional map supplied."""
    return ModelDynamics(
        name="linear", state_dim=1, noise_dim=1,
        drift=lambda x: lam * x,
        diffusion=lambda x: np.array([[sigma * x[0]]]),
        levy=lambda x, j1, j2: np.array([sigma * sigma * x[0]]),
        drift_jacobian=lambda x: np.array([[lam]]),
        diffusion_jacobian=lambda x, j: np.array([[sigma]]),
        levy_trace_jacobian=lambda x: np.array([[sigma * sigma]]),
        commutative=True, x0=(1.0,),
    )


def zero_model(d: int = 1, m: int = 1) -> ModelDynamics:
    return ModelDynamics(
        name="zero", state_dim=d, noise_dim=m,
        drift=lambda x: np.zeros(d),
        diffusion=lambda x: np.zeros((d, m)),
        commutative=True,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
