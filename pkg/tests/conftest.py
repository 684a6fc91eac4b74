"""Configuration for pytest tests."""

import numpy as np
import pytest

from model_uncertainty.estimation import MeasurementTensor, SensorLayout
from model_uncertainty.metrics import get_solver_monitor
from model_uncertainty.model import InputSchedule, StateEquationModel, solve_schedule
from model_uncertainty.press import assemble_quasistatic, default_surrogate


class LinearSpring(StateEquationModel):
    """E = k y - q observed directly; y = q / k."""

    analytic = frozenset(
        {"equation_dy", "equation_dp", "observation_dy", "observation_dp"}
    )

    def __init__(self):
        super().__init__(d_y=1, n_p=1, d_q=1, n_s=1, parameter_names=["k"])

    @property
    def lower_bounds(self):
        return np.zeros(1)

    def equation(self, y, p, q):
        return p[0] * y - q

    def observation(self, y, p, q):
        return y.copy()

    def equation_dy(self, y, p, q):
        return np.array([[p[0]]])

    def equation_dp(self, y, p, q):
        return np.array([[y[0]]])

    def observation_dy(self, y, p, q):
        return np.ones((1, 1))

    def observation_dp(self, y, p, q):
        return np.zeros((1, 1))


class CubicSpring(StateEquationModel):
    """E = a y^3 + y - q observed directly; finite-difference oracles only."""

    def __init__(self):
        super().__init__(d_y=1, n_p=1, d_q=1, n_s=1, parameter_names=["a"])

    @property
    def lower_bounds(self):
        return np.zeros(1)

    def equation(self, y, p, q):
        return p[0] * y**3 + y - q

    def observation(self, y, p, q):
        return y.copy()


class TwoSprings(StateEquationModel):
    """Two independent springs under one load, read as y1, y2 and y1 + y2."""

    def __init__(self):
        super().__init__(
            d_y=2,
            n_p=2,
            d_q=1,
            n_s=3,
            parameter_names=["k1", "k2"],
            sensor_names=["first", "second", "sum"],
        )

    @property
    def lower_bounds(self):
        return np.zeros(2)

    def equation(self, y, p, q):
        return p * y - q[0]

    def observation(self, y, p, q):
        return np.array([y[0], y[1], y[0] + y[1]])


def _model_tensor(model, p, schedule, sigma, n_m, seed, noise=1.0):
    """Model outputs at p plus Gaussian noise, without friction or jitter."""
    layout = SensorLayout(sigma=np.asarray(sigma, dtype=float))
    p = np.asarray(p, dtype=float)
    states = solve_schedule(model, p, schedule.inputs).states
    clean = np.array(
        [model.observation(y, p, q) for y, q in zip(states, schedule.inputs)]
    )
    rng = np.random.default_rng(seed)
    z = clean[None] + noise * rng.standard_normal((n_m, *clean.shape)) * layout.sigma
    return MeasurementTensor(z=z, schedule=schedule, layout=layout)


@pytest.fixture
def make_tensor():
    """Factory for synthetic tensors of a toy model; noise=0 gives exact data."""
    return _model_tensor


@pytest.fixture
def linear_spring():
    return LinearSpring()


@pytest.fixture
def cubic_spring():
    return CubicSpring()


@pytest.fixture
def two_springs():
    return TwoSprings()


@pytest.fixture
def ramp():
    """Demonstration schedule: 15 loading and 14 unloading setpoints."""
    return InputSchedule.loading_ramp(2000.0)


@pytest.fixture
def small_ramp():
    return InputSchedule.loading_ramp(4.0, n_loading=5, n_unloading=4)


@pytest.fixture
def press_model():
    return assemble_quasistatic(default_surrogate())


@pytest.fixture
def press_sigma():
    return np.array([1.518e-05, 4.895e-06, 3.904e-06])


@pytest.fixture
def press_p_true():
    return np.array([2.0e6, 4.0e6])


@pytest.fixture(autouse=True)
def reset_solver_monitor():
    """Start every test with zeroed solver counters."""
    get_solver_monitor().reset()
    yield


# Configure pytest markers
def pytest_configure(config):
    """Configure custom pytest markers."""
    config.addinivalue_line("markers", "unit: mark test as a unit test")
    config.addinivalue_line("markers", "integration: mark test as an integration test")
    config.addinivalue_line("markers", "slow: mark test as slow running")
