"""
Implicit state equation models.

A model couples a state y to parameters p under an input q through
E(y, p, q) = 0 and maps the state to sensor readings with an observation
operator h(y, p, q). This module solves the state equation and provides
first and second order state sensitivities by the implicit function theorem.
"""

from __future__ import annotations

import abc
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import (
    DimensionMismatch,
    InvalidModel,
    NonConvergence,
    NonFiniteValue,
    SingularJacobian,
)
from .logging import get_logger
from .metrics import get_solver_monitor

logger = get_logger(__name__)

Array = NDArray[np.float64]


def fd_step(x: ArrayLike) -> Array:
    """Central difference step h = max(1e-6, 1e-6 |x|) per coordinate."""
    return np.maximum(1e-6, 1e-6 * np.abs(np.asarray(x, dtype=float)))


def numerical_jacobian(func: Callable[[Array], Array], x: Array) -> Array:
    """Central difference Jacobian of ``func`` at ``x``, one column per coordinate."""
    steps = fd_step(x)
    columns = []
    for i, h in enumerate(steps):
        shift = np.zeros_like(x)
        shift[i] = h
        columns.append((func(x + shift) - func(x - shift)) / (2.0 * h))
    return np.stack(columns, axis=-1)


def _directional_fd(
    func: Callable[[float], Array], direction: Array, base: Array
) -> Array:
    scale = float(np.max(np.abs(direction)))
    if scale == 0.0:
        return np.zeros_like(func(0.0))
    t = float(fd_step(np.max(np.abs(base)) if base.size else 0.0)) / scale
    return (func(t) - func(-t)) / (2.0 * t)


def _frozen(values: ArrayLike, ndim: int | None = None) -> Array:
    array = np.array(values, dtype=float)
    if ndim == 2 and array.ndim == 1:
        array = array[:, None]
    array.setflags(write=False)
    return array


class StateEquationModel(abc.ABC):
    """
    Differentiable implicit model E(y, p, q) = 0 with observation h(y, p, q).

    Subclasses implement ``equation`` and ``observation``. Every derivative
    oracle falls back to central finite differences; override it with an
    analytic expression and set the matching flag in ``analytic`` when one
    exists. Instances are read-only after construction so one model can be
    shared between threads.

    Second derivatives are exposed as bilinear contractions: ``equation_dyy``
    returns sum_ij d2E/dy_i dy_j a_i b_j, ``equation_dyp`` takes a state
    direction ``a`` and a parameter direction ``b``.
    """

    analytic: frozenset[str] = frozenset()

    def __init__(
        self,
        d_y: int,
        n_p: int,
        d_q: int,
        n_s: int,
        d_e: int | None = None,
        parameter_names: Sequence[str] | None = None,
        sensor_names: Sequence[str] | None = None,
    ):
        d_e = d_y if d_e is None else d_e
        if min(d_y, n_p, d_q, n_s) < 1:
            raise InvalidModel(
                "Model dimensions must be positive", d_y=d_y, n_p=n_p, d_q=d_q, n_s=n_s
            )
        if d_e != d_y:
            raise InvalidModel(
                "State equation must be square (d_E = d_y)", d_e=d_e, d_y=d_y
            )
        self.d_y = d_y
        self.d_e = d_e
        self.n_p = n_p
        self.d_q = d_q
        self.n_s = n_s
        self.parameter_names = tuple(
            parameter_names or (f"p{i + 1}" for i in range(n_p))
        )
        self.sensor_names = tuple(sensor_names or (f"s{k + 1}" for k in range(n_s)))
        if len(self.parameter_names) != n_p or len(self.sensor_names) != n_s:
            raise InvalidModel("Name lists do not match model dimensions")

    @property
    def lower_bounds(self) -> Array:
        """Lower bounds for admissible parameters."""
        return np.full(self.n_p, -np.inf)

    @abc.abstractmethod
    def equation(self, y: Array, p: Array, q: Array) -> Array:
        """Evaluate the residual E(y, p, q) of length d_E."""

    @abc.abstractmethod
    def observation(self, y: Array, p: Array, q: Array) -> Array:
        """Evaluate the sensor readings h(y, p, q) of length n_S."""

    # State equation derivatives

    def equation_dy(self, y: Array, p: Array, q: Array) -> Array:
        return numerical_jacobian(lambda v: self.equation(v, p, q), y)

    def equation_dp(self, y: Array, p: Array, q: Array) -> Array:
        return numerical_jacobian(lambda v: self.equation(y, v, q), p)

    def equation_dyy(self, y: Array, p: Array, q: Array, a: Array, b: Array) -> Array:
        return _directional_fd(lambda t: self.equation_dy(y + t * b, p, q) @ a, b, y)

    def equation_dyp(self, y: Array, p: Array, q: Array, a: Array, b: Array) -> Array:
        return _directional_fd(lambda t: self.equation_dy(y, p + t * b, q) @ a, b, p)

    def equation_dpp(self, y: Array, p: Array, q: Array, a: Array, b: Array) -> Array:
        return _directional_fd(lambda t: self.equation_dp(y, p + t * b, q) @ a, b, p)

    # Observation derivatives

    def observation_dy(self, y: Array, p: Array, q: Array) -> Array:
        return numerical_jacobian(lambda v: self.observation(v, p, q), y)

    def observation_dp(self, y: Array, p: Array, q: Array) -> Array:
        return numerical_jacobian(lambda v: self.observation(y, v, q), p)

    def observation_dyy(
        self, y: Array, p: Array, q: Array, a: Array, b: Array
    ) -> Array:
        return _directional_fd(
            lambda t: self.observation_dy(y + t * b, p, q) @ a, b, y
        )

    def observation_dyp(
        self, y: Array, p: Array, q: Array, a: Array, b: Array
    ) -> Array:
        return _directional_fd(
            lambda t: self.observation_dy(y, p + t * b, q) @ a, b, p
        )

    def observation_dpp(
        self, y: Array, p: Array, q: Array, a: Array, b: Array
    ) -> Array:
        return _directional_fd(
            lambda t: self.observation_dp(y, p + t * b, q) @ a, b, p
        )


class Phase(str, Enum):
    """Direction of the applied input within a schedule."""

    LOADING = "loading"
    UNLOADING = "unloading"


@dataclass(frozen=True)
class InputSchedule:
    """
    Ordered inputs q_1..q_nq with phase tags and optional setpoints.

    ``inputs`` are the values fed into the state equation. ``setpoints`` are
    the nominal applied values; for friction models the two differ.
    """

    inputs: Array
    phases: tuple[Phase, ...]
    setpoints: Array | None = None

    def __post_init__(self) -> None:
        inputs = _frozen(self.inputs, ndim=2)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise DimensionMismatch("Schedule needs at least one input")
        phases = tuple(Phase(p) for p in self.phases)
        if len(phases) != inputs.shape[0]:
            raise DimensionMismatch(
                "Phase tags must match inputs",
                n_q=inputs.shape[0],
                n_phases=len(phases),
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "phases", phases)
        if self.setpoints is not None:
            setpoints = _frozen(self.setpoints, ndim=2)
            if setpoints.shape != inputs.shape:
                raise DimensionMismatch(
                    "Setpoints must match inputs",
                    inputs=inputs.shape,
                    setpoints=setpoints.shape,
                )
            object.__setattr__(self, "setpoints", setpoints)

    @property
    def n_q(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def d_q(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def nominal(self) -> Array:
        """Setpoints when present, otherwise the inputs."""
        return self.setpoints if self.setpoints is not None else self.inputs

    @property
    def turning_point(self) -> int | None:
        """Index of the last loading input before unloading starts."""
        for j in range(1, self.n_q):
            if (
                self.phases[j] is Phase.UNLOADING
                and self.phases[j - 1] is Phase.LOADING
            ):
                return j - 1
        return None

    def with_inputs(self, inputs: ArrayLike) -> InputSchedule:
        """Return a schedule with new model inputs and unchanged setpoints."""
        return InputSchedule(
            inputs=np.asarray(inputs, dtype=float),
            phases=self.phases,
            setpoints=self.nominal,
        )

    @classmethod
    def from_setpoints(cls, setpoints: ArrayLike) -> InputSchedule:
        """
        Build a loading/unloading schedule from scalar setpoints.

        Inputs up to and including the first maximum are tagged loading,
        the rest unloading.
        """
        values = np.asarray(setpoints, dtype=float).reshape(-1)
        peak = int(np.argmax(values))
        phases = tuple(
            Phase.LOADING if j <= peak else Phase.UNLOADING
            for j in range(values.size)
        )
        return cls(inputs=values, phases=phases, setpoints=values)

    @classmethod
    def loading_ramp(
        cls, peak: float, n_loading: int = 15, n_unloading: int = 14
    ) -> InputSchedule:
        """
        Equidistant ramp from zero to ``peak`` and back to zero.

        ``n_loading`` setpoints rise from 0 to the peak, ``n_unloading``
        setpoints fall from one step below the peak to 0.
        """
        if n_loading < 2 or n_unloading < 1:
            raise DimensionMismatch(
                "Ramp needs at least two loading and one unloading step"
            )
        up = np.linspace(0.0, peak, n_loading)
        down = np.linspace(peak, 0.0, n_unloading + 1)[1:]
        return cls.from_setpoints(np.concatenate([up, down]))


@dataclass(frozen=True)
class NewtonOptions:
    """
    Damped Newton settings for the state solve.

    With ``relative`` set, ``tol`` is scaled by max(1, ||E(0, p, q)||);
    otherwise it bounds ||E(y, p, q)|| directly. Stiff models with large
    loads cannot reach an absolute 1e-10 in double precision.
    """

    tol: float = 1e-10
    max_iter: int = 100
    cond_cap: float = 1e12
    min_step: float = 2.0**-20
    relative: bool = True


@dataclass(frozen=True)
class StateSolution:
    """States y_j for a sequence of inputs with solver diagnostics."""

    states: Array
    residual_norms: Array
    iterations: tuple[int, ...] = field(default_factory=tuple)

    @property
    def n_q(self) -> int:
        return int(self.states.shape[0])


def check_jacobian(jac: Array, cond_cap: float, **context: object) -> None:
    """Raise SingularJacobian unless ``jac`` is finite and well conditioned."""
    if not np.all(np.isfinite(jac)):
        raise SingularJacobian("State Jacobian has non-finite entries", **context)
    condition = float(np.linalg.cond(jac))
    if not np.isfinite(condition) or condition > cond_cap:
        raise SingularJacobian(
            "State Jacobian is singular", condition=condition, **context
        )


def _as_vector(values: ArrayLike, size: int, name: str) -> Array:
    array = np.asarray(values, dtype=float).reshape(-1)
    if array.size != size:
        raise DimensionMismatch(f"{name} has wrong length", expected=size, got=array.size)
    if not np.all(np.isfinite(array)):
        raise NonFiniteValue(f"{name} must be finite")
    return array


def _newton(
    model: StateEquationModel,
    p: Array,
    q: Array,
    y0: Array,
    options: NewtonOptions,
) -> tuple[Array, float, int]:
    tol = options.tol
    if options.relative:
        # Scaled by the residual of the unloaded state
        load = float(np.linalg.norm(model.equation(np.zeros_like(y0), p, q)))
        tol *= max(1.0, load)
    y = y0.copy()
    residual = model.equation(y, p, q)
    norm = float(np.linalg.norm(residual))

    for iteration in range(options.max_iter + 1):
        if norm <= tol:
            return y, norm, iteration
        if iteration == options.max_iter:
            break

        jac = model.equation_dy(y, p, q)
        check_jacobian(jac, options.cond_cap, iteration=iteration)
        step = np.linalg.solve(jac, -residual)

        # Backtrack until the residual norm decreases sufficiently
        t = 1.0
        while True:
            trial = y + t * step
            trial_residual = model.equation(trial, p, q)
            trial_norm = float(np.linalg.norm(trial_residual))
            if np.isfinite(trial_norm) and trial_norm <= (1.0 - 1e-4 * t) * norm:
                break
            if t <= options.min_step:
                break
            t *= 0.5

        y, residual, norm = trial, trial_residual, trial_norm

    raise NonConvergence(
        "State solve hit the Newton iteration limit",
        max_iter=options.max_iter,
        residual_norm=norm,
    )


def solve_state(
    model: StateEquationModel,
    p: ArrayLike,
    q: ArrayLike,
    y0: ArrayLike | None = None,
    options: NewtonOptions | None = None,
) -> Array:
    """
    Solve E(y, p, q) = 0 for y by damped Newton with backtracking.

    Args:
        model: State equation model
        p: Parameters
        q: Input
        y0: Initial guess (zeros when omitted)
        options: Newton settings

    Returns:
        State y with ||E(y, p, q)|| <= tol, scaled by max(1, ||E(0, p, q)||)
        for relative options

    Raises:
        NonConvergence: Newton iteration limit reached
        SingularJacobian: dE/dy not invertible at an iterate
    """
    options = options or NewtonOptions()
    p_vec = _as_vector(p, model.n_p, "p")
    q_vec = _as_vector(q, model.d_q, "q")
    start = np.zeros(model.d_y) if y0 is None else _as_vector(y0, model.d_y, "y0")
    y, _, iterations = _newton(model, p_vec, q_vec, start, options)
    get_solver_monitor().record_state_solve(iterations)
    return y


def solve_schedule(
    model: StateEquationModel,
    p: ArrayLike,
    inputs: ArrayLike,
    y0: ArrayLike | None = None,
    options: NewtonOptions | None = None,
) -> StateSolution:
    """
    Solve the state equation for a sequence of inputs.

    Each solve starts from the state of the previous input.
    """
    options = options or NewtonOptions()
    p_vec = _as_vector(p, model.n_p, "p")
    q_rows = np.asarray(inputs, dtype=float).reshape(-1, model.d_q)
    current = np.zeros(model.d_y) if y0 is None else _as_vector(y0, model.d_y, "y0")
    monitor = get_solver_monitor()

    states = np.empty((q_rows.shape[0], model.d_y))
    norms = np.empty(q_rows.shape[0])
    counts = []
    for j, q in enumerate(q_rows):
        try:
            current, norms[j], iterations = _newton(model, p_vec, q, current, options)
        except (NonConvergence, SingularJacobian) as exc:
            exc.context.setdefault("input_index", j)
            raise
        monitor.record_state_solve(iterations)
        states[j] = current
        counts.append(iterations)

    logger.debug(
        "Schedule solved", n_inputs=q_rows.shape[0], newton_iterations=sum(counts)
    )
    return StateSolution(states=states, residual_norms=norms, iterations=tuple(counts))


def state_sensitivity(
    model: StateEquationModel,
    p: ArrayLike,
    q: ArrayLike,
    y: ArrayLike,
    cond_cap: float = 1e12,
) -> Array:
    """
    First order state sensitivity y'(p) = -(dE/dy)^-1 dE/dp.

    Returns:
        Matrix of shape (d_y, n_p)
    """
    p_vec = np.asarray(p, dtype=float)
    q_vec = np.asarray(q, dtype=float)
    y_vec = np.asarray(y, dtype=float)
    jac_y = model.equation_dy(y_vec, p_vec, q_vec)
    check_jacobian(jac_y, cond_cap)
    return -np.linalg.solve(jac_y, model.equation_dp(y_vec, p_vec, q_vec))


def state_second_directional(
    model: StateEquationModel,
    p: ArrayLike,
    q: ArrayLike,
    y: ArrayLike,
    h1: ArrayLike,
    h2: ArrayLike,
    sensitivity: Array | None = None,
    cond_cap: float = 1e12,
) -> Array:
    """
    Second directional derivative y''(p)(h1; h2).

    Evaluates -(dE/dy)^-1 [E_yy(y'h1, y'h2) + E_yp(y'h1, h2) + E_yp(y'h2, h1)
    + E_pp(h1, h2)]. The mixed term is the polarized form of 2 E_yp(y'h1, h2)
    and coincides with it for h1 = h2; the bilinear terms are averaged over
    both argument orders so the result is exactly symmetric in (h1, h2).

    Args:
        sensitivity: Precomputed y'(p), recomputed when omitted
    """
    p_vec = np.asarray(p, dtype=float)
    q_vec = np.asarray(q, dtype=float)
    y_vec = np.asarray(y, dtype=float)
    d1 = np.asarray(h1, dtype=float)
    d2 = np.asarray(h2, dtype=float)

    jac_y = model.equation_dy(y_vec, p_vec, q_vec)
    check_jacobian(jac_y, cond_cap)
    if not np.any(d1) or not np.any(d2):
        return np.zeros(model.d_y)
    if sensitivity is None:
        sensitivity = -np.linalg.solve(jac_y, model.equation_dp(y_vec, p_vec, q_vec))

    a1 = sensitivity @ d1
    a2 = sensitivity @ d2
    e_yy = 0.5 * (
        model.equation_dyy(y_vec, p_vec, q_vec, a1, a2)
        + model.equation_dyy(y_vec, p_vec, q_vec, a2, a1)
    )
    e_yp = model.equation_dyp(y_vec, p_vec, q_vec, a1, d2) + model.equation_dyp(
        y_vec, p_vec, q_vec, a2, d1
    )
    e_pp = 0.5 * (
        model.equation_dpp(y_vec, p_vec, q_vec, d1, d2)
        + model.equation_dpp(y_vec, p_vec, q_vec, d2, d1)
    )
    return -np.linalg.solve(jac_y, e_yy + e_yp + e_pp)


def _relative_error(value: Array, reference: Array) -> float:
    scale = float(np.linalg.norm(reference))
    diff = float(np.linalg.norm(np.asarray(value) - np.asarray(reference)))
    if scale == 0.0:
        return diff
    return diff / scale


def check_derivatives(
    model: StateEquationModel,
    y: ArrayLike,
    p: ArrayLike,
    q: ArrayLike,
    seed: int = 0,
) -> dict[str, float]:
    """
    Compare the model's derivative oracles with central differences.

    First derivatives are differenced from ``equation``/``observation``,
    second derivatives from the model's own first derivative oracles along
    random unit directions.

    Returns:
        Relative error per oracle name
    """
    rng = np.random.default_rng(seed)
    y_vec = np.asarray(y, dtype=float)
    p_vec = np.asarray(p, dtype=float)
    q_vec = np.asarray(q, dtype=float)
    a_y = rng.standard_normal(model.d_y)
    b_y = rng.standard_normal(model.d_y)
    a_p = rng.standard_normal(model.n_p)
    b_p = rng.standard_normal(model.n_p)
    base = StateEquationModel

    errors = {
        "equation_dy": _relative_error(
            model.equation_dy(y_vec, p_vec, q_vec),
            base.equation_dy(model, y_vec, p_vec, q_vec),
        ),
        "equation_dp": _relative_error(
            model.equation_dp(y_vec, p_vec, q_vec),
            base.equation_dp(model, y_vec, p_vec, q_vec),
        ),
        "equation_dyy": _relative_error(
            model.equation_dyy(y_vec, p_vec, q_vec, a_y, b_y),
            base.equation_dyy(model, y_vec, p_vec, q_vec, a_y, b_y),
        ),
        "equation_dyp": _relative_error(
            model.equation_dyp(y_vec, p_vec, q_vec, a_y, b_p),
            base.equation_dyp(model, y_vec, p_vec, q_vec, a_y, b_p),
        ),
        "equation_dpp": _relative_error(
            model.equation_dpp(y_vec, p_vec, q_vec, a_p, b_p),
            base.equation_dpp(model, y_vec, p_vec, q_vec, a_p, b_p),
        ),
        "observation_dy": _relative_error(
            model.observation_dy(y_vec, p_vec, q_vec),
            base.observation_dy(model, y_vec, p_vec, q_vec),
        ),
        "observation_dp": _relative_error(
            model.observation_dp(y_vec, p_vec, q_vec),
            base.observation_dp(model, y_vec, p_vec, q_vec),
        ),
        "observation_dyy": _relative_error(
            model.observation_dyy(y_vec, p_vec, q_vec, a_y, b_y),
            base.observation_dyy(model, y_vec, p_vec, q_vec, a_y, b_y),
        ),
        "observation_dyp": _relative_error(
            model.observation_dyp(y_vec, p_vec, q_vec, a_y, b_p),
            base.observation_dyp(model, y_vec, p_vec, q_vec, a_y, b_p),
        ),
        "observation_dpp": _relative_error(
            model.observation_dpp(y_vec, p_vec, q_vec, a_p, b_p),
            base.observation_dpp(model, y_vec, p_vec, q_vec, a_p, b_p),
        ),
    }
    logger.debug("Derivative oracles checked", **errors)
    return errors
