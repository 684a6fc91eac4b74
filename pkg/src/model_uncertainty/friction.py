"""
Friction models for the process force.

The structure feels q = q_P - q_fric, where q_P is the applied process force
and q_fric the friction force in the drive. Candidate models are no
friction, Coulomb friction, and a continuous memory model built from arctan
units over the running force extrema. Friction is trained on residual
forces obtained by inverting a frictionless structural model.
"""

from __future__ import annotations

import abc
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike

from .estimation import MeasurementTensor, SensorLayout
from .exceptions import (
    DegenerateTraining,
    DomainError,
    NegativeInput,
    NonConvergence,
    UninitializedState,
    UntrainedModel,
)
from .logging import get_logger
from .model import (
    Array,
    InputSchedule,
    StateEquationModel,
    numerical_jacobian,
    solve_state,
)

logger = get_logger(__name__)

MemoryVariant = Literal["literal", "corrected"]
DEFAULT_SCALINGS = tuple(float(s) for s in np.geomspace(0.25, 32.0, 8))


def force_rates(forces: ArrayLike, timestamps: ArrayLike | None = None) -> Array:
    """
    Rate dq/dt of a force history; the first sample has rate zero.

    Raises:
        DomainError: timestamps are not strictly increasing
    """
    q = np.asarray(forces, dtype=float).reshape(-1)
    t = np.arange(q.size, dtype=float) if timestamps is None else np.asarray(
        timestamps, dtype=float
    ).reshape(-1)
    if t.size != q.size:
        raise DomainError("Timestamps must match forces", forces=q.size, timestamps=t.size)
    dt = np.diff(t)
    if np.any(dt <= 0.0):
        raise DomainError("Timestamps must be strictly increasing")
    return np.concatenate([[0.0], np.diff(q) / dt])


def coulomb_friction(q_c: float, rate_sign: float) -> float:
    """Coulomb friction q_c * sign(rate) with sign(0) = 0."""
    if q_c < 0.0:
        raise NegativeInput("Coulomb force must be nonnegative", q_c=q_c)
    return q_c * float(np.sign(rate_sign))


@dataclass(frozen=True)
class MemoryState:
    """Running force minimum and maximum with the previous force."""

    q_min: float
    q_max: float
    q_prev: float

    @classmethod
    def initial(cls, q0: float) -> MemoryState:
        return cls(q_min=q0, q_max=q0, q_prev=q0)


def memory_update(
    state: MemoryState | None,
    q_p: float,
    rate_sign: float,
    variant: MemoryVariant = "literal",
) -> MemoryState:
    """
    Advance the force memory by one sample.

    While loading the minimum is kept and the maximum follows the force.
    While unloading the minimum follows the force; the maximum becomes
    min(q_P, q_max) in the literal variant and max(q_P, q_max) in the
    corrected variant, which keeps the last turning point.

    Raises:
        UninitializedState: no state to update
    """
    if state is None:
        raise UninitializedState("Memory state must be initialized before updating")
    if rate_sign >= 0.0:
        return MemoryState(q_min=min(q_p, state.q_min), q_max=q_p, q_prev=q_p)
    if variant == "literal":
        q_max = min(q_p, state.q_max)
    elif variant == "corrected":
        q_max = max(q_p, state.q_max)
    else:
        raise DomainError("Unknown memory variant", variant=variant)
    return MemoryState(q_min=q_p, q_max=q_max, q_prev=q_p)


def memory_trajectory(
    forces: ArrayLike,
    timestamps: ArrayLike | None = None,
    variant: MemoryVariant = "literal",
) -> list[MemoryState]:
    """Memory state after each sample of a force history."""
    q = np.asarray(forces, dtype=float).reshape(-1)
    rates = force_rates(q, timestamps)
    state: MemoryState | None = MemoryState.initial(float(q[0]))
    states = []
    for value, rate in zip(q, rates):
        state = memory_update(state, float(value), float(rate), variant)
        states.append(state)
    return states


class FrictionModel(abc.ABC):
    """Friction force as a function of the process force history."""

    name: str = "friction"

    @abc.abstractmethod
    def forces(self, q_p: ArrayLike, timestamps: ArrayLike | None = None) -> Array:
        """Friction force for every sample of the history."""

    def effective_schedule(self, schedule: InputSchedule) -> InputSchedule:
        """Schedule whose inputs are q_P - q_fric along the setpoints."""
        q_p = schedule.nominal[:, 0]
        return schedule.with_inputs(q_p - self.forces(q_p))

    def apply(self, tensor: MeasurementTensor) -> MeasurementTensor:
        """Measurement tensor with friction-reduced model inputs."""
        return MeasurementTensor(
            z=tensor.z,
            schedule=self.effective_schedule(tensor.schedule),
            layout=tensor.layout,
            realized=tensor.realized,
            mask=tensor.mask,
        )

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name}


class NoFriction(FrictionModel):
    """Frictionless drive."""

    name = "none"

    def forces(self, q_p: ArrayLike, timestamps: ArrayLike | None = None) -> Array:
        return np.zeros(np.asarray(q_p).size)


@dataclass(frozen=True)
class CoulombFriction(FrictionModel):
    """Constant friction force opposing the direction of loading."""

    q_c: float
    name: str = "coulomb"

    def __post_init__(self) -> None:
        if self.q_c < 0.0:
            raise NegativeInput("Coulomb force must be nonnegative", q_c=self.q_c)

    def forces(self, q_p: ArrayLike, timestamps: ArrayLike | None = None) -> Array:
        return self.q_c * np.sign(force_rates(q_p, timestamps))

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "q_c": self.q_c}


@dataclass(frozen=True)
class ExponentialMemoryFriction(FrictionModel):
    """
    Turning-point friction relaxing exponentially toward +-q_c.

    After each reversal the friction moves from its value at the turning
    point toward q_c (loading) or -q_c (unloading) with force constant
    ``scale``. Used as ground truth for synthetic data.
    """

    q_c: float
    scale: float
    name: str = "exponential_memory"

    def __post_init__(self) -> None:
        if self.q_c < 0.0 or self.scale <= 0.0:
            raise NegativeInput(
                "Friction level must be nonnegative and scale positive",
                q_c=self.q_c,
                scale=self.scale,
            )

    def forces(self, q_p: ArrayLike, timestamps: ArrayLike | None = None) -> Array:
        q = np.asarray(q_p, dtype=float).reshape(-1)
        rates = force_rates(q, timestamps)
        out = np.zeros(q.size)
        direction = 1.0
        q_turn, f_turn, f_prev = float(q[0]), 0.0, 0.0
        for i in range(q.size):
            sign = float(np.sign(rates[i]))
            if sign == 0.0:
                out[i] = f_prev
                continue
            if sign != direction:
                direction = sign
                q_turn, f_turn = float(q[i - 1]), f_prev
            target = direction * self.q_c
            distance = abs(q[i] - q_turn)
            f_prev = target + (f_turn - target) * np.exp(-distance / self.scale)
            out[i] = f_prev
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "q_c": self.q_c, "scale": self.scale}


@dataclass(frozen=True)
class MemoryArctanFriction(FrictionModel):
    """
    Continuous memory friction mu = sum w * arctan(s * u / scale + b) + w0.

    The memory state enters through u = (q, q - q_prev, q - q_min,
    q_max - q), each fed to every arctan unit. Units differ in their input
    scaling ``scalings`` and inner bias ``offsets`` (zero when omitted);
    ``scale`` normalizes forces to the training range. Outputs depend on
    the force sequence alone, never on timing.
    """

    weights: Array | None = None
    bias: float = 0.0
    scale: float = 1.0
    scalings: tuple[float, ...] = DEFAULT_SCALINGS
    offsets: tuple[float, ...] | None = None
    variant: MemoryVariant = "literal"
    name: str = "memory_arctan"

    def __post_init__(self) -> None:
        offsets = (0.0,) * len(self.scalings) if self.offsets is None else self.offsets
        if len(offsets) != len(self.scalings):
            raise DomainError(
                "One offset per arctan unit required",
                units=len(self.scalings),
                offsets=len(offsets),
            )
        object.__setattr__(self, "offsets", tuple(float(b) for b in offsets))

    @property
    def trained(self) -> bool:
        return self.weights is not None

    @staticmethod
    def features(state: MemoryState, q_now: float, q_prev: float) -> Array:
        return np.array(
            [q_now, q_now - q_prev, q_now - state.q_min, state.q_max - q_now]
        )

    def basis(self, features: ArrayLike) -> Array:
        """Arctan unit outputs, one row per sample, unit-major columns."""
        u = np.atleast_2d(np.asarray(features, dtype=float)) / self.scale
        s = np.asarray(self.scalings)[None, :, None]
        b = np.asarray(self.offsets)[None, :, None]
        return np.arctan(s * u[:, None, :] + b).reshape(u.shape[0], -1)

    def evaluate(self, state: MemoryState, q_now: float, q_prev: float) -> float:
        if self.weights is None:
            raise UntrainedModel("Memory friction model has no weights")
        phi = self.basis(self.features(state, q_now, q_prev))[0]
        return float(phi @ self.weights + self.bias)

    def forces(self, q_p: ArrayLike, timestamps: ArrayLike | None = None) -> Array:
        if self.weights is None:
            raise UntrainedModel("Memory friction model has no weights")
        q = np.asarray(q_p, dtype=float).reshape(-1)
        states = memory_trajectory(q, timestamps, self.variant)
        previous = np.concatenate([[q[0]], q[:-1]])
        rows = [self.features(s, float(a), float(b)) for s, a, b in zip(states, q, previous)]
        return self.basis(rows) @ self.weights + self.bias

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "variant": self.variant,
            "scale": self.scale,
            "scalings": list(self.scalings),
            "offsets": list(self.offsets or ()),
            "bias": self.bias,
            "weights": None if self.weights is None else self.weights.tolist(),
        }


def memory_friction(
    model: MemoryArctanFriction, state: MemoryState, q_now: float, q_prev: float
) -> float:
    """Friction force of a trained memory model for one sample."""
    return model.evaluate(state, q_now, q_prev)


@dataclass(frozen=True)
class FrictionSeries:
    """Process forces with the friction residual observed at each sample."""

    forces: Array
    residuals: Array
    timestamps: Array | None = field(default=None)

    def __post_init__(self) -> None:
        forces = np.asarray(self.forces, dtype=float).reshape(-1)
        residuals = np.asarray(self.residuals, dtype=float).reshape(-1)
        if forces.size != residuals.size:
            raise DomainError(
                "Forces and residuals must have equal length",
                forces=forces.size,
                residuals=residuals.size,
            )
        object.__setattr__(self, "forces", forces)
        object.__setattr__(self, "residuals", residuals)

    @property
    def rates(self) -> Array:
        return force_rates(self.forces, self.timestamps)


def _check_training(series: Sequence[FrictionSeries]) -> None:
    if not series:
        raise DegenerateTraining("No training series given")
    for item in series:
        if not np.all(np.isfinite(item.residuals)) or not np.all(np.isfinite(item.forces)):
            raise DegenerateTraining("Training series contain non-finite values")
    has_cycle = any(
        np.any(item.rates > 0.0) and np.any(item.rates < 0.0) for item in series
    )
    if not has_cycle:
        raise DegenerateTraining(
            "Training needs at least one full loading-unloading cycle"
        )


def train_coulomb_friction(series: Sequence[FrictionSeries]) -> CoulombFriction:
    """
    Fit q_c as the mean of sign(rate) * residual over moving samples.

    Negative estimates are clipped to zero.
    """
    _check_training(series)
    signs = np.concatenate([np.sign(item.rates) for item in series])
    residuals = np.concatenate([item.residuals for item in series])
    moving = signs != 0.0
    q_c = max(0.0, float(np.mean(signs[moving] * residuals[moving])))
    logger.info("Coulomb friction trained", q_c=q_c, samples=int(moving.sum()))
    return CoulombFriction(q_c=q_c)


def train_memory_friction(
    series: Sequence[FrictionSeries],
    scalings: Sequence[float] = DEFAULT_SCALINGS,
    variant: MemoryVariant = "literal",
    offsets: Sequence[float] | None = None,
) -> MemoryArctanFriction:
    """
    Fit the output weights of the memory friction model by least squares.

    Unit scalings and offsets stay fixed. Constant residuals give zero
    weights with the constant as bias.

    Raises:
        DegenerateTraining: no full cycle, non-finite data or zero forces
    """
    _check_training(series)
    scale = max(float(np.max(np.abs(item.forces))) for item in series)
    if scale == 0.0:
        raise DegenerateTraining("Training forces are all zero")

    template = MemoryArctanFriction(
        scale=scale,
        scalings=tuple(scalings),
        offsets=None if offsets is None else tuple(offsets),
        variant=variant,
    )
    rows = []
    for item in series:
        states = memory_trajectory(item.forces, item.timestamps, variant)
        previous = np.concatenate([[item.forces[0]], item.forces[:-1]])
        rows.extend(
            template.features(s, float(a), float(b))
            for s, a, b in zip(states, item.forces, previous)
        )
    targets = np.concatenate([item.residuals for item in series])
    phi = template.basis(rows)

    if np.ptp(targets) == 0.0:
        weights = np.zeros(phi.shape[1])
        bias = float(targets[0])
    else:
        design = np.hstack([phi, np.ones((phi.shape[0], 1))])
        solution, *_ = np.linalg.lstsq(design, targets, rcond=None)
        weights, bias = solution[:-1], float(solution[-1])

    model = MemoryArctanFriction(
        weights=weights,
        bias=bias,
        scale=scale,
        scalings=template.scalings,
        offsets=template.offsets,
        variant=variant,
    )
    rms = float(np.sqrt(np.mean((phi @ weights + bias - targets) ** 2)))
    logger.info(
        "Memory friction trained",
        samples=targets.size,
        units=len(scalings),
        training_rms=rms,
        variant=variant,
    )
    return model


def inverse_force(
    model: StateEquationModel,
    p: ArrayLike,
    z_row: ArrayLike,
    layout: SensorLayout,
    q0: ArrayLike,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> Array:
    """
    Input that makes the model reproduce one row of sensor readings.

    Minimizes the weighted squared sensor misfit over q by Gauss-Newton
    with a central difference Jacobian of the forward map.

    Raises:
        NonConvergence: iteration limit reached
    """
    p_vec = np.asarray(p, dtype=float)
    z = np.asarray(z_row, dtype=float)
    q = np.array(q0, dtype=float).reshape(-1)
    weight = np.sqrt(layout.omega.astype(float)) / layout.sigma

    def forward(value: Array) -> Array:
        y = solve_state(model, p_vec, value)
        return model.observation(y, p_vec, value)

    for _ in range(max_iter):
        jac = numerical_jacobian(forward, q) * weight[:, None]
        misfit = (z - forward(q)) * weight
        step, *_ = np.linalg.lstsq(jac, misfit, rcond=None)
        q = q + step
        if np.linalg.norm(step) <= tol * max(1.0, float(np.linalg.norm(q))):
            return q
    raise NonConvergence("Inverse force did not converge", max_iter=max_iter)


def friction_residuals(
    model: StateEquationModel,
    p: ArrayLike,
    tensor: MeasurementTensor,
    layout: SensorLayout | None = None,
) -> list[FrictionSeries]:
    """
    Friction residuals q_P - q_inverse for every series of a tensor.

    q_P is the realized process force when recorded, otherwise the
    setpoint. The inverse force uses the frictionless model at ``p``.
    """
    layout = layout or tensor.layout
    setpoints = tensor.schedule.nominal[:, 0]
    series = []
    for i in range(tensor.n_m):
        applied = setpoints if tensor.realized is None else tensor.realized[i]
        inverse = np.array(
            [
                inverse_force(model, p, tensor.z[i, j], layout, [applied[j]])[0]
                for j in range(tensor.n_q)
            ]
        )
        series.append(FrictionSeries(forces=applied, residuals=applied - inverse))
    return series


def friction_from_name(
    name: str, series: Sequence[FrictionSeries], variant: MemoryVariant = "literal"
) -> FrictionModel:
    """Train the friction candidate registered under ``name``."""
    if name == "none":
        return NoFriction()
    if name == "coulomb":
        return train_coulomb_friction(series)
    if name == "memory_arctan":
        return train_memory_friction(series, variant=variant)
    raise DomainError("Unknown friction model", name=name)
