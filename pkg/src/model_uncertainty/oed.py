"""
Optimal sensor selection.

A design is a binary vector omega choosing which sensors enter the
identification. Designs are rated by scalar criteria of the covariance of
the identified parameters and selected either by full enumeration or by
greedy backward elimination.
"""

from __future__ import annotations

import itertools
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from .cache import DesignCache, fingerprint
from .estimation import (
    Estimate,
    GaussNewtonOptions,
    MeasurementTensor,
    SensorLayout,
    covariance_at,
    estimate_with_covariance,
    identify_parameters,
)
from .exceptions import (
    DesignSpaceTooLarge,
    DomainError,
    NoFeasibleDesign,
    NonFiniteC,
    RankDeficient,
    SingularH,
)
from .logging import get_logger
from .model import Array, StateEquationModel

logger = get_logger(__name__)

MAX_ENUMERATED_SENSORS = 24
# Criterion values this close count as equal for tie-breaking
TIE_RTOL = 1e-9


class DesignCriterion(str, Enum):
    """Scalar rating of a covariance matrix."""

    A = "A"
    D = "D"
    E = "E"


def criterion_value(c: ArrayLike, kind: DesignCriterion | str) -> float:
    """
    Evaluate a design criterion on a covariance matrix.

    A is the trace, D the determinant computed as exp(sum log eigenvalues)
    and E the largest eigenvalue. D is zero for a singular matrix.

    Raises:
        NonFiniteC: C contains NaN or infinite entries
    """
    kind = DesignCriterion(kind)
    matrix = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteC("Covariance matrix is not finite", criterion=kind.value)
    eigvals = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
    if kind is DesignCriterion.A:
        return max(0.0, float(np.trace(matrix)))
    if kind is DesignCriterion.E:
        return max(0.0, float(eigvals[-1]))
    if np.any(eigvals <= 0.0):
        return 0.0
    return float(np.exp(np.sum(np.log(eigvals))))


@dataclass(frozen=True)
class CardinalityConstraint:
    """Bounds on the number of active sensors plus forced choices."""

    min_sensors: int
    max_sensors: int
    forced_on: frozenset[int] = frozenset()
    forced_off: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "forced_on", frozenset(self.forced_on))
        object.__setattr__(self, "forced_off", frozenset(self.forced_off))
        if self.min_sensors < 0 or self.min_sensors > self.max_sensors:
            raise DomainError(
                "Sensor bounds must satisfy 0 <= min <= max",
                min_sensors=self.min_sensors,
                max_sensors=self.max_sensors,
            )
        if self.forced_on & self.forced_off:
            raise DomainError(
                "Forced sensor sets overlap",
                overlap=sorted(self.forced_on & self.forced_off),
            )

    @classmethod
    def at_least(cls, n_p: int, n_s: int) -> CardinalityConstraint:
        return cls(min_sensors=n_p, max_sensors=n_s)

    def validate_for(self, n_s: int, n_p: int) -> None:
        if self.min_sensors < n_p or self.max_sensors > n_s:
            raise DomainError(
                "Sensor bounds must satisfy n_p <= min and max <= n_S",
                min_sensors=self.min_sensors,
                max_sensors=self.max_sensors,
                n_p=n_p,
                n_s=n_s,
            )
        if any(k < 0 or k >= n_s for k in self.forced_on | self.forced_off):
            raise DomainError("Forced sensor index out of range", n_s=n_s)

    def admits(self, omega: Sequence[int]) -> bool:
        count = sum(omega)
        return (
            self.min_sensors <= count <= self.max_sensors
            and all(omega[k] == 1 for k in self.forced_on)
            and all(omega[k] == 0 for k in self.forced_off)
        )


@dataclass(frozen=True)
class DesignEvaluation:
    """A sensor subset with its criteria and the estimate behind them."""

    omega: tuple[int, ...]
    feasible: bool
    psi_a: float | None = None
    psi_d: float | None = None
    psi_e: float | None = None
    estimate: Estimate | None = None
    reason: str | None = None
    history: tuple[dict[str, Any], ...] = field(default_factory=tuple)

    @property
    def n_active(self) -> int:
        return sum(self.omega)

    @property
    def label(self) -> str:
        return "".join(str(w) for w in self.omega)

    def psi(self, kind: DesignCriterion | str) -> float:
        """Criterion value, infinite for infeasible designs."""
        value = {
            DesignCriterion.A: self.psi_a,
            DesignCriterion.D: self.psi_d,
            DesignCriterion.E: self.psi_e,
        }[DesignCriterion(kind)]
        return float("inf") if value is None or not self.feasible else value

    def to_dict(self) -> dict[str, Any]:
        return {
            "omega": list(self.omega),
            "feasible": self.feasible,
            "psi_a": self.psi_a,
            "psi_d": self.psi_d,
            "psi_e": self.psi_e,
            "reason": self.reason,
            "estimate": None if self.estimate is None else self.estimate.to_dict(),
            "history": list(self.history),
        }


def _as_design(omega: ArrayLike, n_s: int) -> tuple[int, ...]:
    design = tuple(int(w) for w in np.asarray(omega).reshape(-1))
    if len(design) != n_s or any(w not in (0, 1) for w in design):
        raise DomainError("Design must be binary with one entry per sensor", omega=design)
    return design


def _data_key(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p0: Array,
) -> str:
    digest = fingerprint(
        tensor.z, tensor.cell_mask, tensor.schedule.inputs, layout.sigma, p0
    )
    return f"{type(model).__qualname__}:{id(model)}:{digest}"


def evaluate_design(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    omega: ArrayLike,
    p0: ArrayLike,
    strict: bool = False,
    options: GaussNewtonOptions | None = None,
    cache: DesignCache | None = None,
) -> DesignEvaluation:
    """
    Re-identify under a sensor subset and rate the resulting covariance.

    Designs with fewer active sensors than parameters, a rank deficient
    weighted Jacobian or a singular curvature matrix are returned as
    infeasible without criteria.

    Args:
        strict: Raise RankDeficient instead of marking the design infeasible
        cache: Optional cache shared between evaluations of one data set
    """
    design = _as_design(omega, model.n_s)
    start = np.asarray(p0, dtype=float)
    key = _data_key(model, layout, tensor, start) if cache is not None else ""
    if cache is not None:
        cached = cache.get(key, design)
        if cached is not None:
            return cached

    evaluation = _evaluate(model, layout, tensor, design, start, strict, options)
    if cache is not None:
        cache.set(key, design, evaluation)
    return evaluation


def _evaluate(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    design: tuple[int, ...],
    start: Array,
    strict: bool,
    options: GaussNewtonOptions | None,
) -> DesignEvaluation:
    if sum(design) < model.n_p:
        if strict:
            raise RankDeficient(
                "Fewer active sensors than parameters", omega=design, n_p=model.n_p
            )
        return DesignEvaluation(
            omega=design, feasible=False, reason="fewer active sensors than parameters"
        )

    try:
        estimate = estimate_with_covariance(
            model, layout.with_omega(design), tensor, start, options
        )
    except (RankDeficient, SingularH) as exc:
        if strict:
            raise
        logger.warning("Design infeasible", omega=design, reason=str(exc))
        return DesignEvaluation(omega=design, feasible=False, reason=str(exc))

    assert estimate.covariance is not None
    c = estimate.covariance
    evaluation = DesignEvaluation(
        omega=design,
        feasible=True,
        psi_a=criterion_value(c, DesignCriterion.A),
        psi_d=criterion_value(c, DesignCriterion.D),
        psi_e=criterion_value(c, DesignCriterion.E),
        estimate=estimate,
    )
    logger.debug(
        "Design evaluated",
        omega=design,
        psi_a=evaluation.psi_a,
        psi_d=evaluation.psi_d,
        psi_e=evaluation.psi_e,
    )
    return evaluation


def design_covariance(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p: ArrayLike,
    omega: ArrayLike,
) -> Array:
    """Covariance of a sensor subset at fixed parameters."""
    design = _as_design(omega, model.n_s)
    c, _ = covariance_at(model, layout.with_omega(design), tensor, p)
    return c


def enumerate_designs(
    n_s: int, constraint: CardinalityConstraint
) -> Iterator[tuple[int, ...]]:
    """Yield admissible binary designs in lexicographic order."""
    for design in itertools.product((0, 1), repeat=n_s):
        if constraint.admits(design):
            yield design


def _warm_start(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p0: ArrayLike,
    options: GaussNewtonOptions | None,
) -> Array:
    """Full-design estimate, or p0 when the full design cannot be identified."""
    start = np.asarray(p0, dtype=float)
    try:
        full = identify_parameters(
            model, layout.with_omega(np.ones(model.n_s, dtype=int)), tensor, start, options
        )
    except (RankDeficient, SingularH) as exc:
        logger.warning("Full design not identifiable; using p0", reason=str(exc))
        return start
    return full.p


def _best(
    evaluations: Sequence[DesignEvaluation], kind: DesignCriterion
) -> DesignEvaluation:
    """Smallest criterion; near ties go to fewer sensors, then the smallest omega."""
    lowest = min(e.psi(kind) for e in evaluations)
    ties = [
        e for e in evaluations if e.psi(kind) <= lowest + TIE_RTOL * abs(lowest)
    ]
    return min(ties, key=lambda e: (e.n_active, e.omega))


def design_table(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    constraint: CardinalityConstraint,
    p0: ArrayLike,
    options: GaussNewtonOptions | None = None,
    cache: DesignCache | None = None,
) -> list[DesignEvaluation]:
    """
    Evaluate every admissible design.

    Raises:
        DesignSpaceTooLarge: more than 24 sensors
    """
    if model.n_s > MAX_ENUMERATED_SENSORS:
        raise DesignSpaceTooLarge(
            "Too many sensors for enumeration",
            n_s=model.n_s,
            limit=MAX_ENUMERATED_SENSORS,
        )
    constraint.validate_for(model.n_s, model.n_p)
    start = _warm_start(model, layout, tensor, p0, options)
    return [
        evaluate_design(
            model, layout, tensor, design, start, options=options, cache=cache
        )
        for design in enumerate_designs(model.n_s, constraint)
    ]


def exhaustive_select(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    constraint: CardinalityConstraint,
    kind: DesignCriterion | str,
    p0: ArrayLike,
    options: GaussNewtonOptions | None = None,
    cache: DesignCache | None = None,
) -> DesignEvaluation:
    """
    Select the admissible design with the smallest criterion.

    Criterion values within a relative 1e-9 of the minimum are ties, broken
    by fewer active sensors, then the lexicographically smallest omega.

    Raises:
        DesignSpaceTooLarge: more than 24 sensors
        NoFeasibleDesign: no admissible design can be identified
    """
    kind = DesignCriterion(kind)
    table = design_table(model, layout, tensor, constraint, p0, options, cache)
    feasible = [evaluation for evaluation in table if evaluation.feasible]
    if not feasible:
        raise NoFeasibleDesign(
            "No admissible design is identifiable", evaluated=len(table)
        )
    best = _best(feasible, kind)
    logger.info(
        "Exhaustive selection finished",
        criterion=kind.value,
        omega=best.label,
        psi=best.psi(kind),
        evaluated=len(table),
    )
    return best


def greedy_select(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    constraint: CardinalityConstraint,
    kind: DesignCriterion | str,
    p0: ArrayLike,
    options: GaussNewtonOptions | None = None,
    cache: DesignCache | None = None,
) -> DesignEvaluation:
    """
    Backward elimination from the full design.

    Starting with every sensor not forced off, repeatedly remove the sensor
    whose removal gives the smallest criterion until at most
    ``max_sensors`` remain or no removal keeps the design feasible. The
    criterion after each step is kept in ``history``.

    Raises:
        NoFeasibleDesign: the final design violates the constraint
    """
    kind = DesignCriterion(kind)
    constraint.validate_for(model.n_s, model.n_p)
    start = _warm_start(model, layout, tensor, p0, options)
    current = tuple(0 if k in constraint.forced_off else 1 for k in range(model.n_s))
    evaluation = evaluate_design(
        model, layout, tensor, current, start, options=options, cache=cache
    )
    if not evaluation.feasible:
        raise NoFeasibleDesign(
            "Starting design is not identifiable", omega=current, reason=evaluation.reason
        )
    history = [{"omega": list(current), "psi": evaluation.psi(kind)}]

    while evaluation.n_active > constraint.max_sensors:
        candidates = []
        for k in range(model.n_s):
            if current[k] == 0 or k in constraint.forced_on:
                continue
            trial = current[:k] + (0,) + current[k + 1 :]
            if sum(trial) < constraint.min_sensors:
                continue
            candidate = evaluate_design(
                model, layout, tensor, trial, start, options=options, cache=cache
            )
            if candidate.feasible:
                candidates.append(candidate)
        if not candidates:
            break
        evaluation = _best(candidates, kind)
        current = evaluation.omega
        history.append({"omega": list(current), "psi": evaluation.psi(kind)})

    if not constraint.admits(current):
        raise NoFeasibleDesign(
            "Backward elimination ended outside the constraint", omega=current
        )
    logger.info(
        "Greedy selection finished",
        criterion=kind.value,
        omega=evaluation.label,
        psi=evaluation.psi(kind),
        steps=len(history) - 1,
    )
    return replace(evaluation, history=tuple(history))
