"""
Hypothesis testing for model uncertainty.

A model is calibrated on one part of the data and re-identified on another.
If the validation estimate leaves the chi-squared confidence ellipsoid of
the calibration estimate at the Bonferroni-corrected level, no single
parameter vector explains both data sets and the model is rejected.
Measurement errors are screened for normality beforehand.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from numpy.typing import ArrayLike
from scipy import stats as scipy_stats

from .estimation import (
    BoolArray,
    GaussNewtonOptions,
    MeasurementTensor,
    SensorLayout,
    estimate_with_covariance,
    identify_parameters,
)
from .exceptions import (
    ConstantSample,
    DomainError,
    EmptySplit,
    NegativeInput,
    NonFiniteValue,
    NumericalError,
    OddSeriesCount,
    SampleTooLarge,
    SampleTooSmall,
    ScenarioFailed,
    SingularC,
)
from .logging import get_logger, log_test_decision
from .model import Array, InputSchedule, Phase, StateEquationModel

logger = get_logger(__name__)

UNDERFLOW_LEVEL = 1e-12
EIGENVALUE_FLOOR = 1e-14


# Confidence ellipsoids


def chi2_quantile(dof: int, alpha: float) -> float:
    """
    Radius gamma^2 of the confidence ellipsoid at level alpha.

    Returns the value whose chi-squared CDF with ``dof`` degrees of freedom
    equals 1 - alpha.

    Raises:
        DomainError: alpha outside (0, 1) or dof < 1
    """
    if dof < 1:
        raise DomainError("Degrees of freedom must be at least 1", dof=dof)
    if not 0.0 < alpha < 1.0:
        raise DomainError("Test level must lie in (0, 1)", alpha=alpha)
    return float(scipy_stats.chi2.isf(alpha, dof))


def mahalanobis_sq(
    p: ArrayLike, center: ArrayLike, c: ArrayLike
) -> tuple[float, bool]:
    """
    Squared Mahalanobis distance (p - center)^T C^-1 (p - center).

    Evaluated in the eigenbasis of C with eigenvalues clipped at
    1e-14 * lambda_max.

    Returns:
        Distance and whether any eigenvalue was clipped

    Raises:
        SingularC: C is non-finite or has no positive eigenvalue
    """
    matrix = np.asarray(c, dtype=float)
    diff = np.asarray(p, dtype=float) - np.asarray(center, dtype=float)
    if not np.all(np.isfinite(matrix)) or not np.all(np.isfinite(diff)):
        raise SingularC("Covariance or parameters are not finite")
    eigvals, eigvecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    largest = float(eigvals[-1])
    if largest <= 0.0:
        raise SingularC("Covariance has no positive eigenvalue", largest=largest)
    floor = EIGENVALUE_FLOOR * largest
    clipped = bool(np.any(eigvals < floor))
    coords = eigvecs.T @ diff
    return float(np.sum(coords**2 / np.maximum(eigvals, floor))), clipped


def alpha_min(p_val: ArrayLike, p_cal: ArrayLike, c_cal: ArrayLike) -> float:
    """
    Smallest level at which p_val lies on the calibration ellipsoid.

    Equals the chi-squared survival function at the squared Mahalanobis
    distance, with n_p degrees of freedom.
    """
    d2, _ = mahalanobis_sq(p_val, p_cal, c_cal)
    return float(scipy_stats.chi2.sf(d2, np.asarray(p_cal).size))


def ellipsoid_contains(
    p: ArrayLike, p_center: ArrayLike, c: ArrayLike, alpha: float
) -> bool:
    """Whether p lies in the confidence ellipsoid G(alpha, p_center, C)."""
    d2, _ = mahalanobis_sq(p, p_center, c)
    return d2 <= chi2_quantile(np.asarray(p_center).size, alpha)


# Normality screening


def shapiro_wilk(sample: ArrayLike) -> tuple[float, float]:
    """
    Shapiro-Wilk W statistic and p-value.

    Raises:
        SampleTooSmall: fewer than 3 values
        SampleTooLarge: more than 5000 values
        ConstantSample: zero spread
    """
    values = np.asarray(sample, dtype=float).reshape(-1)
    if values.size < 3:
        raise SampleTooSmall("Shapiro-Wilk needs at least 3 values", n=values.size)
    if values.size > 5000:
        raise SampleTooLarge("Shapiro-Wilk p-values are valid up to 5000 values", n=values.size)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue("Sample contains non-finite values")
    if np.ptp(values) == 0.0:
        raise ConstantSample("Sample is constant", n=values.size)
    result = scipy_stats.shapiro(values)
    return float(result.statistic), float(result.pvalue)


def build_error_sample(tensor: MeasurementTensor, sensor: int) -> Array:
    """
    Paired differences z[2m+1] - z[2m] of one sensor over all inputs.

    The sample is ordered by input, with the pairs of one input adjacent.

    Raises:
        OddSeriesCount: n_M is odd
    """
    if tensor.n_m % 2:
        raise OddSeriesCount("Paired differences need an even series count", n_m=tensor.n_m)
    values = tensor.z[:, :, sensor]
    return (values[1::2] - values[0::2]).T.reshape(-1)


def combine_sigma(sigma_repetition: ArrayLike, sigma_internal: ArrayLike) -> Any:
    """
    Root sum of squares of repetition and internal standard deviations.

    Raises:
        NegativeInput: either value is negative
    """
    rep = np.asarray(sigma_repetition, dtype=float)
    internal = np.asarray(sigma_internal, dtype=float)
    if np.any(rep < 0.0) or np.any(internal < 0.0):
        raise NegativeInput(
            "Standard deviations must be nonnegative",
            sigma_repetition=rep.tolist(),
            sigma_internal=internal.tolist(),
        )
    combined = np.hypot(rep, internal)
    return float(combined) if combined.ndim == 0 else combined


@dataclass(frozen=True)
class SensorNormality:
    """Normality screen of one sensor's paired differences."""

    sensor: int
    n: int
    w: float
    p_value: float
    sigma_hat: float
    rejected: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "sensor": self.sensor,
            "n": self.n,
            "w": self.w,
            "p_value": self.p_value,
            "sigma_hat": self.sigma_hat,
            "rejected": self.rejected,
        }


@dataclass(frozen=True)
class NormalityScreen:
    """Per-sensor normality results at one test level."""

    level: float
    results: tuple[SensorNormality, ...]
    waived: bool = False

    @property
    def passed(self) -> bool:
        return not any(result.rejected for result in self.results)

    @property
    def sigma_hat(self) -> dict[int, float]:
        return {result.sensor: result.sigma_hat for result in self.results}

    def to_dict(self) -> dict[str, Any]:
        return {
            "level": self.level,
            "passed": self.passed,
            "waived": self.waived,
            "results": [result.to_dict() for result in self.results],
        }


def screen_normality(
    tensor: MeasurementTensor,
    level: float = 0.05,
    sensors: Sequence[int] | None = None,
) -> NormalityScreen:
    """
    Run Shapiro-Wilk on the paired differences of each sensor.

    The standard deviation of a single measurement is estimated as
    sd(differences) / sqrt(2).

    Args:
        tensor: Measurements with an even number of series
        level: Test level
        sensors: Sensors to screen (active sensors of the tensor layout
            when omitted)
    """
    if not 0.0 < level < 1.0:
        raise DomainError("Test level must lie in (0, 1)", level=level)
    if sensors is None:
        sensors = [int(k) for k in np.flatnonzero(tensor.layout.omega)]

    results = []
    for k in sensors:
        sample = build_error_sample(tensor, k)
        w, p_value = shapiro_wilk(sample)
        result = SensorNormality(
            sensor=k,
            n=int(sample.size),
            w=w,
            p_value=p_value,
            sigma_hat=float(np.std(sample, ddof=1) / np.sqrt(2.0)),
            rejected=p_value < level,
        )
        results.append(result)
        logger.info(
            "Normality screened",
            sensor=k,
            w=w,
            p_value=p_value,
            sigma_hat=result.sigma_hat,
            rejected=result.rejected,
        )
    return NormalityScreen(level=level, results=tuple(results))


# Calibration and validation splits


class SplitKind(str, Enum):
    """How inputs are divided into calibration and validation sets."""

    ALTERNATING_WITHIN_PHASE = "alternating_within_phase"
    LOADING_VS_UNLOADING = "loading_vs_unloading"
    ALTERNATING_ACROSS_ALL = "alternating_across_all"
    RANDOM = "random"


@dataclass(frozen=True)
class SplitScheme:
    """
    A calibration/validation split of the (series, input) cells.

    ``excluded_inputs`` defaults to the inputs whose setpoint is zero.
    Random splits draw cells with their own seeded generator.
    """

    kind: SplitKind
    phase: Phase | None = None
    seed: int | None = None
    ratio: float = 0.5
    excluded_inputs: frozenset[int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SplitKind(self.kind))
        if self.phase is not None:
            object.__setattr__(self, "phase", Phase(self.phase))
        if self.excluded_inputs is not None:
            object.__setattr__(self, "excluded_inputs", frozenset(self.excluded_inputs))
        if self.kind is SplitKind.ALTERNATING_WITHIN_PHASE and self.phase is None:
            raise DomainError("Within-phase split needs a phase")
        if self.kind is SplitKind.RANDOM:
            if self.seed is None:
                raise DomainError("Random split needs an explicit seed")
            if not 0.0 < self.ratio < 1.0:
                raise DomainError("Calibration ratio must lie in (0, 1)", ratio=self.ratio)

    @property
    def label(self) -> str:
        if self.kind is SplitKind.ALTERNATING_WITHIN_PHASE:
            assert self.phase is not None
            return f"{self.phase.value}"
        if self.kind is SplitKind.RANDOM:
            return f"random[seed={self.seed},ratio={self.ratio}]"
        return self.kind.value

    @classmethod
    def standard_suite(cls) -> list[SplitScheme]:
        """Loading, unloading, loading vs unloading, and across-all splits."""
        return [
            cls(SplitKind.ALTERNATING_WITHIN_PHASE, phase=Phase.LOADING),
            cls(SplitKind.ALTERNATING_WITHIN_PHASE, phase=Phase.UNLOADING),
            cls(SplitKind.LOADING_VS_UNLOADING),
            cls(SplitKind.ALTERNATING_ACROSS_ALL),
        ]


def _excluded(schedule: InputSchedule, scheme: SplitScheme) -> frozenset[int]:
    if scheme.excluded_inputs is not None:
        return scheme.excluded_inputs
    zero = np.all(schedule.nominal == 0.0, axis=1)
    return frozenset(int(j) for j in np.flatnonzero(zero))


def _input_sets(
    schedule: InputSchedule, scheme: SplitScheme
) -> tuple[list[int], list[int]]:
    excluded = _excluded(schedule, scheme)
    turn = schedule.turning_point
    loading = [
        j
        for j, phase in enumerate(schedule.phases)
        if phase is Phase.LOADING and j not in excluded
    ]
    unloading = [
        j
        for j, phase in enumerate(schedule.phases)
        if (phase is Phase.UNLOADING or j == turn) and j not in excluded
    ]

    if scheme.kind is SplitKind.ALTERNATING_WITHIN_PHASE:
        members = loading if scheme.phase is Phase.LOADING else unloading
        return members[0::2], members[1::2]
    if scheme.kind is SplitKind.LOADING_VS_UNLOADING:
        overlap = set(unloading)
        return [j for j in loading if j not in overlap], unloading
    everything = [j for j in range(schedule.n_q) if j not in excluded]
    return everything[1::2], everything[0::2]


def split(
    schedule: InputSchedule, scheme: SplitScheme, series_count: int
) -> tuple[BoolArray, BoolArray]:
    """
    Divide the (series, input) cells into calibration and validation sets.

    The turning point of the schedule belongs to the unloading phase.

    Returns:
        Boolean masks of shape (series_count, n_q) for calibration and
        validation

    Raises:
        EmptySplit: either set is empty
    """
    cal = np.zeros((series_count, schedule.n_q), dtype=bool)
    val = np.zeros_like(cal)

    if scheme.kind is SplitKind.RANDOM:
        excluded = _excluded(schedule, scheme)
        columns = [j for j in range(schedule.n_q) if j not in excluded]
        cells = [(i, j) for i in range(series_count) for j in columns]
        rng = np.random.default_rng(scheme.seed)
        order = rng.permutation(len(cells))
        n_cal = int(round(scheme.ratio * len(cells)))
        for position, index in enumerate(order):
            i, j = cells[index]
            if position < n_cal:
                cal[i, j] = True
            else:
                val[i, j] = True
    else:
        cal_inputs, val_inputs = _input_sets(schedule, scheme)
        cal[:, cal_inputs] = True
        val[:, val_inputs] = True

    if not cal.any() or not val.any():
        raise EmptySplit(
            "Split produced an empty set",
            scheme=scheme.label,
            calibration=int(cal.sum()),
            validation=int(val.sum()),
        )
    return cal, val


# Model uncertainty detection


@dataclass(frozen=True)
class ScenarioResult:
    """Outcome of one calibration/validation hypothesis test."""

    scenario_id: str
    p_cal: Array
    c_cal: Array
    p_val: Array
    mahalanobis_sq: float
    alpha_min: float
    threshold: float
    rejected: bool
    clipped: bool = False

    @property
    def underflow(self) -> bool:
        return self.alpha_min < UNDERFLOW_LEVEL

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "p_cal": self.p_cal.tolist(),
            "c_cal": self.c_cal.tolist(),
            "p_val": self.p_val.tolist(),
            "mahalanobis_sq": self.mahalanobis_sq,
            "alpha_min": self.alpha_min,
            "threshold": self.threshold,
            "rejected": self.rejected,
            "clipped": self.clipped,
            "underflow": self.underflow,
        }


@dataclass(frozen=True)
class UncertaintyReport:
    """Verdict on one model over a family of scenarios."""

    model_id: str
    tol: float
    n_tests: int
    scenarios: tuple[ScenarioResult, ...]
    normality: NormalityScreen | None = None
    normality_waived: bool = False
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def threshold(self) -> float:
        return self.tol / self.n_tests

    @property
    def verdict(self) -> int:
        """1 when any scenario rejects the model, 0 otherwise."""
        return int(any(result.rejected for result in self.scenarios))

    @property
    def rejected(self) -> bool:
        return self.verdict == 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "tol": self.tol,
            "n_tests": self.n_tests,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "scenarios": [result.to_dict() for result in self.scenarios],
            "normality": None if self.normality is None else self.normality.to_dict(),
            "normality_waived": self.normality_waived,
            **({"metadata": self.metadata} if self.metadata else {}),
        }


def evaluate_scenario(
    model: StateEquationModel,
    layout: SensorLayout,
    cal_tensor: MeasurementTensor,
    val_tensor: MeasurementTensor,
    p0: ArrayLike,
    threshold: float,
    scenario_id: str = "scenario",
    options: GaussNewtonOptions | None = None,
) -> ScenarioResult:
    """
    Calibrate, validate and test one scenario.

    The validation identification starts from the calibration estimate.
    Calibration and validation data may come from different tensors.

    Raises:
        ScenarioFailed: a numerical step of the scenario failed
    """
    try:
        cal = estimate_with_covariance(model, layout, cal_tensor, p0, options)
        val = identify_parameters(model, layout, val_tensor, cal.p, options)
        assert cal.covariance is not None
        d2, clipped = mahalanobis_sq(val.p, cal.p, cal.covariance)
    except NumericalError as exc:
        raise ScenarioFailed(
            "Scenario could not be evaluated", scenario=scenario_id, cause=str(exc)
        ) from exc

    level = float(scipy_stats.chi2.sf(d2, model.n_p))
    result = ScenarioResult(
        scenario_id=scenario_id,
        p_cal=cal.p,
        c_cal=cal.covariance,
        p_val=val.p,
        mahalanobis_sq=d2,
        alpha_min=level,
        threshold=threshold,
        rejected=level < threshold,
        clipped=clipped,
    )
    if clipped:
        logger.warning("Calibration covariance clipped", scenario=scenario_id)
    log_test_decision(
        logger,
        scenario_id,
        level,
        threshold,
        result.rejected,
        mahalanobis_sq=d2,
        underflow=result.underflow,
    )
    return result


def detect_model_uncertainty(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    schemes: Sequence[SplitScheme],
    tol: float,
    n_tests: int | None,
    p0: ArrayLike,
    normality: NormalityScreen | None = None,
    early_exit: bool = False,
    model_id: str = "model",
    options: GaussNewtonOptions | None = None,
) -> UncertaintyReport:
    """
    Test a model against every calibration/validation scenario.

    Each scenario is rejected when alpha_min < tol / n_tests. All scenarios
    are evaluated unless ``early_exit`` stops at the first rejection; the
    verdict is the same either way.

    Args:
        n_tests: Number of tests for the Bonferroni correction, must equal
            the number of schemes (taken from ``schemes`` when None)
        normality: Result of the normality screen, recorded as waived
            when missing or failed

    Raises:
        DomainError: tol outside (0, 1) or n_tests inconsistent
        EmptySplit: a scheme leaves a set empty
        ScenarioFailed: a scenario failed numerically
    """
    if not 0.0 < tol < 1.0:
        raise DomainError("Test level must lie in (0, 1)", tol=tol)
    n_tests = len(schemes) if n_tests is None else n_tests
    if n_tests < 1 or n_tests != len(schemes):
        raise DomainError(
            "Number of tests must equal the number of scenarios",
            n_tests=n_tests,
            scenarios=len(schemes),
        )
    threshold = tol / n_tests
    waived = normality is None or normality.waived or not normality.passed
    if waived:
        logger.warning("Normality screen waived", model=model_id)

    results = []
    for scheme in schemes:
        cal_mask, val_mask = split(tensor.schedule, scheme, tensor.n_m)
        result = evaluate_scenario(
            model,
            layout,
            tensor.restrict(cal_mask),
            tensor.restrict(val_mask),
            p0,
            threshold,
            scenario_id=scheme.label,
            options=options,
        )
        results.append(result)
        if early_exit and result.rejected:
            break

    report = UncertaintyReport(
        model_id=model_id,
        tol=tol,
        n_tests=n_tests,
        scenarios=tuple(results),
        normality=normality,
        normality_waived=waived,
    )
    logger.info(
        "Model tested",
        model=model_id,
        verdict=report.verdict,
        threshold=threshold,
        scenarios=len(results),
    )
    return report
