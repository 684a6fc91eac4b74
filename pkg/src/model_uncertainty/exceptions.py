"""
Exception hierarchy for model-uncertainty.

Every error raised by the package derives from ModelUncertaintyError and
belongs to one of three categories. The category decides the exit status
of the command line interface.
"""

from typing import Any


class ModelUncertaintyError(Exception):
    """Base exception for all package errors."""

    exit_code: int = 1

    def __init__(self, message: str, **context: Any):
        """
        Initialize the error.

        Args:
            message: Human readable description
            **context: Structured details (indices, values, stage names)
        """
        self.message = message
        self.context = context
        super().__init__(message)

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
        return f"{self.message} ({details})"


class ConfigurationError(ModelUncertaintyError):
    """Invalid configuration, arguments or model definition."""

    exit_code = 2


class DataError(ModelUncertaintyError):
    """Measurement data that cannot be used as supplied."""

    exit_code = 3


class NumericalError(ModelUncertaintyError):
    """A numerical procedure failed."""

    exit_code = 4


# Configuration errors


class DomainError(ConfigurationError):
    """Argument outside the domain of a statistical function."""


class NegativeInput(ConfigurationError):
    """A quantity that must be nonnegative was negative."""


class InvalidModel(ConfigurationError):
    """State equation model is not square or otherwise ill-posed."""


class InvalidTopology(ConfigurationError):
    """Surrogate structure is disconnected or references unknown nodes."""


class DesignSpaceTooLarge(ConfigurationError):
    """Too many sensors for exhaustive enumeration."""


class UntrainedModel(ConfigurationError):
    """Friction model evaluated before training."""


class UninitializedState(ConfigurationError):
    """Hysteresis memory updated before initialization."""


# Data errors


class MalformedRow(DataError):
    """A measurement row is incomplete or not numeric."""


class DimensionMismatch(DataError):
    """Measurement data does not form a complete tensor."""


class NonFiniteValue(DataError):
    """Measurement data contains NaN or infinite values."""


class SampleTooSmall(DataError):
    """Sample has fewer elements than the test requires."""


class SampleTooLarge(DataError):
    """Sample exceeds the validity range of the test approximation."""


class ConstantSample(DataError):
    """Sample has zero spread."""


class OddSeriesCount(DataError):
    """Paired differences need an even number of series."""


class EmptySplit(DataError):
    """Calibration or validation set is empty."""


class ZeroRealizedForce(DataError):
    """Measurement correction would divide by a zero realized force."""


class NormalityRejected(DataError):
    """Measurement errors failed the normality screen."""


# Numerical errors


class NonConvergence(NumericalError):
    """Iteration limit reached before convergence."""


class SingularJacobian(NumericalError):
    """State Jacobian is singular or too badly conditioned."""


class RankDeficient(NumericalError):
    """Weighted parameter Jacobian lacks full column rank."""


class SingularH(NumericalError):
    """Curvature matrix of the identification problem is singular."""


class NonFiniteC(NumericalError):
    """Covariance matrix contains non-finite entries."""


class SingularC(NumericalError):
    """Covariance matrix cannot define a confidence ellipsoid."""


class NoFeasibleDesign(NumericalError):
    """No sensor subset satisfies the design constraints."""


class DegenerateTraining(NumericalError):
    """Friction training data cannot determine a model."""


class ScenarioFailed(NumericalError):
    """A hypothesis-test scenario could not be evaluated."""


class PipelineStageError(ModelUncertaintyError):
    """
    Error raised inside a pipeline stage.

    Keeps the exit code of the wrapped error so the command line reports
    the category of the original failure.
    """

    def __init__(self, stage: str, cause: ModelUncertaintyError):
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code
        super().__init__(f"Stage '{stage}' failed: {cause}", stage=stage)


class SingularHWarning(UserWarning):
    """Curvature matrix was indefinite; a clipped pseudo-inverse was used."""
