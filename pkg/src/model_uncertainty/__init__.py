"""
model-uncertainty - Detection of model uncertainty in implicit state models.

This package identifies parameters of models E(y, p, q) = 0 from repeated
measurements, selects optimal sensor subsets, and decides by
calibration/validation tests on parameter confidence ellipsoids whether a
model is adequate for the data. A lumped-parameter press surrogate with
competing friction models serves as the demonstration system.

Example usage:
    from model_uncertainty import RunConfig, run_pipeline

    document = run_pipeline(RunConfig(tol=0.05))
    document.write("results")
    print(document.verdicts)

Main classes:
    StateEquationModel: Base class for differentiable implicit models
    MeasurementTensor: Repeated measurements with schedule and sensor layout
    PressSurrogate: Bar/beam/joint linkage assembled by assemble_quasistatic

Main functions:
    identify_parameters: Damped Gauss-Newton parameter identification
    exhaustive_select / greedy_select: Optimal sensor subset selection
    detect_model_uncertainty: Bonferroni-corrected ellipsoid tests
    run_pipeline: All stages from data to report
"""

from ._version import __version__, __version_info__
from .config import RunConfig, load_config
from .estimation import (
    Estimate,
    GaussNewtonOptions,
    MeasurementTensor,
    SensorLayout,
    covariance,
    estimate_with_covariance,
    identify_parameters,
)
from .exceptions import (
    ConfigurationError,
    DataError,
    ModelUncertaintyError,
    NumericalError,
    PipelineStageError,
)
from .friction import (
    CoulombFriction,
    MemoryArctanFriction,
    NoFriction,
    train_memory_friction,
)
from .measurements import export_measurements, ingest_measurements
from .model import InputSchedule, StateEquationModel, solve_state
from .oed import (
    CardinalityConstraint,
    DesignCriterion,
    evaluate_design,
    exhaustive_select,
    greedy_select,
)
from .pipeline import run_pipeline
from .press import (
    PressSurrogate,
    assemble_quasistatic,
    correct_measurements,
    default_surrogate,
    generate_synthetic_measurements,
)
from .report import ReportDocument
from .stats import (
    SplitScheme,
    UncertaintyReport,
    detect_model_uncertainty,
    screen_normality,
    shapiro_wilk,
)

__all__ = [
    "StateEquationModel",
    "InputSchedule",
    "solve_state",
    "SensorLayout",
    "MeasurementTensor",
    "Estimate",
    "GaussNewtonOptions",
    "identify_parameters",
    "estimate_with_covariance",
    "covariance",
    "DesignCriterion",
    "CardinalityConstraint",
    "evaluate_design",
    "exhaustive_select",
    "greedy_select",
    "SplitScheme",
    "UncertaintyReport",
    "detect_model_uncertainty",
    "screen_normality",
    "shapiro_wilk",
    "PressSurrogate",
    "assemble_quasistatic",
    "default_surrogate",
    "generate_synthetic_measurements",
    "correct_measurements",
    "NoFriction",
    "CoulombFriction",
    "MemoryArctanFriction",
    "train_memory_friction",
    "ingest_measurements",
    "export_measurements",
    "RunConfig",
    "load_config",
    "ReportDocument",
    "run_pipeline",
    "ModelUncertaintyError",
    "ConfigurationError",
    "DataError",
    "NumericalError",
    "PipelineStageError",
    "__version__",
    "__version_info__",
]

# Package metadata
__license__ = "MIT"
__description__ = "Model uncertainty detection with optimal sensor selection"
