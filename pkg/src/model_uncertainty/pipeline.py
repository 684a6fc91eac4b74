"""
End-to-end model uncertainty detection.

Stages run in order:

1. data       ingest measurements or generate synthetic ones
2. oed        optimal sensor subset on the initial data
3. restrict   keep only the selected sensors
4. screen     Shapiro-Wilk screen and sensor sigma derivation
5. friction   frictionless identification and friction training
6. detect     calibration/validation tests per candidate model
7. report     report document with plot data

Errors raised inside a stage are re-raised as PipelineStageError carrying
the stage label. Verdicts are results, never errors.
"""

from __future__ import annotations

from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np

from ._version import __version__
from .cache import DesignCache
from .config import RunConfig
from .estimation import (
    Estimate,
    GaussNewtonOptions,
    MeasurementTensor,
    SensorLayout,
    identify_parameters,
)
from .exceptions import (
    ConfigurationError,
    ModelUncertaintyError,
    NormalityRejected,
    PipelineStageError,
)
from .friction import FrictionModel, friction_from_name, friction_residuals
from .logging import get_logger, log_stage
from .measurements import ingest_measurements
from .model import InputSchedule, NewtonOptions
from .oed import (
    MAX_ENUMERATED_SENSORS,
    DesignEvaluation,
    design_table,
    exhaustive_select,
    greedy_select,
)
from .press import (
    PressModel,
    assemble_quasistatic,
    correct_measurements,
    force_displacement_curves,
    generate_synthetic_measurements,
)
from .report import ReportDocument
from .stats import (
    NormalityScreen,
    SplitScheme,
    UncertaintyReport,
    combine_sigma,
    detect_model_uncertainty,
    screen_normality,
)

logger = get_logger(__name__)


@contextmanager
def stage(name: str, **context: Any) -> Iterator[None]:
    """Label errors raised inside a pipeline stage."""
    try:
        yield
    except PipelineStageError:
        raise
    except ModelUncertaintyError as exc:
        log_stage(logger, name, success=False, error=str(exc), **context)
        raise PipelineStageError(name, exc) from exc
    log_stage(logger, name, **context)


@dataclass(frozen=True)
class PipelineSetup:
    """Model, layout and solver settings derived from a configuration."""

    model: PressModel
    layout: SensorLayout
    p_true: np.ndarray
    p0: np.ndarray
    options: GaussNewtonOptions
    internal_sigma: tuple[float | None, ...]


def prepare(config: RunConfig) -> PipelineSetup:
    """Assemble the surrogate and the solver settings of a run."""
    surrogate = config.build_surrogate()
    model = assemble_quasistatic(surrogate)
    nominal = surrogate.nominal_parameters
    p_true = nominal if config.p_true is None else np.asarray(config.p_true, dtype=float)
    if p_true.size != model.n_p:
        raise ConfigurationError(
            "p_true needs one value per parameter", n_p=model.n_p, got=p_true.size
        )
    solver = config.solver
    options = GaussNewtonOptions(
        tol_grad=solver.tol_grad,
        max_iter=solver.max_iter,
        rank_tol=solver.rank_tol,
        newton=NewtonOptions(
            tol=solver.newton_tol,
            max_iter=solver.newton_max_iter,
            cond_cap=solver.cond_cap,
            relative=solver.newton_relative,
        ),
    )
    return PipelineSetup(
        model=model,
        layout=SensorLayout(sigma=np.asarray(config.sensor_sigma(model.n_s))),
        p_true=p_true,
        p0=p_true * config.initial_scale,
        options=options,
        internal_sigma=tuple(config.sensor_internal_sigma(model.n_s)),
    )


def acquire(config: RunConfig, setup: PipelineSetup, seed: int) -> MeasurementTensor:
    """Measurement file when configured, synthetic data otherwise; corrected."""
    if config.measurements is not None:
        tensor = ingest_measurements(config.measurements, setup.layout)
    else:
        schedule = InputSchedule.loading_ramp(
            config.schedule.peak_force,
            n_loading=config.schedule.n_loading,
            n_unloading=config.schedule.n_unloading,
        )
        tensor = generate_synthetic_measurements(
            setup.model,
            setup.p_true,
            schedule,
            setup.layout,
            n_m=config.n_m,
            seed=seed,
            friction=config.friction.build(),
            force_jitter=config.force_jitter,
            noise_sigma=config.synthetic_noise_sigma(setup.model.n_s),
        )
    return correct_measurements(tensor)


def select_design(
    config: RunConfig, setup: PipelineSetup, tensor: MeasurementTensor
) -> tuple[list[DesignEvaluation], DesignEvaluation, DesignEvaluation]:
    """Design table, exhaustive optimum and greedy result."""
    model = setup.model
    constraint = config.constraint.build(model.n_p, model.n_s)
    cache = DesignCache()
    greedy = greedy_select(
        model,
        setup.layout,
        tensor,
        constraint,
        config.criterion,
        setup.p0,
        setup.options,
        cache,
    )
    if model.n_s > MAX_ENUMERATED_SENSORS:
        logger.warning(
            "Design space too large for exhaustive search; using greedy result",
            n_s=model.n_s,
        )
        return [], greedy, greedy
    table = design_table(
        model, setup.layout, tensor, constraint, setup.p0, setup.options, cache
    )
    selected = exhaustive_select(
        model,
        setup.layout,
        tensor,
        constraint,
        config.criterion,
        setup.p0,
        setup.options,
        cache,
    )
    logger.debug("Design cache statistics", **cache.get_stats())
    return table, selected, greedy


def derive_sigma(
    layout: SensorLayout,
    screen: NormalityScreen,
    internal_sigma: tuple[float | None, ...],
) -> SensorLayout:
    """Combine repetition and internal errors where an internal error is known."""
    sigma = layout.sigma.copy()
    for sensor, sigma_hat in screen.sigma_hat.items():
        internal = internal_sigma[sensor]
        if internal is not None:
            sigma[sensor] = combine_sigma(sigma_hat, internal)
    return SensorLayout(sigma=sigma, omega=layout.omega)


def _schemes(config: RunConfig) -> list[SplitScheme]:
    excluded = None if config.schedule.exclude_zero_setpoints else frozenset()
    return [scheme.build(excluded) for scheme in config.schemes]


def _provenance(
    config: RunConfig, setup: PipelineSetup, omega: tuple[int, ...]
) -> dict[str, Any]:
    return {
        "version": __version__,
        "seed": config.seed,
        "tol": config.tol,
        "n_tests": len(config.schemes),
        "threshold": config.tol / len(config.schemes),
        "criterion": config.criterion.value,
        "memory_variant": config.memory_variant,
        "reuse_initial_data": config.reuse_initial_data,
        "p_true": setup.p_true,
        "p0": setup.p0,
        "omega_opt": list(omega),
        "parameter_names": list(setup.model.parameter_names),
        "config": config.model_dump(mode="json", exclude={"output_dir"}),
    }


def screen_measurements(
    config: RunConfig, setup: PipelineSetup, tensor: MeasurementTensor
) -> tuple[NormalityScreen | None, MeasurementTensor]:
    """
    Normality screen of the active sensors under the configured policy.

    Returns the screen (None when skipped) and the tensor with sigmas
    derived from it.

    Raises:
        NormalityRejected: screen failed under the abort policy
    """
    if config.normality_policy == "skip":
        return None, tensor
    screen = screen_normality(tensor, level=config.normality_level)
    if not screen.passed:
        rejected = [r.sensor for r in screen.results if r.rejected]
        if config.normality_policy == "abort":
            raise NormalityRejected("Measurement errors are not normal", sensors=rejected)
        logger.warning(
            "Normality rejected; tests continue with waived assumption",
            sensors=rejected,
        )
    layout = derive_sigma(tensor.layout, screen, setup.internal_sigma)
    return screen, tensor.with_layout(layout)


@dataclass(frozen=True)
class FrictionTraining:
    """Frictionless estimate, trained candidates and the held-out series."""

    frictionless: Estimate
    candidates: dict[str, FrictionModel]
    test: MeasurementTensor


def train_friction(
    config: RunConfig, setup: PipelineSetup, tensor: MeasurementTensor
) -> FrictionTraining:
    """
    Identify stiffnesses without friction on the training series and train
    every candidate friction model on the inverse-model residuals.
    """
    n_train = config.training_series
    if n_train >= tensor.n_m:
        raise ConfigurationError(
            "Training series leave no test series", training=n_train, n_m=tensor.n_m
        )
    training = tensor.select_series(np.arange(n_train))
    frictionless = identify_parameters(
        setup.model, tensor.layout, training, setup.p0, setup.options
    )
    residual_series = friction_residuals(setup.model, frictionless.p, training)
    candidates: dict[str, FrictionModel] = {
        name: friction_from_name(name, residual_series, config.memory_variant)
        for name in config.friction_models
    }
    return FrictionTraining(
        frictionless=frictionless,
        candidates=candidates,
        test=tensor.select_series(np.arange(n_train, tensor.n_m)),
    )


def detect_candidate(
    config: RunConfig,
    setup: PipelineSetup,
    training: FrictionTraining,
    name: str,
    normality: NormalityScreen | None,
) -> tuple[UncertaintyReport, list[dict[str, Any]]]:
    """Test one candidate on the held-out series; returns report and plot rows."""
    model_tensor = training.candidates[name].apply(training.test)
    p_start = training.frictionless.p
    report = detect_model_uncertainty(
        setup.model,
        model_tensor.layout,
        model_tensor,
        _schemes(config),
        tol=config.tol,
        n_tests=len(config.schemes),
        p0=p_start,
        normality=normality,
        early_exit=config.early_exit,
        model_id=name,
        options=setup.options,
    )
    fit = identify_parameters(
        setup.model, model_tensor.layout, model_tensor, p_start, setup.options
    )
    return report, force_displacement_curves(model_tensor, setup.model, fit.p)


def run_pipeline(config: RunConfig) -> ReportDocument:
    """
    Run every stage and assemble the report.

    Raises:
        PipelineStageError: a stage failed; carries the exit code of the
            underlying error
    """
    with stage("setup"):
        setup = prepare(config)

    with stage("data"):
        tensor = acquire(config, setup, config.seed)
        if config.reuse_initial_data:
            initial = tensor
        elif config.measurements is not None:
            logger.warning("Separate initial data need synthetic generation; reusing data")
            initial = tensor
        else:
            initial = acquire(config, setup, config.seed + 1)

    with stage("oed", criterion=config.criterion.value):
        table, selected, greedy = select_design(config, setup, initial)
        if greedy.omega != selected.omega:
            logger.info(
                "Greedy and exhaustive selections differ",
                exhaustive=selected.label,
                greedy=greedy.label,
            )

    with stage("restrict", omega=selected.label):
        tensor = tensor.with_layout(setup.layout.with_omega(selected.omega))

    with stage("screen", policy=config.normality_policy):
        screen, tensor = screen_measurements(config, setup, tensor)

    with stage("friction", candidates=list(config.friction_models)):
        training = train_friction(config, setup, tensor)

    reports: list[UncertaintyReport] = []
    plot_rows: dict[str, list[dict[str, Any]]] = {}
    for name in training.candidates:
        with stage("detect", model=name):
            report, rows = detect_candidate(config, setup, training, name, screen)
            reports.append(report)
            plot_rows[name] = rows

    with stage("report"):
        document = ReportDocument(
            reports=reports,
            designs=table,
            selected=selected,
            greedy=greedy,
            normality=screen,
            friction={
                name: friction.to_dict()
                for name, friction in training.candidates.items()
            },
            provenance=_provenance(config, setup, selected.omega),
            sensor_names=list(setup.model.sensor_names),
            plot_rows=plot_rows,
        )
    logger.info("Pipeline finished", verdicts=document.verdicts)
    return document
