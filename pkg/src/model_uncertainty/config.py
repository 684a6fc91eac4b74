"""
Run configuration.

Configuration files are JSON documents validated by the pydantic models
below. Every field has a default, so an empty object runs the built-in
press demonstration.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigurationError
from .friction import (
    CoulombFriction,
    ExponentialMemoryFriction,
    FrictionModel,
    MemoryVariant,
    NoFriction,
)
from .logging import get_logger
from .model import Phase
from .oed import CardinalityConstraint, DesignCriterion
from .press import (
    BarElement,
    BeamElement,
    JointElement,
    Node,
    PressSurrogate,
    Sensor,
    default_surrogate,
)
from .stats import SplitKind, SplitScheme

logger = get_logger(__name__)

CANDIDATE_FRICTION_MODELS = ("none", "coulomb", "memory_arctan")
# Sensor errors of the demonstration layout in meters: scatter of repeated
# series, internal error of the sensor, and their root sum of squares
DEMO_REPETITION_SIGMA = (5.5147e-06, 3.3108e-06, 1.4974e-06)
DEMO_INTERNAL_SIGMA = (1.4142e-05, 3.6055e-06, 3.6055e-06)
DEMO_SIGMA = (1.518e-05, 4.895e-06, 3.904e-06)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NodeConfig(_Strict):
    name: str
    x: float
    y: float
    dofs: list[Literal["x", "y", "rot"]] = Field(default_factory=list)
    mass: float = Field(default=0.0, ge=0.0)


class BarConfig(_Strict):
    type: Literal["bar"] = "bar"
    name: str
    nodes: tuple[str, str]
    stiffness: float = Field(gt=0.0)
    masses: tuple[float, float] = (0.0, 0.0)


class BeamConfig(_Strict):
    type: Literal["beam"] = "beam"
    name: str
    nodes: tuple[str, str, str]
    k_alpha: float = Field(gt=0.0)
    k_beta: float = Field(gt=0.0)
    length: float = Field(gt=0.0)
    mass: float = Field(default=0.0, ge=0.0)


class JointConfig(_Strict):
    type: Literal["joint"] = "joint"
    name: str
    nodes: tuple[str, str]
    stiffness: float = Field(gt=0.0)


ElementConfig = Annotated[BarConfig | BeamConfig | JointConfig, Field(discriminator="type")]


class SensorConfig(_Strict):
    name: str
    node: str
    dof: Literal["x", "y", "rot"]
    sign: float = 1.0
    sigma: float = Field(gt=0.0)
    internal_sigma: float | None = Field(default=None, ge=0.0)


class SurrogateConfig(_Strict):
    """User-defined linkage."""

    nodes: list[NodeConfig]
    elements: list[ElementConfig]
    load_node: str
    load_dof: Literal["x", "y", "rot"] = "y"
    sensors: list[SensorConfig] = Field(min_length=1)
    parameters: list[str] = Field(min_length=1)
    gravity: bool = False
    geometric_nonlinearity: bool = False

    def to_surrogate(self) -> PressSurrogate:
        bars = [e for e in self.elements if isinstance(e, BarConfig)]
        beams = [e for e in self.elements if isinstance(e, BeamConfig)]
        joints = [e for e in self.elements if isinstance(e, JointConfig)]
        return PressSurrogate(
            nodes=tuple(
                Node(n.name, n.x, n.y, tuple(n.dofs), mass=n.mass) for n in self.nodes
            ),
            bars=tuple(
                BarElement(b.name, b.nodes[0], b.nodes[1], b.stiffness, b.masses)
                for b in bars
            ),
            beams=tuple(
                BeamElement(b.name, b.nodes, b.k_alpha, b.k_beta, b.length, b.mass)
                for b in beams
            ),
            joints=tuple(
                JointElement(j.name, j.nodes[0], j.nodes[1], j.stiffness) for j in joints
            ),
            load_node=self.load_node,
            load_dof=self.load_dof,
            sensors=tuple(Sensor(s.name, s.node, s.dof, s.sign) for s in self.sensors),
            parameters=tuple(self.parameters),
            gravity=self.gravity,
            geometric_nonlinearity=self.geometric_nonlinearity,
        )


class FrictionConfig(_Strict):
    """Friction acting while synthetic data are generated."""

    kind: Literal["none", "coulomb", "exponential_memory"] = "exponential_memory"
    q_c: float = Field(default=150.0, ge=0.0)
    scale: float = Field(default=300.0, gt=0.0)

    def build(self) -> FrictionModel:
        if self.kind == "none":
            return NoFriction()
        if self.kind == "coulomb":
            return CoulombFriction(self.q_c)
        return ExponentialMemoryFriction(self.q_c, self.scale)


class ScheduleConfig(_Strict):
    peak_force: float = Field(default=2000.0, gt=0.0)
    n_loading: int = Field(default=15, ge=2)
    n_unloading: int = Field(default=14, ge=1)
    exclude_zero_setpoints: bool = True


class ConstraintConfig(_Strict):
    min_sensors: int | None = Field(default=None, ge=0)
    max_sensors: int | None = Field(default=None, ge=0)
    forced_on: list[int] = Field(default_factory=list)
    forced_off: list[int] = Field(default_factory=list)

    def build(self, n_p: int, n_s: int) -> CardinalityConstraint:
        return CardinalityConstraint(
            min_sensors=n_p if self.min_sensors is None else self.min_sensors,
            max_sensors=n_s if self.max_sensors is None else self.max_sensors,
            forced_on=frozenset(self.forced_on),
            forced_off=frozenset(self.forced_off),
        )


class SchemeConfig(_Strict):
    kind: SplitKind
    phase: Literal["loading", "unloading"] | None = None
    seed: int | None = None
    ratio: float = Field(default=0.5, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_kind(self) -> SchemeConfig:
        if self.kind is SplitKind.RANDOM and self.seed is None:
            raise ValueError("random split schemes need an explicit seed")
        if self.kind is SplitKind.ALTERNATING_WITHIN_PHASE and self.phase is None:
            raise ValueError("alternating-within-phase schemes need a phase")
        return self

    def build(self, excluded_inputs: frozenset[int] | None = None) -> SplitScheme:
        return SplitScheme(
            kind=self.kind,
            phase=None if self.phase is None else Phase(self.phase),
            seed=self.seed,
            ratio=self.ratio,
            excluded_inputs=excluded_inputs,
        )


def _standard_schemes() -> list[SchemeConfig]:
    return [
        SchemeConfig(kind=s.kind, phase=None if s.phase is None else s.phase.value)
        for s in SplitScheme.standard_suite()
    ]


class SolverConfig(_Strict):
    tol_grad: float = Field(default=1e-8, gt=0.0)
    max_iter: int = Field(default=200, ge=1)
    newton_tol: float = Field(default=1e-10, gt=0.0)
    newton_max_iter: int = Field(default=100, ge=1)
    cond_cap: float = Field(default=1e12, gt=1.0)
    rank_tol: float = Field(default=1e-10, gt=0.0)
    newton_relative: bool = True


class RunConfig(_Strict):
    """Everything a pipeline run needs; see ``load_config``."""

    model: Literal["press"] = "press"
    surrogate: SurrogateConfig | None = None
    geometric_nonlinearity: bool = False
    gravity: bool = False
    p_true: list[float] | None = None
    initial_scale: float = Field(default=0.9, gt=0.0)
    sigma: list[float] | None = None
    internal_sigma: list[float | None] | None = None
    noise_sigma: list[float] | None = None
    constraint: ConstraintConfig = Field(default_factory=ConstraintConfig)
    criterion: DesignCriterion = DesignCriterion.E
    tol: float = Field(default=0.05, gt=0.0, lt=1.0)
    schemes: list[SchemeConfig] = Field(default_factory=_standard_schemes, min_length=1)
    friction_models: list[Literal["none", "coulomb", "memory_arctan"]] = Field(
        default_factory=lambda: list(CANDIDATE_FRICTION_MODELS), min_length=1
    )
    memory_variant: MemoryVariant = "literal"
    friction: FrictionConfig = Field(default_factory=FrictionConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    n_m: int = Field(default=6, ge=2)
    training_series: int = Field(default=4, ge=1)
    force_jitter: float = Field(default=0.0, ge=0.0)
    seed: int = 20240601
    measurements: Path | None = None
    reuse_initial_data: bool = True
    normality_level: float = Field(default=0.05, gt=0.0, lt=1.0)
    normality_policy: Literal["abort", "warn", "skip"] = "abort"
    early_exit: bool = False
    solver: SolverConfig = Field(default_factory=SolverConfig)
    output_dir: Path = Path("results")

    @model_validator(mode="after")
    def _check_counts(self) -> RunConfig:
        if self.measurements is None and self.training_series >= self.n_m:
            raise ValueError("training_series must leave at least one test series")
        return self

    def build_surrogate(self) -> PressSurrogate:
        if self.surrogate is not None:
            return self.surrogate.to_surrogate()
        return default_surrogate(
            geometric_nonlinearity=self.geometric_nonlinearity, gravity=self.gravity
        )

    def _demo_layout(self, n_s: int) -> bool:
        return self.surrogate is None and self.sigma is None and n_s == len(DEMO_SIGMA)

    def sensor_sigma(self, n_s: int) -> list[float]:
        if self.surrogate is not None:
            return [s.sigma for s in self.surrogate.sensors]
        if self.sigma is not None:
            sigma = self.sigma
        elif self._demo_layout(n_s):
            sigma = list(DEMO_SIGMA)
        else:
            sigma = [DEMO_SIGMA[0]] * n_s
        if len(sigma) != n_s:
            raise ConfigurationError("One sigma per sensor required", n_s=n_s, got=len(sigma))
        return list(sigma)

    def sensor_internal_sigma(self, n_s: int) -> list[float | None]:
        if self.surrogate is not None:
            return [s.internal_sigma for s in self.surrogate.sensors]
        internal: list[float | None]
        if self.internal_sigma is not None:
            internal = list(self.internal_sigma)
        elif self._demo_layout(n_s):
            internal = list(DEMO_INTERNAL_SIGMA)
        else:
            internal = [None] * n_s
        if len(internal) != n_s:
            raise ConfigurationError(
                "One internal sigma per sensor required", n_s=n_s, got=len(internal)
            )
        return internal

    def synthetic_noise_sigma(self, n_s: int) -> list[float]:
        """
        Scatter of generated series; the sensor sigmas unless configured.

        The demonstration layout scatters at the repetition level only, its
        internal errors enter through the sigma derivation after screening.
        """
        if self.noise_sigma is not None:
            noise = list(self.noise_sigma)
        elif self._demo_layout(n_s):
            noise = list(DEMO_REPETITION_SIGMA)
        else:
            noise = self.sensor_sigma(n_s)
        if len(noise) != n_s:
            raise ConfigurationError(
                "One noise sigma per sensor required", n_s=n_s, got=len(noise)
            )
        return noise


def load_config(path: str | Path | None = None, **overrides: object) -> RunConfig:
    """
    Load and validate a run configuration.

    Args:
        path: JSON file; defaults only when omitted
        **overrides: Field values replacing those of the file (None skipped)

    Raises:
        ConfigurationError: unreadable file or invalid values
    """
    data: dict[str, object] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError("Cannot read configuration", path=str(path)) from exc
        if not isinstance(data, dict):
            raise ConfigurationError("Configuration must be a JSON object", path=str(path))
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(
            "Invalid configuration",
            path=str(path) if path else None,
            errors=exc.error_count(),
            detail=str(exc),
        ) from exc
    logger.debug("Configuration loaded", path=str(path) if path else None)
    return config
