"""Tests for run configuration."""

import json

import numpy as np
import pytest

from model_uncertainty.config import (
    CANDIDATE_FRICTION_MODELS,
    DEMO_INTERNAL_SIGMA,
    DEMO_REPETITION_SIGMA,
    DEMO_SIGMA,
    RunConfig,
    load_config,
)
from model_uncertainty.exceptions import ConfigurationError
from model_uncertainty.friction import ExponentialMemoryFriction, NoFriction
from model_uncertainty.oed import DesignCriterion
from model_uncertainty.press import assemble_quasistatic
from model_uncertainty.stats import SplitKind

SINGLE_BAR = {
    "nodes": [
        {"name": "ground", "x": 0.0, "y": 0.0},
        {"name": "tip", "x": 0.0, "y": 0.1, "dofs": ["y"]},
    ],
    "elements": [
        {"type": "bar", "name": "k", "nodes": ["ground", "tip"], "stiffness": 1.0e6}
    ],
    "load_node": "tip",
    "sensors": [
        {"name": "tip", "node": "tip", "dof": "y", "sigma": 1e-6, "internal_sigma": 2e-6}
    ],
    "parameters": ["k"],
}


@pytest.mark.unit
class TestDefaults:
    """Test the built-in demonstration settings."""

    def test_defaults(self):
        """Test default values."""
        config = load_config()
        assert config.model == "press"
        assert config.criterion is DesignCriterion.E
        assert config.tol == 0.05
        assert config.n_m == 6
        assert config.training_series == 4
        assert config.seed == 20240601
        assert config.initial_scale == 0.9
        assert config.normality_policy == "abort"
        assert config.schedule.peak_force == 2000.0
        assert config.schedule.n_loading == 15
        assert config.schedule.n_unloading == 14
        assert config.friction_models == list(CANDIDATE_FRICTION_MODELS)
        assert config.memory_variant == "literal"

    def test_default_schemes(self):
        """Test the four standard scenarios."""
        schemes = [scheme.build() for scheme in load_config().schemes]
        assert [scheme.label for scheme in schemes] == [
            "loading",
            "unloading",
            "loading_vs_unloading",
            "alternating_across_all",
        ]

    def test_default_friction(self):
        """Test the synthetic friction of the demonstration."""
        friction = load_config().friction.build()
        assert isinstance(friction, ExponentialMemoryFriction)
        assert (friction.q_c, friction.scale) == (150.0, 300.0)
        assert isinstance(load_config(friction={"kind": "none"}).friction.build(), NoFriction)

    def test_default_sigma(self):
        """Test the demonstration sensor errors."""
        config = load_config()
        assert config.sensor_sigma(3) == list(DEMO_SIGMA)
        assert config.sensor_internal_sigma(3) == list(DEMO_INTERNAL_SIGMA)
        assert config.sensor_internal_sigma(2) == [None, None]
        with pytest.raises(ConfigurationError):
            load_config(sigma=[1e-6]).sensor_sigma(3)

    def test_synthetic_noise_sigma(self):
        """Test the scatter of generated series."""
        assert load_config().synthetic_noise_sigma(3) == list(DEMO_REPETITION_SIGMA)
        custom = load_config(sigma=[1e-6, 2e-6, 3e-6])
        assert custom.synthetic_noise_sigma(3) == [1e-6, 2e-6, 3e-6]
        assert custom.sensor_internal_sigma(3) == [None, None, None]
        assert load_config(noise_sigma=[4e-6] * 3).synthetic_noise_sigma(3) == [4e-6] * 3
        with pytest.raises(ConfigurationError):
            load_config(noise_sigma=[4e-6]).synthetic_noise_sigma(3)

    def test_demonstration_sigma_combines_its_parts(self):
        """Test that repetition and internal errors add up to the sensor sigma."""
        combined = np.hypot(DEMO_REPETITION_SIGMA, DEMO_INTERNAL_SIGMA)
        np.testing.assert_allclose(combined, DEMO_SIGMA, rtol=1e-3)

    def test_newton_tolerance_mode(self):
        """Test the relative Newton tolerance default."""
        assert load_config().solver.newton_relative is True
        assert load_config(solver={"newton_relative": False}).solver.newton_relative is False

    def test_default_constraint(self):
        """Test that an empty constraint admits n_p to n_S sensors."""
        constraint = load_config().constraint.build(n_p=2, n_s=3)
        assert (constraint.min_sensors, constraint.max_sensors) == (2, 3)


@pytest.mark.unit
class TestLoading:
    """Test reading and validating configuration files."""

    def test_file_and_overrides(self, tmp_path):
        """Test that overrides replace file values and None is skipped."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"criterion": "A", "n_m": 8}), encoding="utf-8")
        config = load_config(path, n_m=10, seed=None)
        assert config.criterion is DesignCriterion.A
        assert config.n_m == 10
        assert config.seed == 20240601

    def test_unknown_field(self):
        """Test that unknown keys are rejected."""
        with pytest.raises(ConfigurationError):
            load_config(sensors=3)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"tol": 1.5},
            {"criterion": "G"},
            {"n_m": 1},
            {"training_series": 6},
            {"friction_models": ["viscous"]},
            {"schemes": [{"kind": "random"}]},
            {"schemes": [{"kind": "alternating_within_phase"}]},
            {"schemes": []},
            {"normality_policy": "ignore"},
        ],
    )
    def test_invalid_values(self, overrides):
        """Test value validation."""
        with pytest.raises(ConfigurationError):
            load_config(**overrides)

    def test_measurement_file_allows_all_series_for_training(self, tmp_path):
        """Test the series count check only applies to synthetic data."""
        config = load_config(measurements=str(tmp_path / "data.csv"), training_series=6)
        assert config.training_series == 6

    def test_unreadable_file(self, tmp_path):
        """Test ConfigurationError for missing or malformed files."""
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "missing.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_config(broken)
        listing = tmp_path / "list.json"
        listing.write_text("[]", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_config(listing)

    def test_random_scheme(self):
        """Test a seeded random scheme."""
        config = load_config(schemes=[{"kind": "random", "seed": 4, "ratio": 0.4}])
        scheme = config.schemes[0].build(excluded_inputs=frozenset({0}))
        assert scheme.kind is SplitKind.RANDOM
        assert scheme.label == "random[seed=4,ratio=0.4]"
        assert scheme.excluded_inputs == frozenset({0})


@pytest.mark.unit
class TestSurrogateConfig:
    """Test user-defined surrogates."""

    def test_custom_surrogate(self):
        """Test building and assembling a configured linkage."""
        config = RunConfig.model_validate({"surrogate": SINGLE_BAR})
        surrogate = config.build_surrogate()
        model = assemble_quasistatic(surrogate)
        assert model.parameter_names == ("k",)
        assert config.sensor_sigma(1) == [1e-6]
        assert config.sensor_internal_sigma(1) == [2e-6]

    def test_default_surrogate_flags(self):
        """Test the geometric and gravity switches of the demonstration."""
        surrogate = load_config(geometric_nonlinearity=True, gravity=True).build_surrogate()
        assert surrogate.geometric_nonlinearity
        assert surrogate.gravity
        assert surrogate.parameters == ("k5", "k7")

    def test_element_validation(self):
        """Test that element stiffnesses must be positive."""
        broken = json.loads(json.dumps(SINGLE_BAR))
        broken["elements"][0]["stiffness"] = 0.0
        with pytest.raises(ConfigurationError):
            load_config(surrogate=broken)
