"""Tests for the end-to-end pipeline."""

import json

import numpy as np
import pytest

from model_uncertainty.config import DEMO_INTERNAL_SIGMA, DEMO_SIGMA, load_config
from model_uncertainty.estimation import MeasurementTensor, SensorLayout
from model_uncertainty.exceptions import (
    ConfigurationError,
    DomainError,
    NormalityRejected,
    PipelineStageError,
)
from model_uncertainty.model import InputSchedule
from model_uncertainty.pipeline import (
    derive_sigma,
    prepare,
    run_pipeline,
    screen_measurements,
    stage,
    train_friction,
)
from model_uncertainty.stats import NormalityScreen, SensorNormality

SKEWED = [148, 154, 158, 160, 161, 162, 166, 170, 182, 195, 236]
SCENARIOS = ("loading", "unloading", "loading_vs_unloading", "alternating_across_all")


@pytest.fixture
def skewed_tensor():
    schedule = InputSchedule.from_setpoints(np.arange(1.0, 12.0))
    z = np.zeros((2, 11, 3))
    z[1, :, 0] = SKEWED
    return MeasurementTensor(
        z=z, schedule=schedule, layout=SensorLayout([1.0, 1.0, 1.0], omega=[1, 0, 0])
    )


@pytest.mark.unit
class TestStage:
    """Test stage error labelling."""

    def test_wraps_domain_errors(self):
        """Test that package errors carry the stage and exit code."""
        with pytest.raises(PipelineStageError) as exc_info:
            with stage("oed"):
                raise DomainError("bad value")
        assert exc_info.value.stage == "oed"
        assert exc_info.value.exit_code == 2
        assert isinstance(exc_info.value.cause, DomainError)

    def test_keeps_inner_stage(self):
        """Test that nested stages keep the innermost label."""
        with pytest.raises(PipelineStageError) as exc_info:
            with stage("outer"):
                with stage("inner"):
                    raise NormalityRejected("not normal")
        assert exc_info.value.stage == "inner"
        assert exc_info.value.exit_code == 3

    def test_other_errors_pass_through(self):
        """Test that programming errors are not relabelled."""
        with pytest.raises(ValueError):
            with stage("data"):
                raise ValueError("bug")


@pytest.mark.unit
class TestStages:
    """Test individual pipeline stages."""

    def test_prepare(self):
        """Test the demonstration setup."""
        setup = prepare(load_config())
        np.testing.assert_array_equal(setup.p_true, [2.0e6, 4.0e6])
        np.testing.assert_allclose(setup.p0, [1.8e6, 3.6e6])
        assert setup.layout.n_s == 3
        assert setup.internal_sigma == DEMO_INTERNAL_SIGMA
        np.testing.assert_allclose(setup.layout.sigma, DEMO_SIGMA)

    def test_prepare_checks_parameter_count(self):
        """Test ConfigurationError for a wrong p_true length."""
        with pytest.raises(ConfigurationError):
            prepare(load_config(p_true=[1.0]))

    def test_derive_sigma(self):
        """Test that only sensors with an internal error are combined."""
        screen = NormalityScreen(
            level=0.05, results=(SensorNormality(0, 10, 0.99, 0.5, 3.0, False),)
        )
        layout = derive_sigma(SensorLayout([1.0, 1.0], omega=[1, 0]), screen, (4.0, None))
        np.testing.assert_allclose(layout.sigma, [5.0, 1.0])
        np.testing.assert_array_equal(layout.omega, [1, 0])

    def test_screen_abort(self, skewed_tensor):
        """Test NormalityRejected under the abort policy."""
        config = load_config(normality_policy="abort")
        with pytest.raises(NormalityRejected) as exc_info:
            screen_measurements(config, prepare(config), skewed_tensor)
        assert exc_info.value.context["sensors"] == [0]

    def test_screen_aborts_by_default(self, skewed_tensor):
        """Test that a non-normal sample raises under the default policy."""
        config = load_config()
        assert config.normality_policy == "abort"
        with pytest.raises(NormalityRejected):
            screen_measurements(config, prepare(config), skewed_tensor)

    def test_screen_warn(self, skewed_tensor):
        """Test that the warn policy returns the failed screen."""
        config = load_config(normality_policy="warn")
        screen, tensor = screen_measurements(config, prepare(config), skewed_tensor)
        assert not screen.passed
        assert [r.sensor for r in screen.results] == [0]
        np.testing.assert_array_equal(tensor.z, skewed_tensor.z)

    def test_screen_skip(self, skewed_tensor):
        """Test that the skip policy leaves the tensor alone."""
        config = load_config(normality_policy="skip")
        screen, tensor = screen_measurements(config, prepare(config), skewed_tensor)
        assert screen is None
        assert tensor is skewed_tensor

    def test_training_needs_test_series(self, skewed_tensor):
        """Test that at least one series is held out."""
        config = load_config(measurements="data.csv", training_series=2)
        with pytest.raises(ConfigurationError):
            train_friction(config, prepare(config), skewed_tensor)


@pytest.mark.integration
class TestRunPipeline:
    """Test complete runs on synthetic press data."""

    @pytest.fixture
    def demo_config(self, tmp_path):
        # Paired differences of two sensors fail the screen in about one run of ten
        return load_config(output_dir=str(tmp_path), normality_policy="warn")

    @staticmethod
    def _rejections(document, model_id):
        (report,) = [r for r in document.reports if r.model_id == model_id]
        return {result.scenario_id: result.rejected for result in report.scenarios}

    def test_demonstration_run(self, demo_config, tmp_path):
        """Test design, friction candidates and verdicts of the default run."""
        document = run_pipeline(demo_config)

        assert document.selected.label == "110"
        assert document.greedy.feasible
        assert [d.label for d in document.designs] == ["011", "101", "110", "111"]
        assert [r.model_id for r in document.reports] == ["none", "coulomb", "memory_arctan"]
        assert all(len(r.scenarios) == 4 for r in document.reports)
        assert all(r.threshold == pytest.approx(0.0125) for r in document.reports)
        assert document.provenance["seed"] == demo_config.seed
        assert document.provenance["omega_opt"] == [1, 1, 0]
        assert set(document.friction) == {"none", "coulomb", "memory_arctan"}

        assert self._rejections(document, "none") == dict.fromkeys(SCENARIOS, True)
        coulomb = self._rejections(document, "coulomb")
        assert not coulomb["loading"]
        assert coulomb["unloading"]
        assert coulomb["loading_vs_unloading"]
        assert coulomb["alternating_across_all"]
        assert self._rejections(document, "memory_arctan") == dict.fromkeys(
            SCENARIOS, False
        )
        assert document.verdicts == {"none": 1, "coulomb": 1, "memory_arctan": 0}

        written = document.write(tmp_path)
        assert (tmp_path / "report.json") in written
        report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
        assert report["verdicts"] == {"none": 1, "coulomb": 1, "memory_arctan": 0}
        assert report["sensors"] == ["D_vertical", "F_vertical", "B0_vertical"]

    def test_runs_are_reproducible(self, demo_config, tmp_path):
        """Test byte-identical output files of two runs with one seed."""
        first = run_pipeline(demo_config).write(tmp_path / "first")
        second = run_pipeline(demo_config).write(tmp_path / "second")
        assert [path.name for path in first] == [path.name for path in second]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes(), a.name

    def test_setup_failure_is_labelled(self):
        """Test the stage and exit code of a failed run."""
        with pytest.raises(PipelineStageError) as exc_info:
            run_pipeline(load_config(p_true=[1.0]))
        assert exc_info.value.stage == "setup"
        assert exc_info.value.exit_code == 2
