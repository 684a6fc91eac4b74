"""Tests for the estimation module."""

import numpy as np
import pytest

from model_uncertainty.estimation import (
    GaussNewtonOptions,
    MeasurementTensor,
    SensorLayout,
    assemble_jacobian,
    assemble_second_order,
    cell_weights,
    check_rank,
    covariance,
    covariance_at,
    estimate_with_covariance,
    identify_parameters,
    objective,
    residuals,
    sensitivity_dz_p,
)
from model_uncertainty.exceptions import (
    DimensionMismatch,
    DomainError,
    NonConvergence,
    NonFiniteValue,
    RankDeficient,
    SingularH,
    SingularHWarning,
)
from model_uncertainty.metrics import get_solver_stats
from model_uncertainty.press import (
    assemble_quasistatic,
    default_surrogate,
    generate_synthetic_measurements,
)
from model_uncertainty.stats import ellipsoid_contains

SIGMA = 0.01
K_TRUE = 2.0


@pytest.fixture
def exact_tensor(linear_spring, small_ramp, make_tensor):
    return make_tensor(linear_spring, [K_TRUE], small_ramp, [SIGMA], 6, seed=0, noise=0.0)


@pytest.fixture
def noisy_tensor(linear_spring, small_ramp, make_tensor):
    return make_tensor(linear_spring, [K_TRUE], small_ramp, [SIGMA], 6, seed=11)


def exact_covariance(k, n_m, inputs):
    """Linear-spring covariance with zero residuals: sigma^2 k^4 / (n_M sum q^2)."""
    return SIGMA**2 * k**4 / (n_m * float(np.sum(inputs**2)))


@pytest.mark.unit
class TestSensorLayout:
    """Test sensor layouts."""

    def test_defaults_to_all_sensors(self):
        """Test the default design."""
        layout = SensorLayout(sigma=[1.0, 2.0])
        assert layout.design == (1, 1)
        assert layout.n_active == 2

    def test_rejects_nonpositive_sigma(self):
        """Test sigma validation."""
        with pytest.raises(DomainError):
            SensorLayout(sigma=[1.0, 0.0])

    def test_rejects_non_binary_weights(self):
        """Test omega validation."""
        with pytest.raises(DomainError):
            SensorLayout(sigma=[1.0, 1.0], omega=[1, 2])

    def test_with_omega(self):
        """Test switching designs keeps sigma."""
        layout = SensorLayout(sigma=[1.0, 2.0, 3.0]).with_omega([1, 0, 1])
        assert layout.design == (1, 0, 1)
        np.testing.assert_array_equal(layout.sigma, [1.0, 2.0, 3.0])


@pytest.mark.unit
class TestMeasurementTensor:
    """Test measurement tensors."""

    def test_shape_must_match_schedule(self, small_ramp):
        """Test dimension checks."""
        with pytest.raises(DimensionMismatch):
            MeasurementTensor(
                z=np.zeros((2, 3, 1)), schedule=small_ramp, layout=SensorLayout([1.0])
            )

    def test_non_finite_values(self, small_ramp):
        """Test that NaN measurements are rejected."""
        z = np.zeros((2, small_ramp.n_q, 1))
        z[1, 3, 0] = np.nan
        with pytest.raises(NonFiniteValue):
            MeasurementTensor(z=z, schedule=small_ramp, layout=SensorLayout([1.0]))

    def test_vectorize_order(self, small_ramp):
        """Test sensor-fastest, then input, then series ordering."""
        z = np.arange(2 * small_ramp.n_q * 3, dtype=float).reshape(2, small_ramp.n_q, 3)
        tensor = MeasurementTensor(
            z=z, schedule=small_ramp, layout=SensorLayout([1.0, 1.0, 1.0])
        )
        flat = tensor.vectorize()
        i, j, k = 1, 4, 2
        assert flat[i * small_ramp.n_q * 3 + j * 3 + k] == z[i, j, k]

    def test_restrict_and_select(self, exact_tensor):
        """Test masks and series selection."""
        mask = np.zeros((6, exact_tensor.n_q), dtype=bool)
        mask[:, :3] = True
        restricted = exact_tensor.restrict(mask)
        assert restricted.cell_mask.sum() == 18
        subset = restricted.select_series([4, 5])
        assert subset.n_m == 2
        assert subset.cell_mask.sum() == 6
        np.testing.assert_array_equal(subset.z, exact_tensor.z[[4, 5]])


@pytest.mark.unit
class TestResiduals:
    """Test residual, objective and Jacobian assembly."""

    def test_zero_residual_at_truth(self, linear_spring, exact_tensor):
        """Test exact data at the true parameters."""
        r = residuals(linear_spring, exact_tensor.layout, exact_tensor, [K_TRUE])
        assert r.shape == (6 * exact_tensor.n_q,)
        np.testing.assert_allclose(r, 0.0, atol=1e-10)

    def test_objective_value(self, linear_spring, exact_tensor):
        """Test f = 1/2 sum ((z - q/k) / sigma)^2."""
        k = 2.5
        q = exact_tensor.schedule.inputs[:, 0]
        expected = 0.5 * float(np.sum(((exact_tensor.z[:, :, 0] - q / k) / SIGMA) ** 2))
        value = objective(linear_spring, exact_tensor.layout, exact_tensor, [k])
        assert value == pytest.approx(expected, rel=1e-10)

    def test_jacobian_rows_repeat_over_series(self, two_springs, small_ramp, make_tensor):
        """Test that Jacobian rows depend on input and sensor only."""
        tensor = make_tensor(two_springs, [2.0, 3.0], small_ramp, [0.1, 0.1, 0.1], 4, seed=2)
        jac = assemble_jacobian(two_springs, tensor.layout, tensor, [2.0, 3.0])
        per_series = small_ramp.n_q * 3
        assert jac.shape == (4 * per_series, 2)
        np.testing.assert_array_equal(jac[:per_series], jac[per_series : 2 * per_series])

    def test_gradient_matches_differenced_objective(self, linear_spring, noisy_tensor):
        """Test J^T Omega r against central differences of f."""
        layout = noisy_tensor.layout
        k, h = 1.7, 1e-6
        jac = assemble_jacobian(linear_spring, layout, noisy_tensor, [k])
        r = residuals(linear_spring, layout, noisy_tensor, [k])
        gradient = jac.T @ (cell_weights(layout, noisy_tensor) * r)
        differenced = (
            objective(linear_spring, layout, noisy_tensor, [k + h])
            - objective(linear_spring, layout, noisy_tensor, [k - h])
        ) / (2.0 * h)
        assert gradient[0] == pytest.approx(differenced, rel=1e-5)

    def test_curvature_matches_closed_form(self, linear_spring, noisy_tensor):
        """Test J^T Omega J + S against the exact second derivative of f."""
        layout = noisy_tensor.layout
        k = 1.8
        q = noisy_tensor.schedule.inputs[:, 0][None, :]
        z = noisy_tensor.z[:, :, 0]
        expected = float(
            z.shape[0] * np.sum(q**2 / (k**4 * SIGMA**2))
            - np.sum(2.0 * q * (z - q / k) / (k**3 * SIGMA**2))
        )
        jac = assemble_jacobian(linear_spring, layout, noisy_tensor, [k])
        s = assemble_second_order(linear_spring, layout, noisy_tensor, [k])
        h = float((jac.T @ jac + s)[0, 0])
        assert h == pytest.approx(expected, rel=1e-6)

    def test_curvature_matches_differenced_press_objective(
        self, press_sigma, press_p_true, ramp
    ):
        """Test J^T Omega J + S against a differenced Hessian with large rotations."""
        model = assemble_quasistatic(default_surrogate(geometric_nonlinearity=True))
        layout = SensorLayout(press_sigma)
        tensor = generate_synthetic_measurements(model, press_p_true, ramp, layout, 2, 5)
        p = press_p_true * np.array([1.02, 0.97])
        steps = 1e-3 * p

        def f(dp):
            return objective(model, layout, tensor, p + dp)

        differenced = np.empty((2, 2))
        for a in range(2):
            for b in range(2):
                ea = np.eye(2)[a] * steps[a]
                eb = np.eye(2)[b] * steps[b]
                differenced[a, b] = (
                    f(ea + eb) - f(ea - eb) - f(eb - ea) + f(-ea - eb)
                ) / (4.0 * steps[a] * steps[b])

        jac = assemble_jacobian(model, layout, tensor, p)
        s = assemble_second_order(model, layout, tensor, p)
        h = jac.T @ jac + s
        np.testing.assert_allclose(h, differenced, rtol=1e-4, atol=1e-4 * np.abs(h).max())

    def test_sensor_count_mismatch(self, linear_spring, small_ramp):
        """Test model/layout dimension checks."""
        tensor = MeasurementTensor(
            z=np.zeros((1, small_ramp.n_q, 2)),
            schedule=small_ramp,
            layout=SensorLayout([1.0, 1.0]),
        )
        with pytest.raises(DimensionMismatch):
            residuals(linear_spring, tensor.layout, tensor, [1.0])


@pytest.mark.unit
class TestCovariance:
    """Test covariance assembly."""

    def test_exact_data_covariance(self, linear_spring, exact_tensor):
        """Test C = sigma^2 k^4 / (n_M sum q^2) when residuals vanish."""
        c, clipped = covariance_at(linear_spring, exact_tensor.layout, exact_tensor, [K_TRUE])
        expected = exact_covariance(K_TRUE, 6, exact_tensor.schedule.inputs)
        assert not clipped
        assert c[0, 0] == pytest.approx(expected, rel=1e-8)

    def test_sigma_scaling(self, linear_spring, noisy_tensor):
        """Test that scaling every sigma by c scales C by c^2."""
        base, _ = covariance_at(linear_spring, noisy_tensor.layout, noisy_tensor, [1.9])
        scaled_layout = SensorLayout(sigma=3.0 * noisy_tensor.layout.sigma)
        scaled, _ = covariance_at(
            linear_spring, scaled_layout, noisy_tensor.with_layout(scaled_layout), [1.9]
        )
        np.testing.assert_allclose(scaled, 9.0 * base, rtol=1e-9)

    def test_gauss_newton_limit(self):
        """Test C = (J^T J)^-1 for S = 0 and unit weights."""
        rng = np.random.default_rng(5)
        jac = rng.standard_normal((12, 2))
        c = covariance(jac, np.zeros((2, 2)), SensorLayout(sigma=[1.0, 1.0, 1.0]))
        np.testing.assert_allclose(c, np.linalg.inv(jac.T @ jac), rtol=1e-10)

    def test_unused_sensor_rows_drop_out(self):
        """Test that omega removes the rows of unused sensors."""
        rng = np.random.default_rng(6)
        jac = rng.standard_normal((12, 2))
        layout = SensorLayout(sigma=[1.0, 1.0, 1.0], omega=[1, 1, 0])
        c = covariance(jac, np.zeros((2, 2)), layout)
        kept = np.array([r % 3 != 2 for r in range(12)])
        np.testing.assert_allclose(c, np.linalg.inv(jac[kept].T @ jac[kept]), rtol=1e-10)

    def test_indefinite_curvature_warns(self):
        """Test the clipped pseudo-inverse for an indefinite H."""
        jac = np.eye(2)
        s = np.diag([0.0, -2.0])
        with pytest.warns(SingularHWarning):
            c = covariance(jac, s, SensorLayout(sigma=[1.0]))
        np.testing.assert_allclose(c, np.diag([1.0, 0.0]), atol=1e-12)

    def test_zero_curvature_raises(self):
        """Test SingularH for a vanishing H."""
        with pytest.raises(SingularH):
            covariance(np.zeros((4, 2)), np.zeros((2, 2)), SensorLayout(sigma=[1.0]))

    def test_data_sensitivity(self, linear_spring, exact_tensor):
        """Test dp/dz against re-identification with one perturbed cell."""
        layout = exact_tensor.layout
        jac = assemble_jacobian(linear_spring, layout, exact_tensor, [K_TRUE])
        s = assemble_second_order(linear_spring, layout, exact_tensor, [K_TRUE])
        dzp = sensitivity_dz_p(jac, s, layout)
        assert dzp.shape == (1, 6 * exact_tensor.n_q)
        assert np.all(dzp <= 0.0)
        assert dzp[0, 0] == 0.0

        delta = 1e-4
        z = exact_tensor.z.copy()
        z[0, 4, 0] += delta
        perturbed = MeasurementTensor(z=z, schedule=exact_tensor.schedule, layout=layout)
        moved = identify_parameters(linear_spring, layout, perturbed, [K_TRUE]).p[0]
        assert moved - K_TRUE == pytest.approx(dzp[0, 4] * delta, rel=1e-3)


@pytest.mark.unit
class TestRank:
    """Test the identifiability check."""

    def test_sum_sensor_alone_is_deficient(self, two_springs, small_ramp, make_tensor):
        """Test that y1 + y2 cannot separate two stiffnesses."""
        tensor = make_tensor(two_springs, [2.0, 3.0], small_ramp, [0.1, 0.1, 0.1], 2, seed=1)
        with pytest.raises(RankDeficient):
            check_rank(two_springs, tensor.layout.with_omega([0, 0, 1]), tensor, [2.0, 3.0])

    def test_full_design_passes(self, two_springs, small_ramp, make_tensor):
        """Test a well-posed design."""
        tensor = make_tensor(two_springs, [2.0, 3.0], small_ramp, [0.1, 0.1, 0.1], 2, seed=1)
        check_rank(two_springs, tensor.layout.with_omega([0, 1, 1]), tensor, [2.0, 3.0])

    def test_unidentified_press_sensor_pairs(
        self, press_model, press_sigma, press_p_true, ramp
    ):
        """Test that the bearing sensor adds no stiffness information."""
        from model_uncertainty.press import generate_synthetic_measurements

        p = press_p_true
        tensor = generate_synthetic_measurements(
            press_model, p, ramp, SensorLayout(press_sigma), n_m=2, seed=0
        )
        for omega in ([1, 0, 1], [0, 1, 1]):
            with pytest.raises(RankDeficient):
                check_rank(press_model, tensor.layout.with_omega(omega), tensor, p)
        check_rank(press_model, tensor.layout.with_omega([1, 1, 0]), tensor, p)


@pytest.mark.unit
class TestIdentification:
    """Test damped Gauss-Newton identification."""

    def test_recovers_exact_parameters(self, linear_spring, exact_tensor):
        """Test noise-free identification from a distant start."""
        estimate = identify_parameters(linear_spring, exact_tensor.layout, exact_tensor, [1.2])
        assert estimate.converged
        assert estimate.p[0] == pytest.approx(K_TRUE, rel=1e-8)
        assert estimate.objective == pytest.approx(0.0, abs=1e-12)

    def test_noisy_estimate_is_close(self, linear_spring, noisy_tensor):
        """Test identification under measurement noise."""
        estimate = identify_parameters(linear_spring, noisy_tensor.layout, noisy_tensor, [1.5])
        assert estimate.converged
        assert abs(estimate.p[0] - K_TRUE) < 0.02
        assert get_solver_stats()["identifications"] == 1

    def test_two_parameters(self, two_springs, small_ramp, make_tensor):
        """Test a two-parameter identification."""
        tensor = make_tensor(two_springs, [2.0, 3.0], small_ramp, [0.01] * 3, 4, seed=3)
        estimate = identify_parameters(two_springs, tensor.layout, tensor, [1.5, 3.5])
        np.testing.assert_allclose(estimate.p, [2.0, 3.0], rtol=0.02)

    def test_unused_sensor_data_is_ignored(self, two_springs, small_ramp, make_tensor):
        """Test that omega_k = 0 removes sensor k entirely."""
        tensor = make_tensor(two_springs, [2.0, 3.0], small_ramp, [0.01] * 3, 4, seed=4)
        layout = tensor.layout.with_omega([1, 1, 0])
        z = tensor.z.copy()
        z[:, :, 2] += 5.0
        altered = MeasurementTensor(z=z, schedule=tensor.schedule, layout=tensor.layout)
        first = estimate_with_covariance(two_springs, layout, tensor, [1.5, 3.5])
        second = estimate_with_covariance(two_springs, layout, altered, [1.5, 3.5])
        np.testing.assert_allclose(first.p, second.p, rtol=1e-12)
        np.testing.assert_allclose(first.covariance, second.covariance, rtol=1e-10)

    def test_start_below_bounds(self, linear_spring, exact_tensor):
        """Test DomainError for an inadmissible start."""
        with pytest.raises(DomainError):
            identify_parameters(linear_spring, exact_tensor.layout, exact_tensor, [-1.0])

    def test_too_few_active_sensors(self, two_springs, small_ramp, make_tensor):
        """Test RankDeficient when fewer sensors than parameters are used."""
        tensor = make_tensor(two_springs, [2.0, 3.0], small_ramp, [0.1] * 3, 2, seed=1)
        with pytest.raises(RankDeficient):
            identify_parameters(
                two_springs, tensor.layout.with_omega([0, 0, 1]), tensor, [2.0, 3.0]
            )

    def test_iteration_limit(self, linear_spring, noisy_tensor):
        """Test NonConvergence after the iteration limit."""
        with pytest.raises(NonConvergence):
            identify_parameters(
                linear_spring,
                noisy_tensor.layout,
                noisy_tensor,
                [1.0],
                GaussNewtonOptions(max_iter=1),
            )

    def test_damping_overflow_raises(self, linear_spring, noisy_tensor):
        """Test NonConvergence when every trial step leaves the bounds."""
        # Gauss-Newton steps from k = 20 overshoot below zero until lambda > 1
        with pytest.raises(NonConvergence, match="stagnated") as exc_info:
            identify_parameters(
                linear_spring,
                noisy_tensor.layout,
                noisy_tensor,
                [20.0],
                GaussNewtonOptions(max_damping=1.0),
            )
        assert exc_info.value.context["p"] == [20.0]
        stats = get_solver_stats()
        assert stats["failed_identifications"] == 1
        assert stats["rejected_steps"] >= 1

    def test_damping_overflow_propagates_from_covariance_estimate(
        self, linear_spring, noisy_tensor
    ):
        """Test that no covariance is built at a stagnated point."""
        with pytest.raises(NonConvergence):
            estimate_with_covariance(
                linear_spring,
                noisy_tensor.layout,
                noisy_tensor,
                [20.0],
                GaussNewtonOptions(max_damping=1.0),
            )

    def test_estimate_with_covariance(self, linear_spring, exact_tensor):
        """Test the attached covariance and its serialization."""
        estimate = estimate_with_covariance(
            linear_spring, exact_tensor.layout, exact_tensor, [1.5]
        )
        expected = exact_covariance(K_TRUE, 6, exact_tensor.schedule.inputs)
        assert estimate.covariance[0, 0] == pytest.approx(expected, rel=1e-6)
        data = estimate.to_dict()
        assert data["converged"] is True
        assert data["covariance"][0][0] == pytest.approx(expected, rel=1e-6)


@pytest.mark.slow
class TestCoverage:
    """Monte Carlo checks of covariances and confidence ellipsoids."""

    @pytest.mark.parametrize("alpha", [0.05, 0.32])
    def test_ellipsoid_coverage(self, linear_spring, small_ramp, make_tensor, alpha):
        """Test that G(alpha) covers the truth with probability 1 - alpha."""
        runs, hits = 2000, 0
        for seed in range(runs):
            tensor = make_tensor(linear_spring, [K_TRUE], small_ramp, [SIGMA], 6, seed=seed)
            estimate = estimate_with_covariance(
                linear_spring, tensor.layout, tensor, [K_TRUE]
            )
            hits += ellipsoid_contains([K_TRUE], estimate.p, estimate.covariance, alpha)
        assert abs(hits / runs - (1.0 - alpha)) <= 0.03

    def test_press_covariance_matches_scatter(
        self, press_model, press_sigma, press_p_true, ramp
    ):
        """Test C against the scatter of press estimates over noise draws."""
        layout = SensorLayout(press_sigma)
        exact = generate_synthetic_measurements(
            press_model, press_p_true, ramp, layout, n_m=6, seed=0, noise_scale=0.0
        )
        expected, _ = covariance_at(press_model, layout, exact, press_p_true)
        draws = np.array(
            [
                identify_parameters(
                    press_model,
                    layout,
                    generate_synthetic_measurements(
                        press_model, press_p_true, ramp, layout, n_m=6, seed=seed
                    ),
                    press_p_true,
                ).p
                for seed in range(2000)
            ]
        )
        scatter = np.cov(draws, rowvar=False)
        np.testing.assert_allclose(np.diag(scatter), np.diag(expected), rtol=0.1)
        # Off-diagonal terms against the scale of the diagonal
        scale = np.sqrt(expected[0, 0] * expected[1, 1])
        assert abs(scatter[0, 1] - expected[0, 1]) <= 0.1 * scale
