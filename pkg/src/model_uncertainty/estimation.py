"""
Weighted least-squares identification and covariance assembly.

Residuals follow r = Sigma^-1 (z - h(y(p), p, q)) arranged sensor fastest,
then input, then series. Binary sensor weights omega and the cell mask of a
measurement tensor enter through the diagonal weight matrix Omega. The
covariance of an estimate is C = H^-1 J^T Omega^2 J H^-T with
H = J^T Omega J + S, where S carries the second derivatives of the residuals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .exceptions import (
    DimensionMismatch,
    DomainError,
    InvalidModel,
    NonConvergence,
    NonFiniteValue,
    RankDeficient,
    SingularH,
    SingularHWarning,
    SingularJacobian,
)
from .logging import get_logger
from .metrics import get_solver_monitor
from .model import (
    Array,
    InputSchedule,
    NewtonOptions,
    StateEquationModel,
    solve_schedule,
    state_second_directional,
    state_sensitivity,
)

logger = get_logger(__name__)

BoolArray = NDArray[np.bool_]


@dataclass(frozen=True)
class SensorLayout:
    """Per-sensor standard deviations and binary usage weights."""

    sigma: Array
    omega: NDArray[np.int64] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        sigma = np.array(self.sigma, dtype=float).reshape(-1)
        if sigma.size < 1:
            raise InvalidModel("Sensor layout needs at least one sensor")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0.0):
            raise DomainError("Standard deviations must be positive", sigma=sigma.tolist())
        if self.omega is None:
            omega = np.ones(sigma.size, dtype=np.int64)
        else:
            raw = np.asarray(self.omega).reshape(-1)
            if raw.size != sigma.size or not np.all(np.isin(raw, (0, 1))):
                raise DomainError(
                    "Sensor weights must be binary with one entry per sensor",
                    omega=raw.tolist(),
                )
            omega = raw.astype(np.int64)
        sigma.setflags(write=False)
        omega.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "omega", omega)

    @property
    def n_s(self) -> int:
        return int(self.sigma.size)

    @property
    def n_active(self) -> int:
        return int(self.omega.sum())

    @property
    def design(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self.omega)

    def with_omega(self, omega: ArrayLike) -> SensorLayout:
        return SensorLayout(sigma=self.sigma, omega=np.asarray(omega))


@dataclass(frozen=True)
class MeasurementTensor:
    """
    Measurements z[i, j, k] for series i, input j and sensor k.

    ``mask`` selects the (series, input) cells that take part in an
    identification; calibration and validation sets are masks over one
    tensor. ``realized`` holds the actually applied inputs per cell when
    they were recorded.
    """

    z: Array
    schedule: InputSchedule
    layout: SensorLayout
    realized: Array | None = None
    mask: BoolArray | None = None

    def __post_init__(self) -> None:
        z = np.array(self.z, dtype=float)
        if z.ndim != 3:
            raise DimensionMismatch("Measurements must be a 3-D tensor", ndim=z.ndim)
        n_m, n_q, n_s = z.shape
        if n_m < 1 or n_q != self.schedule.n_q or n_s != self.layout.n_s:
            raise DimensionMismatch(
                "Measurement tensor does not match schedule and layout",
                shape=z.shape,
                n_q=self.schedule.n_q,
                n_s=self.layout.n_s,
            )
        if not np.all(np.isfinite(z)):
            raise NonFiniteValue("Measurements contain non-finite values")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

        if self.realized is not None:
            realized = np.array(self.realized, dtype=float)
            if realized.shape != (n_m, n_q):
                raise DimensionMismatch(
                    "Realized inputs must have one value per cell",
                    shape=realized.shape,
                )
            if not np.all(np.isfinite(realized)):
                raise NonFiniteValue("Realized inputs contain non-finite values")
            realized.setflags(write=False)
            object.__setattr__(self, "realized", realized)

        mask = (
            np.ones((n_m, n_q), dtype=bool)
            if self.mask is None
            else np.array(self.mask, dtype=bool)
        )
        if mask.shape != (n_m, n_q):
            raise DimensionMismatch("Cell mask has wrong shape", shape=mask.shape)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def n_m(self) -> int:
        return int(self.z.shape[0])

    @property
    def n_q(self) -> int:
        return int(self.z.shape[1])

    @property
    def n_s(self) -> int:
        return int(self.z.shape[2])

    @property
    def cell_mask(self) -> BoolArray:
        assert self.mask is not None
        return self.mask

    def vectorize(self) -> Array:
        """Flatten z with sensor fastest, then input, then series."""
        return self.z.reshape(-1)

    def restrict(self, mask: ArrayLike) -> MeasurementTensor:
        """Return a view of the tensor limited to the cells in ``mask``."""
        return replace(self, mask=self.cell_mask & np.asarray(mask, dtype=bool))

    def select_series(self, indices: ArrayLike) -> MeasurementTensor:
        """Return a tensor with only the given series, in the given order."""
        idx = np.asarray(indices, dtype=int)
        return MeasurementTensor(
            z=self.z[idx],
            schedule=self.schedule,
            layout=self.layout,
            realized=None if self.realized is None else self.realized[idx],
            mask=self.cell_mask[idx],
        )

    def with_layout(self, layout: SensorLayout) -> MeasurementTensor:
        return replace(self, layout=layout)


@dataclass(frozen=True)
class Estimate:
    """
    Identified parameters with covariance and solver diagnostics.

    Identification raises instead of returning an unconverged point, so
    ``converged`` is set on every estimate it hands out.
    """

    p: Array
    objective: float
    gradient_norm: float
    iterations: int
    converged: bool
    covariance: Array | None = None
    rejected_steps: int = 0
    singular_h: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "p": self.p.tolist(),
            "covariance": None
            if self.covariance is None
            else self.covariance.tolist(),
            "objective": self.objective,
            "gradient_norm": self.gradient_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "rejected_steps": self.rejected_steps,
            "singular_h": self.singular_h,
        }


@dataclass(frozen=True)
class GaussNewtonOptions:
    """Settings for the damped Gauss-Newton identification."""

    tol_grad: float = 1e-8
    max_iter: int = 200
    initial_damping: float = 1e-3
    max_damping: float = 1e16
    rank_tol: float = 1e-10
    newton: NewtonOptions = field(default_factory=NewtonOptions)


@dataclass(frozen=True)
class _Linearization:
    outputs: Array  # (n_q, n_s)
    jacobian: Array  # (n_q, n_s, n_p), already scaled by -1/sigma
    states: Array  # (n_q, d_y)
    active: BoolArray  # inputs with at least one masked-in cell


def _check_dimensions(
    model: StateEquationModel, layout: SensorLayout, tensor: MeasurementTensor
) -> None:
    if layout.n_s != model.n_s or tensor.n_s != model.n_s:
        raise DimensionMismatch(
            "Sensor count differs between model, layout and tensor",
            model=model.n_s,
            layout=layout.n_s,
            tensor=tensor.n_s,
        )
    if tensor.schedule.d_q != model.d_q:
        raise DimensionMismatch(
            "Input dimension differs between model and schedule",
            model=model.d_q,
            schedule=tensor.schedule.d_q,
        )


def _linearize(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p: Array,
    newton: NewtonOptions,
    with_jacobian: bool = True,
) -> _Linearization:
    active = tensor.cell_mask.any(axis=0)
    idx = np.flatnonzero(active)
    outputs = np.zeros((tensor.n_q, model.n_s))
    jacobian = np.zeros((tensor.n_q, model.n_s, model.n_p))
    states = np.zeros((tensor.n_q, model.d_y))
    if idx.size == 0:
        return _Linearization(outputs, jacobian, states, active)

    inputs = tensor.schedule.inputs
    solution = solve_schedule(model, p, inputs[idx], options=newton)
    for j, y in zip(idx, solution.states):
        q = inputs[j]
        states[j] = y
        outputs[j] = model.observation(y, p, q)
        if with_jacobian:
            sens = state_sensitivity(model, p, q, y, cond_cap=newton.cond_cap)
            dh = model.observation_dy(y, p, q) @ sens + model.observation_dp(y, p, q)
            jacobian[j] = -dh / layout.sigma[:, None]
    return _Linearization(outputs, jacobian, states, active)


def _scaled_residuals(
    layout: SensorLayout, tensor: MeasurementTensor, lin: _Linearization
) -> Array:
    r = (tensor.z - lin.outputs[None, :, :]) / layout.sigma[None, None, :]
    return np.where(lin.active[None, :, None], r, 0.0)


def cell_weights(layout: SensorLayout, tensor: MeasurementTensor) -> Array:
    """Diagonal of Omega: omega_k for masked-in cells, zero elsewhere."""
    w = tensor.cell_mask[:, :, None] * layout.omega[None, None, :]
    return w.astype(float).reshape(-1)


def residuals(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p: ArrayLike,
    newton: NewtonOptions | None = None,
) -> Array:
    """
    Scaled residual vector r = Sigma^-1 (z - h) of length n_M * n_q * n_S.

    Residuals of unused sensors are computed as well. Inputs without any
    masked-in cell are not solved and contribute zeros.
    """
    _check_dimensions(model, layout, tensor)
    lin = _linearize(
        model,
        layout,
        tensor,
        np.asarray(p, dtype=float),
        newton or NewtonOptions(),
        with_jacobian=False,
    )
    return _scaled_residuals(layout, tensor, lin).reshape(-1)


def objective(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p: ArrayLike,
    newton: NewtonOptions | None = None,
) -> float:
    """Weighted least-squares objective f = 1/2 r^T Omega r."""
    r = residuals(model, layout, tensor, p, newton)
    return 0.5 * float(np.sum(cell_weights(layout, tensor) * r * r))


def assemble_jacobian(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p: ArrayLike,
    newton: NewtonOptions | None = None,
) -> Array:
    """
    Residual Jacobian dr/dp with rows ordered like ``residuals``.

    Rows are identical across series since only z depends on the series.
    """
    _check_dimensions(model, layout, tensor)
    lin = _linearize(
        model, layout, tensor, np.asarray(p, dtype=float), newton or NewtonOptions()
    )
    full = np.broadcast_to(
        lin.jacobian[None], (tensor.n_m, tensor.n_q, model.n_s, model.n_p)
    )
    return full.reshape(-1, model.n_p).copy()


def assemble_second_order(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p: ArrayLike,
    newton: NewtonOptions | None = None,
) -> Array:
    """
    Second order term S = sum_i r_i Omega_ii d2r_i/dp2.

    The Hessian of each observation with respect to p is contracted once per
    input and weighted by the summed residuals of the masked-in series.
    """
    _check_dimensions(model, layout, tensor)
    newton = newton or NewtonOptions()
    p_vec = np.asarray(p, dtype=float)
    lin = _linearize(model, layout, tensor, p_vec, newton, with_jacobian=False)
    r = _scaled_residuals(layout, tensor, lin)
    # (n_q, n_s) residual sums weighted by the cell mask and omega
    weight = np.einsum("ij,ijk->jk", tensor.cell_mask.astype(float), r)
    weight = weight * layout.omega[None, :] / layout.sigma[None, :]

    basis = np.eye(model.n_p)
    s = np.zeros((model.n_p, model.n_p))
    for j in np.flatnonzero(lin.active):
        if not np.any(weight[j]):
            continue
        q = tensor.schedule.inputs[j]
        y = lin.states[j]
        sens = state_sensitivity(model, p_vec, q, y, cond_cap=newton.cond_cap)
        h_y = model.observation_dy(y, p_vec, q)
        for a in range(model.n_p):
            for b in range(a, model.n_p):
                ya, yb = sens[:, a], sens[:, b]
                ea, eb = basis[a], basis[b]
                y2 = state_second_directional(
                    model, p_vec, q, y, ea, eb, sensitivity=sens
                )
                hess = (
                    model.observation_dyy(y, p_vec, q, ya, yb)
                    + model.observation_dyp(y, p_vec, q, ya, eb)
                    + model.observation_dyp(y, p_vec, q, yb, ea)
                    + model.observation_dpp(y, p_vec, q, ea, eb)
                    + h_y @ y2
                )
                # d2r/dp2 = -hess / sigma; the 1/sigma factor sits in weight
                value = -float(weight[j] @ hess)
                s[a, b] += value
                if a != b:
                    s[b, a] += value
    return 0.5 * (s + s.T)


def _row_weights(layout: SensorLayout, n_rows: int, cell_mask: ArrayLike | None) -> Array:
    if n_rows % layout.n_s:
        raise DimensionMismatch(
            "Jacobian rows are not a multiple of the sensor count",
            rows=n_rows,
            n_s=layout.n_s,
        )
    omega = np.tile(layout.omega.astype(float), n_rows // layout.n_s)
    if cell_mask is not None:
        omega = omega * np.asarray(cell_mask, dtype=float).reshape(-1)
    return omega


def _invert_h(h: Array, cond_cap: float = 1e12) -> tuple[Array, bool]:
    h = 0.5 * (h + h.T)
    if not np.all(np.isfinite(h)) or not np.any(h):
        raise SingularH("Curvature matrix H is zero or non-finite")
    condition = float(np.linalg.cond(h))
    if not np.isfinite(condition) or condition > cond_cap:
        raise SingularH("Curvature matrix H is singular", condition=condition)
    try:
        factor = scipy.linalg.cho_factor(h)
        return scipy.linalg.cho_solve(factor, np.eye(h.shape[0])), False
    except np.linalg.LinAlgError:
        eigvals, eigvecs = np.linalg.eigh(h)
        floor = 1e-12 * float(np.max(np.abs(eigvals)))
        inv = np.where(eigvals > floor, 1.0 / np.where(eigvals > floor, eigvals, 1.0), 0.0)
        warnings.warn(
            "Curvature matrix H is not positive definite; using a clipped "
            "pseudo-inverse",
            SingularHWarning,
            stacklevel=3,
        )
        logger.warning(
            "Indefinite curvature matrix",
            min_eigenvalue=float(eigvals[0]),
            max_eigenvalue=float(eigvals[-1]),
        )
        return (eigvecs * inv) @ eigvecs.T, True


def _curvature(
    jacobian: Array, second_order: Array, weights: Array
) -> Array:
    return jacobian.T @ (weights[:, None] * jacobian) + second_order


def covariance(
    jacobian: ArrayLike,
    second_order: ArrayLike,
    layout: SensorLayout,
    cell_mask: ArrayLike | None = None,
) -> Array:
    """
    Covariance C = H^-1 J^T Omega^2 J H^-T with H = J^T Omega J + S.

    Args:
        jacobian: Residual Jacobian with rows ordered like ``residuals``
        second_order: Second order term S
        layout: Sensor layout; omega is repeated over the Jacobian rows
        cell_mask: Optional per-row mask multiplied into Omega

    Raises:
        SingularH: H is singular or badly conditioned
    """
    return _covariance(jacobian, second_order, layout, cell_mask)[0]


def _covariance(
    jacobian: ArrayLike,
    second_order: ArrayLike,
    layout: SensorLayout,
    cell_mask: ArrayLike | None = None,
) -> tuple[Array, bool]:
    j = np.asarray(jacobian, dtype=float)
    s = np.asarray(second_order, dtype=float)
    w = _row_weights(layout, j.shape[0], cell_mask)
    h_inv, clipped = _invert_h(_curvature(j, s, w))
    middle = j.T @ ((w * w)[:, None] * j)
    c = h_inv @ middle @ h_inv.T
    return 0.5 * (c + c.T), clipped


def sensitivity_dz_p(
    jacobian: ArrayLike,
    second_order: ArrayLike,
    layout: SensorLayout,
    cell_mask: ArrayLike | None = None,
) -> Array:
    """
    Derivative of the identified parameters with respect to the data.

    Returns -H^-1 J^T Omega Sigma^-1 of shape (n_p, n).
    """
    j = np.asarray(jacobian, dtype=float)
    s = np.asarray(second_order, dtype=float)
    w = _row_weights(layout, j.shape[0], cell_mask)
    h_inv, _ = _invert_h(_curvature(j, s, w))
    sigma = np.tile(layout.sigma, j.shape[0] // layout.n_s)
    return -h_inv @ (j.T * (w / sigma)[None, :])


def check_rank(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p: ArrayLike,
    rank_tol: float = 1e-10,
    newton: NewtonOptions | None = None,
) -> None:
    """
    Raise RankDeficient unless Omega J has full column rank.

    Columns are scaled by |p| before the singular values are compared, so
    the test works on relative sensitivities and does not depend on
    parameter units.
    """
    _check_dimensions(model, layout, tensor)
    p_vec = np.asarray(p, dtype=float)
    lin = _linearize(model, layout, tensor, p_vec, newton or NewtonOptions())
    _check_rank(lin, layout, tensor, p_vec, rank_tol)


def _check_rank(
    lin: _Linearization,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p: Array,
    rank_tol: float,
) -> None:
    counts = tensor.cell_mask.sum(axis=0).astype(float)
    scale = np.sqrt(counts[:, None] * layout.omega[None, :])
    rows = (lin.jacobian * scale[:, :, None]).reshape(-1, lin.jacobian.shape[-1])
    rows = rows * np.where(p != 0.0, np.abs(p), 1.0)[None, :]
    norms = np.linalg.norm(rows, axis=0)
    if not np.all(norms > 0.0):
        raise RankDeficient(
            "Weighted Jacobian has a zero column",
            zero_columns=np.flatnonzero(norms == 0).tolist(),
        )
    singular = np.linalg.svd(rows, compute_uv=False)
    if singular[-1] < rank_tol * singular[0]:
        raise RankDeficient(
            "Weighted Jacobian lacks full column rank",
            smallest=float(singular[-1]),
            largest=float(singular[0]),
        )


def _normal_equations(
    lin: _Linearization,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    r: Array,
) -> tuple[Array, Array]:
    mask = tensor.cell_mask.astype(float)
    counts = mask.sum(axis=0)
    omega = layout.omega.astype(float)
    normal = np.einsum("j,k,jka,jkb->ab", counts, omega, lin.jacobian, lin.jacobian)
    summed = np.einsum("ij,ijk->jk", mask, r) * omega[None, :]
    gradient = np.einsum("jk,jka->a", summed, lin.jacobian)
    return normal, gradient


def identify_parameters(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p0: ArrayLike,
    options: GaussNewtonOptions | None = None,
) -> Estimate:
    """
    Identify parameters by damped Gauss-Newton on f = 1/2 r^T Omega r.

    The damping term is lambda * diag(J^T Omega J), increased tenfold on a
    rejected step and decreased tenfold on an accepted one. Trial points
    below the model's lower bounds or without a state solution are
    rejected. Returned estimates always passed the gradient test.

    Raises:
        DomainError: p0 violates the lower bounds
        RankDeficient: Omega J lacks full column rank at an iterate
        NonConvergence: iteration limit reached, or the damping overflowed
            before the gradient test passed
    """
    options = options or GaussNewtonOptions()
    _check_dimensions(model, layout, tensor)
    p = np.array(p0, dtype=float).reshape(-1)
    if p.size != model.n_p:
        raise DimensionMismatch("p0 has wrong length", expected=model.n_p, got=p.size)
    lower = model.lower_bounds
    if np.any(p < lower) or not np.all(np.isfinite(p)):
        raise DomainError("Initial parameters violate the lower bounds", p0=p.tolist())
    if layout.n_active < model.n_p:
        raise RankDeficient(
            "Fewer active sensors than parameters",
            active=layout.n_active,
            n_p=model.n_p,
        )

    lin = _linearize(model, layout, tensor, p, options.newton)
    weights = cell_weights(layout, tensor).reshape(tensor.z.shape)
    r = _scaled_residuals(layout, tensor, lin)
    f = 0.5 * float(np.sum(weights * r * r))
    damping = options.initial_damping
    rejected = 0
    monitor = get_solver_monitor()

    for iteration in range(options.max_iter + 1):
        _check_rank(lin, layout, tensor, p, options.rank_tol)
        normal, gradient = _normal_equations(lin, layout, tensor, r)
        grad_norm = float(np.linalg.norm(gradient))
        if grad_norm <= options.tol_grad * max(1.0, f):
            monitor.record_identification(iteration, rejected, True)
            logger.debug(
                "Identification converged",
                iterations=iteration,
                objective=f,
                gradient_norm=grad_norm,
            )
            return Estimate(
                p=p,
                objective=f,
                gradient_norm=grad_norm,
                iterations=iteration,
                converged=True,
                rejected_steps=rejected,
            )
        if iteration == options.max_iter:
            break

        diag = np.diag(normal).copy()
        diag = np.maximum(diag, 1e-12 * float(diag.max()))
        while True:
            step = np.linalg.solve(normal + damping * np.diag(diag), -gradient)
            trial = p + step
            accepted = False
            if np.all(trial >= lower) and np.all(np.isfinite(trial)):
                try:
                    trial_lin = _linearize(model, layout, tensor, trial, options.newton)
                except (NonConvergence, SingularJacobian):
                    trial_lin = None
                if trial_lin is not None:
                    trial_r = _scaled_residuals(layout, tensor, trial_lin)
                    trial_f = 0.5 * float(np.sum(weights * trial_r * trial_r))
                    accepted = trial_f < f
            if accepted:
                p, lin, r, f = trial, trial_lin, trial_r, trial_f
                damping = max(damping / 10.0, 1e-12)
                break
            rejected += 1
            damping *= 10.0
            if damping > options.max_damping:
                monitor.record_identification(iteration, rejected, False)
                logger.warning(
                    "Identification stagnated",
                    iterations=iteration,
                    objective=f,
                    gradient_norm=grad_norm,
                )
                raise NonConvergence(
                    "Identification stagnated",
                    iterations=iteration,
                    objective=f,
                    gradient_norm=grad_norm,
                    p=p.tolist(),
                )

    monitor.record_identification(options.max_iter, rejected, False)
    raise NonConvergence(
        "Identification hit the Gauss-Newton iteration limit",
        max_iter=options.max_iter,
        objective=f,
    )


def estimate_with_covariance(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p0: ArrayLike,
    options: GaussNewtonOptions | None = None,
) -> Estimate:
    """Identify parameters and attach the covariance at the estimate."""
    options = options or GaussNewtonOptions()
    estimate = identify_parameters(model, layout, tensor, p0, options)
    c, clipped = covariance_at(model, layout, tensor, estimate.p, options.newton)
    return replace(estimate, covariance=c, singular_h=clipped)


def covariance_at(
    model: StateEquationModel,
    layout: SensorLayout,
    tensor: MeasurementTensor,
    p: ArrayLike,
    newton: NewtonOptions | None = None,
) -> tuple[Array, bool]:
    """
    Covariance at fixed parameters without re-identification.

    Returns:
        Covariance matrix and whether a clipped pseudo-inverse was used
    """
    j = assemble_jacobian(model, layout, tensor, p, newton)
    s = assemble_second_order(model, layout, tensor, p, newton)
    mask = np.repeat(tensor.cell_mask.reshape(-1), layout.n_s)
    return _covariance(j, s, layout, mask)
