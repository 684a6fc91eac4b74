"""
Lumped-parameter press surrogate.

A planar linkage of bars, beams and joint springs is reduced to its
quasi-static equilibrium K(p) y = g + b q. Free parameters are element
stiffnesses; sensors read single nodal displacements. The y axis points
down, along gravity and the process force.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from .estimation import MeasurementTensor, SensorLayout
from .exceptions import (
    DimensionMismatch,
    InvalidTopology,
    SingularJacobian,
    ZeroRealizedForce,
)
from .friction import FrictionModel, NoFriction
from .logging import get_logger
from .model import (
    Array,
    InputSchedule,
    StateEquationModel,
    check_jacobian,
    solve_schedule,
)

logger = get_logger(__name__)

STANDARD_GRAVITY = 9.80665
DOF_NAMES = ("x", "y", "rot")


@dataclass(frozen=True)
class Node:
    """A point of the linkage with its free degrees of freedom."""

    name: str
    x: float
    y: float
    dofs: tuple[str, ...] = ()
    mass: float = 0.0

    def __post_init__(self) -> None:
        unknown = set(self.dofs) - set(DOF_NAMES)
        if unknown:
            raise InvalidTopology("Unknown degree of freedom", node=self.name, dofs=sorted(unknown))

    @property
    def position(self) -> Array:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class BarElement:
    """Axial spring between two nodes with lumped end masses."""

    name: str
    node_a: str
    node_b: str
    stiffness: float
    masses: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.stiffness <= 0.0 or min(self.masses) < 0.0:
            raise InvalidTopology(
                "Bar stiffness must be positive and masses nonnegative", element=self.name
            )


@dataclass(frozen=True)
class BeamElement:
    """
    Lever of two flat beam elements over three nodes.

    Each element couples axial displacements with k_alpha and transverse
    displacements and rotations with k_beta; the lever mass is lumped as
    m/4, m/2, m/4.
    """

    name: str
    nodes: tuple[str, str, str]
    k_alpha: float
    k_beta: float
    length: float
    mass: float = 0.0

    def __post_init__(self) -> None:
        if min(self.k_alpha, self.k_beta, self.length) <= 0.0 or self.mass < 0.0:
            raise InvalidTopology(
                "Beam stiffnesses and length must be positive", element=self.name
            )

    @property
    def masses(self) -> tuple[float, float, float]:
        return (self.mass / 4.0, self.mass / 2.0, self.mass / 4.0)


@dataclass(frozen=True)
class JointElement:
    """Isotropic translational spring between two nodes."""

    name: str
    node_a: str
    node_b: str
    stiffness: float

    def __post_init__(self) -> None:
        if self.stiffness <= 0.0:
            raise InvalidTopology("Joint stiffness must be positive", element=self.name)


@dataclass(frozen=True)
class Sensor:
    """Displacement sensor reading sign * u[node, dof]."""

    name: str
    node: str
    dof: str
    sign: float = 1.0


@dataclass(frozen=True)
class PressSurrogate:
    """Element lists, load point, sensors and the free stiffness parameters."""

    nodes: tuple[Node, ...]
    bars: tuple[BarElement, ...] = ()
    beams: tuple[BeamElement, ...] = ()
    joints: tuple[JointElement, ...] = ()
    load_node: str = ""
    load_dof: str = "y"
    sensors: tuple[Sensor, ...] = ()
    parameters: tuple[str, ...] = ()
    gravity: bool = False
    geometric_nonlinearity: bool = False

    def element_stiffness(self, name: str) -> float:
        for element in (*self.bars, *self.joints):
            if element.name == name:
                return element.stiffness
        raise InvalidTopology("Unknown parameter element", element=name)

    @property
    def nominal_parameters(self) -> Array:
        return np.array([self.element_stiffness(name) for name in self.parameters])


def beam_element_matrix(k_alpha: float, k_beta: float, length: float) -> Array:
    """
    6x6 stiffness of one beam element in local coordinates.

    DOF order is (axial, transverse, rotation) of the first node followed
    by the second node.
    """
    k = np.zeros((6, 6))
    axial = np.array([1.0, 0.0, 0.0, -1.0, 0.0, 0.0])
    bending = np.array([0.0, 1.0, length, 0.0, -1.0, length])
    k += k_alpha * np.outer(axial, axial)
    k += k_beta * np.outer(bending, bending)
    return k


def beam_stiffness_matrix(k_alpha: float, k_beta: float, length: float) -> Array:
    """9x9 stiffness of a three-node lever assembled from two elements."""
    element = beam_element_matrix(k_alpha, k_beta, length)
    k = np.zeros((9, 9))
    for start in (0, 3):
        k[start : start + 6, start : start + 6] += element
    return k


class _DofMap:
    """Global indices of the free nodal degrees of freedom."""

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = {node.name: node for node in nodes}
        if len(self.nodes) != len(nodes):
            raise InvalidTopology("Node names must be unique")
        self.index: dict[tuple[str, str], int] = {}
        for node in nodes:
            for dof in DOF_NAMES:
                if dof in node.dofs:
                    self.index[(node.name, dof)] = len(self.index)
        self.size = len(self.index)

    def node(self, name: str) -> Node:
        if name not in self.nodes:
            raise InvalidTopology("Element references unknown node", node=name)
        return self.nodes[name]

    def gather(self, name: str, dofs: Sequence[str]) -> Array:
        """Rows selecting the given nodal DOFs from y; fixed DOFs give zero rows."""
        self.node(name)
        rows = np.zeros((len(dofs), self.size))
        for r, dof in enumerate(dofs):
            j = self.index.get((name, dof))
            if j is not None:
                rows[r, j] = 1.0
        return rows


@dataclass(frozen=True)
class _Bar:
    parameter: int | None
    stiffness: float
    gather: Array  # (2, d_y), relative translation b - a
    direction: Array
    length: float


@dataclass(frozen=True)
class _Linear:
    parameter: int | None
    stiffness: float
    unit: Array  # (d_y, d_y) stiffness per unit k


class PressModel(StateEquationModel):
    """
    Quasi-static surrogate E(y, p, q) = sum_e k_e f_e(y) - g - b q.

    The equation is linear in p. Bars use the elongation
    xi = e^T du, or with geometric nonlinearity
    xi = e^T du + (|du|^2 - (e^T du)^2) / (2L).
    """

    analytic = frozenset(
        {
            "equation_dy",
            "equation_dp",
            "equation_dyy",
            "equation_dyp",
            "equation_dpp",
            "observation_dy",
            "observation_dp",
            "observation_dyy",
            "observation_dyp",
            "observation_dpp",
        }
    )

    def __init__(
        self,
        bars: Sequence[_Bar],
        linear: Sequence[_Linear],
        gravity_load: Array,
        load: Array,
        sensor_rows: Array,
        parameter_names: Sequence[str],
        sensor_names: Sequence[str],
        geometric_nonlinearity: bool,
    ):
        super().__init__(
            d_y=load.size,
            n_p=len(parameter_names),
            d_q=1,
            n_s=sensor_rows.shape[0],
            parameter_names=parameter_names,
            sensor_names=sensor_names,
        )
        self.bars = tuple(bars)
        self.linear = tuple(linear)
        self.gravity_load = gravity_load
        self.load = load
        self.sensor_rows = sensor_rows
        self.geometric_nonlinearity = geometric_nonlinearity

    @property
    def lower_bounds(self) -> Array:
        return np.zeros(self.n_p)

    def _k(self, parameter: int | None, stiffness: float, p: Array) -> float:
        return stiffness if parameter is None else float(p[parameter])

    def _bar_terms(self, bar: _Bar, y: Array) -> tuple[float, Array, Array]:
        """Elongation, its gradient g in du, and the projector P / L."""
        du = bar.gather @ y
        e = bar.direction
        if not self.geometric_nonlinearity:
            return float(e @ du), e, np.zeros((2, 2))
        proj = (np.eye(2) - np.outer(e, e)) / bar.length
        axial = float(e @ du)
        xi = axial + (float(du @ du) - axial**2) / (2.0 * bar.length)
        return xi, e + proj @ du, proj

    def _unit_force(self, bar: _Bar, y: Array) -> Array:
        xi, g, _ = self._bar_terms(bar, y)
        return xi * (bar.gather.T @ g)

    def _unit_tangent(self, bar: _Bar, y: Array) -> Array:
        xi, g, proj = self._bar_terms(bar, y)
        return bar.gather.T @ (np.outer(g, g) + xi * proj) @ bar.gather

    def stiffness_matrix(self, p: ArrayLike, y: ArrayLike | None = None) -> Array:
        """Tangent stiffness dE/dy."""
        p_vec = np.asarray(p, dtype=float)
        y_vec = np.zeros(self.d_y) if y is None else np.asarray(y, dtype=float)
        k = np.zeros((self.d_y, self.d_y))
        for element in self.linear:
            k += self._k(element.parameter, element.stiffness, p_vec) * element.unit
        for bar in self.bars:
            k += self._k(bar.parameter, bar.stiffness, p_vec) * self._unit_tangent(bar, y_vec)
        return k

    def equation(self, y: Array, p: Array, q: Array) -> Array:
        residual = -self.gravity_load - self.load * float(q[0])
        for element in self.linear:
            residual = residual + self._k(element.parameter, element.stiffness, p) * (
                element.unit @ y
            )
        for bar in self.bars:
            residual = residual + self._k(bar.parameter, bar.stiffness, p) * self._unit_force(
                bar, y
            )
        return residual

    def observation(self, y: Array, p: Array, q: Array) -> Array:
        return self.sensor_rows @ y

    def equation_dy(self, y: Array, p: Array, q: Array) -> Array:
        return self.stiffness_matrix(p, y)

    def equation_dp(self, y: Array, p: Array, q: Array) -> Array:
        columns = np.zeros((self.d_y, self.n_p))
        for element in self.linear:
            if element.parameter is not None:
                columns[:, element.parameter] += element.unit @ y
        for bar in self.bars:
            if bar.parameter is not None:
                columns[:, bar.parameter] += self._unit_force(bar, y)
        return columns

    def equation_dyy(self, y: Array, p: Array, q: Array, a: Array, b: Array) -> Array:
        out = np.zeros(self.d_y)
        if not self.geometric_nonlinearity:
            return out
        for bar in self.bars:
            _, g, proj = self._bar_terms(bar, y)
            da = bar.gather @ a
            db = bar.gather @ b
            term = (
                (proj @ db) * float(g @ da)
                + g * float(db @ proj @ da)
                + (proj @ da) * float(g @ db)
            )
            out += self._k(bar.parameter, bar.stiffness, p) * (bar.gather.T @ term)
        return out

    def equation_dyp(self, y: Array, p: Array, q: Array, a: Array, b: Array) -> Array:
        out = np.zeros(self.d_y)
        for element in self.linear:
            if element.parameter is not None:
                out += b[element.parameter] * (element.unit @ a)
        for bar in self.bars:
            if bar.parameter is not None:
                out += b[bar.parameter] * (self._unit_tangent(bar, y) @ a)
        return out

    def equation_dpp(self, y: Array, p: Array, q: Array, a: Array, b: Array) -> Array:
        return np.zeros(self.d_y)

    def observation_dy(self, y: Array, p: Array, q: Array) -> Array:
        return self.sensor_rows.copy()

    def observation_dp(self, y: Array, p: Array, q: Array) -> Array:
        return np.zeros((self.n_s, self.n_p))

    def observation_dyy(self, y: Array, p: Array, q: Array, a: Array, b: Array) -> Array:
        return np.zeros(self.n_s)

    def observation_dyp(self, y: Array, p: Array, q: Array, a: Array, b: Array) -> Array:
        return np.zeros(self.n_s)

    def observation_dpp(self, y: Array, p: Array, q: Array, a: Array, b: Array) -> Array:
        return np.zeros(self.n_s)


def _beam_unit(dofs: _DofMap, beam: BeamElement) -> Array:
    names = beam.nodes
    first = dofs.node(names[0]).position
    last = dofs.node(names[2]).position
    span = last - first
    if np.linalg.norm(span) == 0.0:
        raise InvalidTopology("Beam end nodes coincide", element=beam.name)
    e = span / np.linalg.norm(span)
    n = np.array([-e[1], e[0]])
    local = beam_stiffness_matrix(beam.k_alpha, beam.k_beta, beam.length)
    # Rows mapping global y onto (axial, transverse, rotation) per node
    transform = np.vstack(
        [
            row
            for name in names
            for row in (
                e @ dofs.gather(name, ("x", "y")),
                n @ dofs.gather(name, ("x", "y")),
                dofs.gather(name, ("rot",))[0],
            )
        ]
    )
    return transform.T @ local @ transform


def assemble_quasistatic(
    surrogate: PressSurrogate, p: ArrayLike | None = None
) -> PressModel:
    """
    Build the quasi-static state equation of a surrogate.

    Args:
        surrogate: Structure definition
        p: Parameters for the regularity check (nominal stiffnesses when
            omitted)

    Raises:
        InvalidTopology: unknown references or singular stiffness at p
    """
    dofs = _DofMap(surrogate.nodes)
    if dofs.size == 0:
        raise InvalidTopology("Surrogate has no free degrees of freedom")
    parameter_index = {name: i for i, name in enumerate(surrogate.parameters)}
    element_names = [e.name for e in (*surrogate.bars, *surrogate.beams, *surrogate.joints)]
    if len(set(element_names)) != len(element_names):
        raise InvalidTopology("Element names must be unique")
    for name in surrogate.parameters:
        surrogate.element_stiffness(name)

    gravity = np.zeros(dofs.size)

    def add_mass(node_name: str, mass: float) -> None:
        if surrogate.gravity and mass > 0.0:
            gravity[:] += mass * STANDARD_GRAVITY * dofs.gather(node_name, ("y",))[0]

    bars = []
    for bar in surrogate.bars:
        a = dofs.node(bar.node_a)
        b = dofs.node(bar.node_b)
        span = b.position - a.position
        length = float(np.linalg.norm(span))
        if length == 0.0:
            raise InvalidTopology("Bar end nodes coincide", element=bar.name)
        bars.append(
            _Bar(
                parameter=parameter_index.get(bar.name),
                stiffness=bar.stiffness,
                gather=dofs.gather(b.name, ("x", "y")) - dofs.gather(a.name, ("x", "y")),
                direction=span / length,
                length=length,
            )
        )
        add_mass(a.name, bar.masses[0])
        add_mass(b.name, bar.masses[1])

    linear = []
    for beam in surrogate.beams:
        linear.append(_Linear(parameter=None, stiffness=1.0, unit=_beam_unit(dofs, beam)))
        for name, mass in zip(beam.nodes, beam.masses):
            add_mass(name, mass)
    for joint in surrogate.joints:
        rel = dofs.gather(joint.node_b, ("x", "y")) - dofs.gather(joint.node_a, ("x", "y"))
        linear.append(
            _Linear(
                parameter=parameter_index.get(joint.name),
                stiffness=joint.stiffness,
                unit=rel.T @ rel,
            )
        )
    for node in surrogate.nodes:
        add_mass(node.name, node.mass)

    load = dofs.gather(surrogate.load_node, (surrogate.load_dof,))[0]
    if not np.any(load):
        raise InvalidTopology(
            "Load acts on a fixed degree of freedom",
            node=surrogate.load_node,
            dof=surrogate.load_dof,
        )
    rows = []
    for sensor in surrogate.sensors:
        row = dofs.gather(sensor.node, (sensor.dof,))[0]
        if not np.any(row):
            raise InvalidTopology("Sensor reads a fixed degree of freedom", sensor=sensor.name)
        rows.append(sensor.sign * row)
    if not rows:
        raise InvalidTopology("Surrogate has no sensors")

    model = PressModel(
        bars=bars,
        linear=linear,
        gravity_load=gravity,
        load=load,
        sensor_rows=np.vstack(rows),
        parameter_names=surrogate.parameters,
        sensor_names=[sensor.name for sensor in surrogate.sensors],
        geometric_nonlinearity=surrogate.geometric_nonlinearity,
    )
    check_at = surrogate.nominal_parameters if p is None else np.asarray(p, dtype=float)
    try:
        check_jacobian(model.stiffness_matrix(check_at), 1e12)
    except SingularJacobian as exc:
        raise InvalidTopology(
            "Stiffness matrix is singular; structure is not fully supported",
            **exc.context,
        ) from exc
    logger.debug(
        "Surrogate assembled",
        d_y=model.d_y,
        n_p=model.n_p,
        n_s=model.n_s,
        bars=len(bars),
        linear=len(linear),
    )
    return model


def default_surrogate(
    geometric_nonlinearity: bool = False, gravity: bool = False
) -> PressSurrogate:
    """
    Lever linkage with two identifiable bar stiffnesses and three sensors.

    The process force acts downward on D and is passed by bar k7 to the lever
    end E. The lever B0-F-E rests on bar k5 at F and on a joint spring at
    B0. Sensors read D and F vertically and B0 upward.
    """
    nodes = (
        Node("B0", 0.0, 0.0, ("x", "y"), mass=0.0),
        Node("F", 0.25, 0.0, ("x", "y", "rot")),
        Node("E", 0.5, 0.0, ("x", "y")),
        Node("D", 0.5, -0.3, ("y",)),
        Node("ground_F", 0.25, 0.4),
        Node("ground_B0", 0.0, 0.0),
    )
    return PressSurrogate(
        nodes=nodes,
        bars=(
            BarElement("k5", "F", "ground_F", 2.0e6, masses=(1.2, 1.2)),
            BarElement("k7", "D", "E", 4.0e6, masses=(0.8, 0.8)),
        ),
        beams=(BeamElement("lever", ("B0", "F", "E"), 5.0e8, 2.0e8, 0.25, mass=6.0),),
        joints=(JointElement("bearing_B0", "B0", "ground_B0", 1.0e7),),
        load_node="D",
        load_dof="y",
        sensors=(
            Sensor("D_vertical", "D", "y", 1.0),
            Sensor("F_vertical", "F", "y", 1.0),
            Sensor("B0_vertical", "B0", "y", -1.0),
        ),
        parameters=("k5", "k7"),
        gravity=gravity,
        geometric_nonlinearity=geometric_nonlinearity,
    )


def series_chain(k_first: float = 2.0e6, k_second: float = 4.0e6) -> PressSurrogate:
    """Two bars in series loaded at the free end."""
    nodes = (
        Node("ground", 0.0, 0.0),
        Node("M", 0.0, 0.2, ("y",)),
        Node("L", 0.0, 0.4, ("y",)),
    )
    return PressSurrogate(
        nodes=nodes,
        bars=(
            BarElement("k5", "ground", "M", k_first),
            BarElement("k7", "M", "L", k_second),
        ),
        load_node="L",
        sensors=(Sensor("L_vertical", "L", "y"),),
        parameters=("k5", "k7"),
    )


def generate_synthetic_measurements(
    model: StateEquationModel,
    p_true: ArrayLike,
    schedule: InputSchedule,
    layout: SensorLayout,
    n_m: int,
    seed: int,
    friction: FrictionModel | None = None,
    force_jitter: float = 0.0,
    noise_scale: float = 1.0,
    noise_sigma: ArrayLike | None = None,
) -> MeasurementTensor:
    """
    Simulate repeated measurement series of a schedule.

    For every series a multiplicative force jitter is drawn first and the
    sensor noise second, both from one generator seeded with ``seed``.
    The structure sees the realized force minus friction.

    Args:
        friction: Friction acting in the drive (none when omitted)
        force_jitter: Relative standard deviation of the realized force
        noise_scale: Multiplier of the noise sigmas
        noise_sigma: Per-sensor scatter of the series (the layout sigmas
            when omitted)
    """
    if n_m < 1:
        raise DimensionMismatch("Need at least one series", n_m=n_m)
    friction = friction or NoFriction()
    scatter = layout.sigma if noise_sigma is None else np.asarray(noise_sigma, dtype=float)
    if scatter.shape != (model.n_s,):
        raise DimensionMismatch(
            "One noise sigma per sensor required", n_s=model.n_s, got=scatter.shape
        )
    rng = np.random.default_rng(seed)
    setpoints = schedule.nominal[:, 0]
    z = np.empty((n_m, schedule.n_q, model.n_s))
    realized = np.empty((n_m, schedule.n_q))

    for i in range(n_m):
        factor = 1.0 + force_jitter * rng.standard_normal()
        realized[i] = setpoints * factor
        effective = realized[i] - friction.forces(realized[i])
        solution = solve_schedule(model, p_true, effective[:, None])
        clean = np.array(
            [
                model.observation(y, np.asarray(p_true, dtype=float), np.array([q]))
                for y, q in zip(solution.states, effective)
            ]
        )
        noise = rng.standard_normal(clean.shape) * scatter[None, :]
        z[i] = clean + noise_scale * noise

    logger.info(
        "Synthetic measurements generated",
        n_m=n_m,
        n_q=schedule.n_q,
        seed=seed,
        friction=friction.name,
    )
    return MeasurementTensor(
        z=z,
        schedule=InputSchedule(
            inputs=setpoints, phases=schedule.phases, setpoints=setpoints
        ),
        layout=layout,
        realized=realized,
    )


def correct_measurements(
    tensor: MeasurementTensor, setpoints: ArrayLike | None = None
) -> MeasurementTensor:
    """
    Rescale each cell by q_setpoint / q_realized.

    Inputs with a zero setpoint are left unchanged. Realized forces are
    replaced by the setpoints so a second correction is a no-op.

    Raises:
        ZeroRealizedForce: a corrected cell has zero realized force
    """
    if tensor.realized is None:
        return tensor
    target = (
        tensor.schedule.nominal[:, 0]
        if setpoints is None
        else np.asarray(setpoints, dtype=float).reshape(-1)
    )
    if target.size != tensor.n_q:
        raise DimensionMismatch("Setpoints must match inputs", n_q=tensor.n_q, got=target.size)

    active = target != 0.0
    realized = tensor.realized
    zero = (realized == 0.0) & active[None, :]
    if np.any(zero):
        series, inputs = np.nonzero(zero)
        raise ZeroRealizedForce(
            "Cannot correct a cell with zero realized force",
            series=int(series[0]),
            input_index=int(inputs[0]),
        )
    ratio = np.ones_like(realized)
    ratio[:, active] = target[None, active] / realized[:, active]
    return replace(
        tensor,
        z=tensor.z * ratio[:, :, None],
        realized=np.broadcast_to(target, realized.shape).copy(),
    )


def force_displacement_curves(
    tensor: MeasurementTensor,
    model: StateEquationModel | None = None,
    p: ArrayLike | None = None,
) -> list[dict[str, Any]]:
    """
    Plot rows (series, input, sensor, force, displacement) per active sensor.

    With a model and parameters, the model output at the tensor's inputs is
    added to every row.
    """
    outputs = None
    if model is not None and p is not None:
        p_vec = np.asarray(p, dtype=float)
        inputs = tensor.schedule.inputs
        solution = solve_schedule(model, p_vec, inputs)
        outputs = np.array(
            [model.observation(y, p_vec, q) for y, q in zip(solution.states, inputs)]
        )
    setpoints = tensor.schedule.nominal[:, 0]
    rows = []
    for i in range(tensor.n_m):
        applied = setpoints if tensor.realized is None else tensor.realized[i]
        for j in range(tensor.n_q):
            for k in np.flatnonzero(tensor.layout.omega):
                row: dict[str, Any] = {
                    "series": i,
                    "input_index": j,
                    "sensor": int(k),
                    "force": float(applied[j]),
                    "displacement": float(tensor.z[i, j, k]),
                }
                if outputs is not None:
                    row["model_displacement"] = float(outputs[j, k])
                rows.append(row)
    return rows
