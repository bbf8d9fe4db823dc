"""Finite-horizon link-aware tracking problem: outputs, costs, constraints and linearizations."""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from linkmpc.dynamics import (
    E3,
    ETA,
    OMEGA,
    POS,
    RIGID_BODY_SIZE,
    VEL,
    ControlRate,
    ExtendedState,
    GtmrModel,
    rotation_derivatives,
    rotation_matrix,
    skew,
)
from linkmpc.models import GtmrParams, OcpWeights, OpticalParams
from linkmpc.optical_link import DegenerateRangeError, MIN_RANGE

logger = logging.getLogger(__name__)

OUTPUT_SIZE = 12
# Index of the link components inside the output vector.
Y_COS, Y_COS_RATE, Y_RANGE = 9, 10, 11

# Row kinds treated as simple bounds by the condensing step.
BOUND_KINDS = frozenset({"accel", "slack"})

OBSTACLE_EPS = 1e-12


class NegativeSlackError(ValueError):
    """Raised when a slack variable passed to the cost is negative."""


# =============================================================================
# Problem Data
# =============================================================================


@dataclass(frozen=True, eq=False)
class OutputVector:
    """y = (p, v, vdot, cos_delta, cos_delta_rate, range)."""

    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    cos_delta: float
    cos_delta_rate: float
    range: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                np.asarray(self.position, dtype=float),
                np.asarray(self.velocity, dtype=float),
                np.asarray(self.acceleration, dtype=float),
                [self.cos_delta, self.cos_delta_rate, self.range],
            ]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "OutputVector":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (OUTPUT_SIZE,):
            raise ValueError(f"output vector must have {OUTPUT_SIZE} entries")
        return cls(
            vec[0:3].copy(),
            vec[3:6].copy(),
            vec[6:9].copy(),
            float(vec[Y_COS]),
            float(vec[Y_COS_RATE]),
            float(vec[Y_RANGE]),
        )


@dataclass(frozen=True, eq=False)
class StageData:
    """Time-varying data of one horizon stage."""

    reference_output: OutputVector
    obstacle_centers: np.ndarray
    obstacle_radii: np.ndarray
    rx_pos: np.ndarray
    rx_vel: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.obstacle_centers, dtype=float).reshape(-1, 3)
        radii = np.asarray(self.obstacle_radii, dtype=float).reshape(-1)
        if centers.shape[0] != radii.shape[0]:
            raise ValueError("obstacle_centers and obstacle_radii disagree on obstacle count")
        if np.any(radii <= 0):
            raise ValueError("obstacle radii must be positive")
        object.__setattr__(self, "obstacle_centers", centers)
        object.__setattr__(self, "obstacle_radii", radii)
        object.__setattr__(self, "rx_pos", np.asarray(self.rx_pos, dtype=float))
        object.__setattr__(self, "rx_vel", np.asarray(self.rx_vel, dtype=float))

    @property
    def n_obstacles(self) -> int:
        return self.obstacle_radii.shape[0]


@dataclass(frozen=True, eq=False)
class OcpProblem:
    """One instance of the receding-horizon problem."""

    horizon_steps: int
    step: float
    initial_state: ExtendedState
    stages: list[StageData]
    weights: OcpWeights
    gtmr: GtmrParams
    optics: OpticalParams
    safety_margin: float = 0.25

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be at least 1")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if len(self.stages) != self.horizon_steps + 1:
            raise ValueError(
                f"expected {self.horizon_steps + 1} stages, got {len(self.stages)}"
            )
        if self.initial_state.n_rotors != self.gtmr.n_rotors:
            raise ValueError("initial_state rotor count does not match gtmr.n_rotors")
        counts = {s.n_obstacles for s in self.stages}
        if len(counts) != 1:
            raise ValueError("every stage must carry the same number of obstacles")

    @cached_property
    def model(self) -> GtmrModel:
        return GtmrModel(self.gtmr)

    @property
    def n_obstacles(self) -> int:
        return self.stages[0].n_obstacles

    @property
    def output_weights(self) -> np.ndarray:
        return self.weights.output_diagonal()

    @property
    def rate_weights(self) -> np.ndarray:
        return self.weights.rate_diagonal(self.gtmr.n_rotors)

    @property
    def slack_weights(self) -> np.ndarray:
        return self.weights.slack_diagonal(self.n_obstacles)


@dataclass
class ConstraintResiduals:
    """Residuals g >= 0 with the kind of each row."""

    values: np.ndarray
    kinds: list[str]

    def of_kind(self, kind: str) -> np.ndarray:
        mask = np.array([k == kind for k in self.kinds], dtype=bool)
        return self.values[mask]


@dataclass
class StageLinearization:
    """Local model of one stage around the current SQP iterate.

    Dynamics entries are None at the terminal stage. defect is filled in by
    the solver once the next shooting node is known.
    """

    state_jacobian: np.ndarray | None
    control_jacobian: np.ndarray | None
    next_state: np.ndarray | None
    output: np.ndarray
    reference: np.ndarray
    output_jacobian: np.ndarray
    output_control_jacobian: np.ndarray | None
    output_weights: np.ndarray
    control: np.ndarray | None
    rate_weights: np.ndarray
    slacks: np.ndarray
    slack_weights: np.ndarray
    residuals: np.ndarray
    residual_kinds: list[str]
    residual_state_jacobian: np.ndarray
    residual_control_jacobian: np.ndarray
    residual_slack_jacobian: np.ndarray
    control_lower: np.ndarray | None = None
    control_upper: np.ndarray | None = None
    defect: np.ndarray | None = None
    cost: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def general_mask(self) -> np.ndarray:
        return np.array([k not in BOUND_KINDS for k in self.residual_kinds], dtype=bool)

    def gauss_newton_hessian(self) -> np.ndarray:
        """Block matrix over (x, u, eps): J_y' Q J_y + blkdiag(Q_u, Q_eps)."""
        nx = self.output_jacobian.shape[1]
        nu = self.rate_weights.shape[0]
        ne = self.slack_weights.shape[0]
        jac = np.zeros((self.output_jacobian.shape[0], nx + nu + ne))
        jac[:, :nx] = self.output_jacobian
        if self.output_control_jacobian is not None:
            jac[:, nx : nx + nu] = self.output_control_jacobian
        hess = jac.T @ (self.output_weights[:, None] * jac)
        hess[nx : nx + nu, nx : nx + nu] += np.diag(self.rate_weights)
        hess[nx + nu :, nx + nu :] += np.diag(self.slack_weights)
        return hess


# =============================================================================
# Outputs
# =============================================================================


def _output_with_jacobian(
    x: np.ndarray,
    stage: StageData,
    model: GtmrModel,
    optics: OpticalParams,
    jacobian: bool,
    accel: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """accel optionally carries a precomputed (vdot, dvdot/dx) pair for x."""
    nx = model.nx
    eta, omega = x[ETA], x[OMEGA]
    rot = rotation_matrix(eta)
    beam_body = optics.tx_rotation @ E3
    offset = optics.tx_offset

    z = rot @ beam_body
    d = x[POS] + rot @ offset - stage.rx_pos
    r = float(np.linalg.norm(d))
    if r < MIN_RANGE:
        raise DegenerateRangeError(f"link range {r:.3e} m is degenerate")
    u = d / r
    wa = np.cross(omega, beam_body)
    wb = np.cross(omega, offset)
    w = rot @ wa
    q = x[VEL] + rot @ wb - stage.rx_vel

    uz, uq, zq = float(u @ z), float(u @ q), float(z @ q)
    cos_delta = -uz
    cos_rate = -(zq - uz * uq) / r - float(u @ w)

    y = np.empty(OUTPUT_SIZE)
    y[0:3] = x[POS]
    y[3:6] = x[VEL]
    y[6:9] = model.acceleration(x) if accel is None else accel[0]
    y[Y_COS] = min(1.0, max(-1.0, cos_delta))
    y[Y_COS_RATE] = cos_rate
    y[Y_RANGE] = r
    if not jacobian:
        return y, None

    d_rot = rotation_derivatives(eta)
    proj = np.eye(3) - np.outer(u, u)

    dd = np.zeros((3, nx))
    dd[:, POS] = np.eye(3)
    dd[:, ETA] = np.einsum("ijk,k->ji", d_rot, offset)
    dz = np.zeros((3, nx))
    dz[:, ETA] = np.einsum("ijk,k->ji", d_rot, beam_body)
    dw = np.zeros((3, nx))
    dw[:, ETA] = np.einsum("ijk,k->ji", d_rot, wa)
    dw[:, OMEGA] = -rot @ skew(beam_body)
    dq = np.zeros((3, nx))
    dq[:, VEL] = np.eye(3)
    dq[:, ETA] = np.einsum("ijk,k->ji", d_rot, wb)
    dq[:, OMEGA] = -rot @ skew(offset)

    pz, pq, pw = proj @ z, proj @ q, proj @ w
    grad_c_d = -pz / r
    grad_c_z = -u
    grad_rate_w = -u
    grad_rate_z = -pq / r
    grad_rate_q = -pz / r
    grad_rate_d = (uq * pz + uz * pq) / r**2 + (zq - uz * uq) * u / r**2 - pw / r

    jac = np.zeros((OUTPUT_SIZE, nx))
    jac[0:3, POS] = np.eye(3)
    jac[3:6, VEL] = np.eye(3)
    if accel is None:
        a, _ = model.jacobians(x, np.zeros(model.nu))
        jac[6:9, :] = a[VEL, :]
    else:
        jac[6:9, :] = accel[1]
    jac[Y_COS] = grad_c_d @ dd + grad_c_z @ dz
    jac[Y_COS_RATE] = grad_rate_d @ dd + grad_rate_z @ dz + grad_rate_w @ dw + grad_rate_q @ dq
    jac[Y_RANGE] = u @ dd
    return y, jac


def evaluate_output(
    x: np.ndarray, stage: StageData, model: GtmrModel, optics: OpticalParams
) -> np.ndarray:
    """Vector form of output_map for a state vector."""
    y, _ = _output_with_jacobian(np.asarray(x, dtype=float), stage, model, optics, jacobian=False)
    return y


def output_jacobian(
    x: np.ndarray, stage: StageData, model: GtmrModel, optics: OpticalParams
) -> tuple[np.ndarray, np.ndarray]:
    """Output vector and its state Jacobian dy/dx."""
    return _output_with_jacobian(np.asarray(x, dtype=float), stage, model, optics, jacobian=True)


def output_map(
    x: ExtendedState, stage: StageData, gtmr: GtmrParams, optics: OpticalParams
) -> OutputVector:
    """Output vector y = h(x) for one stage."""
    y, _ = _output_with_jacobian(x.to_vector(), stage, GtmrModel(gtmr), optics, jacobian=False)
    return OutputVector.from_vector(y)


# =============================================================================
# Cost and Constraints
# =============================================================================


def _check_slacks(slacks: np.ndarray) -> np.ndarray:
    slacks = np.asarray(slacks, dtype=float).reshape(-1)
    if np.any(slacks < 0):
        raise NegativeSlackError(f"slack variables must be non-negative, got min {slacks.min():.3e}")
    return slacks


def stage_cost(
    y: OutputVector,
    stage: StageData,
    u_rate: ControlRate | None,
    slacks: np.ndarray,
    w: OcpWeights,
) -> float:
    """||y_d - y||_Q^2 + ||u||_Qu^2 + ||eps||_Qeps^2."""
    slacks = _check_slacks(slacks)
    err = stage.reference_output.to_vector() - y.to_vector()
    cost = float(err @ (w.output_diagonal() * err))
    if u_rate is not None:
        u = u_rate.rotor_accels
        cost += float(u @ (w.rate_diagonal(u.shape[0]) * u))
    cost += float(slacks @ (w.slack_diagonal(slacks.shape[0]) * slacks))
    return cost


def _residuals(
    x: np.ndarray,
    u: np.ndarray,
    slacks: np.ndarray,
    stage: StageData,
    problem: OcpProblem,
    y: np.ndarray,
    y_jac: np.ndarray | None,
):
    gtmr, optics = problem.gtmr, problem.optics
    nx, nu = problem.model.nx, problem.model.nu
    n_obs = stage.n_obstacles
    gamma = x[RIGID_BODY_SIZE:]
    g_rows = slice(RIGID_BODY_SIZE, nx)

    values: list[np.ndarray] = []
    kinds: list[str] = []
    jx: list[np.ndarray] = []
    ju: list[np.ndarray] = []
    je: list[np.ndarray] = []

    def add(kind, vals, dx=None, du=None, de=None):
        vals = np.atleast_1d(np.asarray(vals, dtype=float))
        m = vals.shape[0]
        values.append(vals)
        kinds.extend([kind] * m)
        jx.append(np.zeros((m, nx)) if dx is None else dx)
        ju.append(np.zeros((m, nu)) if du is None else du)
        je.append(np.zeros((m, n_obs)) if de is None else de)

    eye_g = np.zeros((nu, nx))
    eye_g[:, g_rows] = np.eye(nu)
    add("speed", gamma - gtmr.speed_min, dx=eye_g)
    add("speed", gtmr.speed_max - gamma, dx=-eye_g)
    add("accel", u - gtmr.accel_min, du=np.eye(nu))
    add("accel", gtmr.accel_max - u, du=-np.eye(nu))

    r = y[Y_RANGE]
    r_row = None if y_jac is None else y_jac[Y_RANGE][None, :]
    add("range", r - optics.range_min, dx=r_row)
    add("range", optics.range_max - r, dx=None if r_row is None else -r_row)
    c_row = None if y_jac is None else y_jac[Y_COS][None, :]
    add("cone", y[Y_COS] - optics.cone_cos_threshold, dx=c_row)

    if n_obs:
        diff = x[POS][None, :] - stage.obstacle_centers
        dist = np.linalg.norm(diff, axis=1)
        obs_dx = np.zeros((n_obs, nx))
        obs_dx[:, POS] = diff / (dist + OBSTACLE_EPS)[:, None]
        add(
            "obstacle",
            dist - (stage.obstacle_radii + problem.safety_margin) + slacks,
            dx=obs_dx,
            de=np.eye(n_obs),
        )
        add("slack", slacks, de=np.eye(n_obs))

    return (
        np.concatenate(values),
        kinds,
        np.vstack(jx),
        np.vstack(ju),
        np.vstack(je),
    )


def constraint_residuals(
    x: ExtendedState,
    u_rate: ControlRate,
    slacks: np.ndarray,
    stage: StageData,
    problem: OcpProblem,
) -> ConstraintResiduals:
    """All path constraints of one stage written as g >= 0.

    Row order: speed lower, speed upper, accel lower, accel upper, range
    lower, range upper, cone, one obstacle row per obstacle, one slack row
    per obstacle.
    """
    xv = x.to_vector()
    slacks = np.asarray(slacks, dtype=float).reshape(-1)
    y, _ = _output_with_jacobian(xv, stage, problem.model, problem.optics, jacobian=False)
    values, kinds, *_ = _residuals(xv, u_rate.rotor_accels, slacks, stage, problem, y, None)
    return ConstraintResiduals(values, kinds)


def linearize_stage(
    x: np.ndarray,
    u: np.ndarray | None,
    slacks: np.ndarray,
    stage: StageData,
    problem: OcpProblem,
    *,
    dynamics: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    accel: tuple[np.ndarray, np.ndarray] | None = None,
) -> StageLinearization:
    """Jacobians and Gauss-Newton blocks of one stage at (x, u, eps).

    u is None at the terminal stage: dynamics, rate cost and accel rows are
    omitted there. dynamics and accel accept results of batched
    GtmrModel.rk4_sensitivities and GtmrModel.jacobians calls for this stage.
    """
    model = problem.model
    x = np.asarray(x, dtype=float)
    slacks = np.asarray(slacks, dtype=float).reshape(-1)
    y, y_jac = _output_with_jacobian(x, stage, model, problem.optics, jacobian=True, accel=accel)

    terminal = u is None
    u_eval = np.zeros(model.nu) if terminal else np.asarray(u, dtype=float)
    values, kinds, jx, ju, je = _residuals(x, u_eval, slacks, stage, problem, y, y_jac)

    if terminal:
        keep = np.array([k != "accel" for k in kinds], dtype=bool)
        values, jx, ju, je = values[keep], jx[keep], ju[keep], je[keep]
        kinds = [k for k in kinds if k != "accel"]
        a_d = b_d = x_next = None
    elif dynamics is not None:
        x_next, a_d, b_d = dynamics
    else:
        x_next, a_d, b_d = model.rk4_sensitivities(x, u_eval, problem.step)

    weights = problem.output_weights
    rate_w = problem.rate_weights
    slack_w = problem.slack_weights
    err = y - stage.reference_output.to_vector()
    cost = float(err @ (weights * err)) + float(slacks @ (slack_w * slacks))
    if not terminal:
        cost += float(u_eval @ (rate_w * u_eval))

    return StageLinearization(
        state_jacobian=a_d,
        control_jacobian=b_d,
        next_state=x_next,
        output=y,
        reference=stage.reference_output.to_vector(),
        output_jacobian=y_jac,
        output_control_jacobian=None,
        output_weights=weights,
        control=None if terminal else u_eval,
        rate_weights=rate_w,
        slacks=slacks,
        slack_weights=slack_w,
        residuals=values,
        residual_kinds=kinds,
        residual_state_jacobian=jx,
        residual_control_jacobian=ju,
        residual_slack_jacobian=je,
        control_lower=None if terminal else np.full(model.nu, problem.gtmr.accel_min),
        control_upper=None if terminal else np.full(model.nu, problem.gtmr.accel_max),
        cost=cost,
    )


def trajectory_cost(
    problem: OcpProblem, states: np.ndarray, controls: np.ndarray, slacks: np.ndarray
) -> float:
    """Nonlinear objective summed over all N + 1 stages."""
    model = problem.model
    weights = problem.output_weights
    rate_w = problem.rate_weights
    slack_w = problem.slack_weights
    accel = model.acceleration(states)
    total = 0.0
    for k, stage in enumerate(problem.stages):
        y, _ = _output_with_jacobian(
            states[k], stage, model, problem.optics, jacobian=False, accel=(accel[k], None)
        )
        err = y - stage.reference_output.to_vector()
        total += float(err @ (weights * err)) + float(slacks[k] @ (slack_w * slacks[k]))
        if k < problem.horizon_steps:
            total += float(controls[k] @ (rate_w * controls[k]))
    return total


def path_violation(
    problem: OcpProblem, states: np.ndarray, controls: np.ndarray, slacks: np.ndarray
) -> float:
    """l1 norm of violated general path constraints for stages 1..N."""
    model = problem.model
    accel = model.acceleration(states)
    total = 0.0
    for k in range(1, problem.horizon_steps + 1):
        stage = problem.stages[k]
        u = controls[min(k, problem.horizon_steps - 1)]
        y, _ = _output_with_jacobian(
            states[k], stage, model, problem.optics, jacobian=False, accel=(accel[k], None)
        )
        values, kinds, *_ = _residuals(states[k], u, slacks[k], stage, problem, y, None)
        mask = np.array([kd not in BOUND_KINDS for kd in kinds], dtype=bool)
        total += float(np.sum(np.maximum(0.0, -values[mask])))
    return total


def stage_violations(problem: OcpProblem, states: np.ndarray, tol: float = 1e-6) -> dict[str, int]:
    """Count predicted range and cone violations over stages 1..N."""
    counts = {"range": 0, "cone": 0}
    optics = problem.optics
    accel = problem.model.acceleration(states)
    for k in range(1, problem.horizon_steps + 1):
        y, _ = _output_with_jacobian(
            states[k], problem.stages[k], problem.model, optics, jacobian=False, accel=(accel[k], None)
        )
        r = y[Y_RANGE]
        if r < optics.range_min - tol or r > optics.range_max + tol:
            counts["range"] += 1
        if y[Y_COS] < optics.cone_cos_threshold - tol:
            counts["cone"] += 1
    return counts


def hover_reference(state: ExtendedState, optics: OpticalParams) -> OutputVector:
    """Reference that holds a motionless vehicle with a perfectly aligned link."""
    return OutputVector(
        state.body.position.copy(),
        np.zeros(3),
        np.zeros(3),
        1.0,
        0.0,
        optics.desired_range,
    )


def aligned_receiver(state: ExtendedState, optics: OpticalParams, distance: float) -> np.ndarray:
    """Receiver position on the beam axis at the given distance from the transmitter."""
    x = state.to_vector()
    rot = rotation_matrix(x[ETA])
    tx = x[POS] + rot @ optics.tx_offset
    axis = rot @ optics.tx_rotation @ E3
    return tx + distance * axis / math.sqrt(float(axis @ axis))
