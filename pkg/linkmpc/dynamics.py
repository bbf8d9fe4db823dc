"""Rigid-body dynamics of a generically-tilted multirotor with rotor-speed states.

State vector layout (all vector-level routines use it):
    [p (3), eta (3), v (3), omega (3), gamma (n_rotors)]
where eta are ZYX Euler angles (roll, pitch, yaw), omega is the body angular
velocity, gamma the rotor spin speeds in Hz. The input is the rotor
acceleration vector ubar = d(gamma)/dt in Hz/s. Rotor thrust and drag torque
scale with gamma**2.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from linkmpc.models import GtmrParams

logger = logging.getLogger(__name__)

POS = slice(0, 3)
ETA = slice(3, 6)
VEL = slice(6, 9)
OMEGA = slice(9, 12)
RIGID_BODY_SIZE = 12

# Distance from |theta| = pi/2 at which the Euler-rate map is rejected.
PITCH_MARGIN = 1e-3

E3 = np.array([0.0, 0.0, 1.0])


class SingularityError(ValueError):
    """Raised when the pitch angle reaches the Euler-rate singularity."""

    def __init__(self, message: str, stage: int | None = None):
        super().__init__(message)
        self.stage = stage


class DimensionMismatchError(ValueError):
    """Raised when a vector does not match the configured rotor count."""


# =============================================================================
# State Containers
# =============================================================================


def _frozen_array(values, size: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if size is not None and arr.shape[0] != size:
        raise DimensionMismatchError(f"{name} must have {size} entries, got {arr.shape[0]}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidBodyState:
    """Position, Euler angles, velocity and body rates."""

    position: np.ndarray
    euler: np.ndarray
    velocity: np.ndarray
    body_rates: np.ndarray

    def __post_init__(self):
        for name in ("position", "euler", "velocity", "body_rates"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), 3, name))


@dataclass(frozen=True, eq=False)
class ExtendedState:
    """Rigid-body state augmented with rotor spin speeds."""

    body: RigidBodyState
    rotor_speeds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotor_speeds", _frozen_array(self.rotor_speeds, name="rotor_speeds"))

    @property
    def n_rotors(self) -> int:
        return self.rotor_speeds.shape[0]

    def to_vector(self) -> np.ndarray:
        b = self.body
        return np.concatenate([b.position, b.euler, b.velocity, b.body_rates, self.rotor_speeds])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_rotors: int | None = None) -> "ExtendedState":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if n_rotors is not None and vec.shape[0] != RIGID_BODY_SIZE + n_rotors:
            raise DimensionMismatchError(
                f"state vector must have {RIGID_BODY_SIZE + n_rotors} entries, got {vec.shape[0]}"
            )
        if vec.shape[0] <= RIGID_BODY_SIZE:
            raise DimensionMismatchError("state vector has no rotor-speed entries")
        body = RigidBodyState(vec[POS], vec[ETA], vec[VEL], vec[OMEGA])
        return cls(body, vec[RIGID_BODY_SIZE:])


@dataclass(frozen=True, eq=False)
class ControlRate:
    """Rotor acceleration command in Hz/s."""

    rotor_accels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotor_accels", _frozen_array(self.rotor_accels, name="rotor_accels"))


@dataclass(frozen=True, eq=False)
class AllocationMatrices:
    """Maps squared rotor speeds to body-frame force and torque."""

    force_map: np.ndarray
    torque_map: np.ndarray

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.force_map, self.torque_map])

    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.stacked))


# =============================================================================
# Geometry
# =============================================================================


def _matrix(rows) -> np.ndarray:
    """Stack nested rows of equally shaped arrays into (..., 3, 3)."""
    return np.stack([np.stack(np.broadcast_arrays(*row), axis=-1) for row in rows], axis=-2)


def skew(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    zero = np.zeros_like(x)
    return _matrix([[zero, -z, y], [z, zero, -x], [-y, x, zero]])


def _elementary(euler: np.ndarray):
    euler = np.asarray(euler, dtype=float)
    phi, theta, psi = euler[..., 0], euler[..., 1], euler[..., 2]
    sf, cf = np.sin(phi), np.cos(phi)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(psi), np.cos(psi)
    zero, one = np.zeros_like(phi), np.ones_like(phi)
    rx = _matrix([[one, zero, zero], [zero, cf, -sf], [zero, sf, cf]])
    ry = _matrix([[ct, zero, st], [zero, one, zero], [-st, zero, ct]])
    rz = _matrix([[cp, -sp, zero], [sp, cp, zero], [zero, zero, one]])
    drx = _matrix([[zero, zero, zero], [zero, -sf, -cf], [zero, cf, -sf]])
    dry = _matrix([[-st, zero, ct], [zero, zero, zero], [-ct, zero, -st]])
    drz = _matrix([[-sp, -cp, zero], [cp, -sp, zero], [zero, zero, zero]])
    return rx, ry, rz, drx, dry, drz


def rotation_matrix(euler: np.ndarray) -> np.ndarray:
    """Body-to-world rotation R = Rz(psi) Ry(theta) Rx(phi).

    Leading axes of euler are batch axes.
    """
    rx, ry, rz, *_ = _elementary(euler)
    return rz @ ry @ rx


def rotation_derivatives(euler: np.ndarray) -> np.ndarray:
    """Stack of dR/d(phi), dR/d(theta), dR/d(psi), shape (..., 3, 3, 3)."""
    rx, ry, rz, drx, dry, drz = _elementary(euler)
    return np.stack([rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx], axis=-3)


def _check_pitch(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    bad = np.abs(theta) >= math.pi / 2 - PITCH_MARGIN
    if np.any(bad):
        flat = np.flatnonzero(bad.reshape(-1))[0]
        value = float(theta.reshape(-1)[flat])
        raise SingularityError(
            f"pitch {value:.6f} rad is outside (-pi/2 + {PITCH_MARGIN}, pi/2 - {PITCH_MARGIN})",
            stage=int(flat) if theta.ndim else None,
        )
    return np.cos(theta)


def euler_rate_matrix(euler: np.ndarray) -> np.ndarray:
    """Matrix T(eta) with d(eta)/dt = T(eta) omega for ZYX angles."""
    euler = np.asarray(euler, dtype=float)
    phi, theta = euler[..., 0], euler[..., 1]
    ct = _check_pitch(theta)
    sf, cf = np.sin(phi), np.cos(phi)
    tt = np.tan(theta)
    zero, one = np.zeros_like(phi), np.ones_like(phi)
    return _matrix(
        [
            [one, sf * tt, cf * tt],
            [zero, cf, -sf],
            [zero, sf / ct, cf / ct],
        ]
    )


def euler_rate_derivatives(euler: np.ndarray) -> np.ndarray:
    """Stack of dT/d(phi), dT/d(theta), dT/d(psi)."""
    euler = np.asarray(euler, dtype=float)
    phi, theta = euler[..., 0], euler[..., 1]
    ct = _check_pitch(theta)
    sf, cf = np.sin(phi), np.cos(phi)
    st, tt = np.sin(theta), np.tan(theta)
    sec2 = 1.0 / ct**2
    zero = np.zeros_like(phi)
    d_phi = _matrix([[zero, cf * tt, -sf * tt], [zero, -sf, -cf], [zero, cf / ct, -sf / ct]])
    d_theta = _matrix(
        [[zero, sf * sec2, cf * sec2], [zero, zero, zero], [zero, sf * st * sec2, cf * st * sec2]]
    )
    return np.stack([d_phi, d_theta, np.zeros_like(d_phi)], axis=-3)


def rotor_axes(params: GtmrParams) -> tuple[np.ndarray, np.ndarray]:
    """Rotor positions and unit spin axes in the body frame, one row per rotor."""
    n = params.n_rotors
    positions = np.zeros((n, 3))
    axes = np.zeros((n, 3))
    for i, (alpha, beta) in enumerate(zip(params.tilt_alpha, params.tilt_beta)):
        azimuth = 2.0 * math.pi * i / n
        radial = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
        tangential = np.array([-math.sin(azimuth), math.cos(azimuth), 0.0])
        tilt = Rotation.from_rotvec(beta * tangential) * Rotation.from_rotvec(alpha * radial)
        positions[i] = params.arm_length * radial
        axes[i] = tilt.apply(E3)
    return positions, axes


def build_allocation(params: GtmrParams) -> AllocationMatrices:
    """Allocation matrices F, M with force = F gamma**2 and torque = M gamma**2."""
    positions, axes = rotor_axes(params)
    spin = np.asarray(params.spin_dir, dtype=float)
    force = params.thrust_coeff * axes.T
    torque = (
        params.thrust_coeff * np.cross(positions, axes)
        + (spin * params.torque_coeff)[:, None] * axes
    ).T
    alloc = AllocationMatrices(force, torque)
    rank = alloc.rank()
    if rank < 6:
        logger.warning("Allocation matrix has rank %d < 6; the vehicle is underactuated", rank)
    return alloc


def hover_speed(params: GtmrParams, alloc: AllocationMatrices | None = None) -> float:
    """Common rotor speed balancing gravity at level attitude."""
    alloc = alloc or build_allocation(params)
    lift = float(np.sum(alloc.force_map[2]))
    if lift <= 0:
        raise ValueError("rotor configuration produces no upward thrust")
    return math.sqrt(params.mass * params.gravity / lift)


# =============================================================================
# Model
# =============================================================================


class GtmrModel:
    """Vector-level dynamics, Jacobians and RK4 integration for one vehicle.

    Every method accepts leading batch axes on the state and input, so a whole
    horizon can be propagated or linearised in one call.
    """

    def __init__(self, params: GtmrParams, alloc: AllocationMatrices | None = None):
        self.params = params
        self.alloc = alloc or build_allocation(params)
        self.n_rotors = params.n_rotors
        self.nx = RIGID_BODY_SIZE + params.n_rotors
        self.nu = params.n_rotors
        self.inertia = params.inertia
        self.inertia_inv = np.linalg.inv(self.inertia)
        self._gravity = np.array([0.0, 0.0, -params.gravity])

    def _check(self, x: np.ndarray, u: np.ndarray | None = None) -> tuple[int, ...]:
        if x.ndim == 0 or x.shape[-1] != self.nx:
            raise DimensionMismatchError(f"state must have {self.nx} entries, got {x.shape}")
        if u is None:
            return x.shape[:-1]
        if u.ndim == 0 or u.shape[-1] != self.nu:
            raise DimensionMismatchError(f"control must have {self.nu} entries, got {u.shape}")
        try:
            return np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        except ValueError as e:
            raise DimensionMismatchError(
                f"state batch {x.shape[:-1]} and control batch {u.shape[:-1]} differ"
            ) from e

    def derivative(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = self._check(x, u)
        eta, omega, gamma = x[..., ETA], x[..., OMEGA], x[..., RIGID_BODY_SIZE:]
        squared = gamma**2
        thrust = squared @ self.alloc.force_map.T
        torque = squared @ self.alloc.torque_map.T
        xdot = np.empty(batch + (self.nx,))
        xdot[..., POS] = x[..., VEL]
        xdot[..., ETA] = (euler_rate_matrix(eta) @ omega[..., None])[..., 0]
        xdot[..., VEL] = self._gravity + (rotation_matrix(eta) @ thrust[..., None])[..., 0] / self.params.mass
        momentum = omega @ self.inertia.T
        xdot[..., OMEGA] = (-np.cross(omega, momentum) + torque) @ self.inertia_inv.T
        xdot[..., RIGID_BODY_SIZE:] = u
        return xdot

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Partial derivatives (df/dx, df/du) of the continuous dynamics."""
        x = np.asarray(x, dtype=float)
        batch = self._check(x, np.asarray(u, dtype=float))
        eta, omega, gamma = x[..., ETA], x[..., OMEGA], x[..., RIGID_BODY_SIZE:]
        g = slice(RIGID_BODY_SIZE, self.nx)
        m = self.params.mass
        rot = rotation_matrix(eta)
        d_rot = rotation_derivatives(eta)
        d_t = euler_rate_derivatives(eta)
        body_force = gamma**2 @ self.alloc.force_map.T
        two_gamma = 2.0 * gamma[..., None, :]

        a = np.zeros(batch + (self.nx, self.nx))
        a[..., POS, VEL] = np.eye(3)
        a[..., ETA, ETA] = np.einsum("...ijk,...k->...ji", d_t, omega)
        a[..., ETA, OMEGA] = euler_rate_matrix(eta)
        a[..., VEL, ETA] = np.einsum("...ijk,...k->...ji", d_rot, body_force) / m
        a[..., VEL, g] = rot @ (self.alloc.force_map * two_gamma) / m
        a[..., OMEGA, OMEGA] = self.inertia_inv @ (
            -skew(omega) @ self.inertia + skew(omega @ self.inertia.T)
        )
        a[..., OMEGA, g] = self.inertia_inv @ (self.alloc.torque_map * two_gamma)

        b = np.zeros(batch + (self.nx, self.nu))
        b[..., g, :] = np.eye(self.nu)
        return a, b

    def acceleration(self, x: np.ndarray) -> np.ndarray:
        """Linear acceleration of the centre of mass, independent of the input."""
        return self.derivative(x, np.zeros(self.nu))[..., VEL]

    def rk4(self, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k1 = self.derivative(x, u)
        k2 = self.derivative(x + 0.5 * dt * k1, u)
        k3 = self.derivative(x + 0.5 * dt * k2, u)
        k4 = self.derivative(x + dt * k3, u)
        return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def rk4_sensitivities(
        self, x: np.ndarray, u: np.ndarray, dt: float
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """RK4 step together with its exact derivatives w.r.t. state and input."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = self._check(x, u)
        eye = np.eye(self.nx)
        stage_x = x
        dx_dx = np.broadcast_to(eye, batch + (self.nx, self.nx))
        dx_du = np.zeros(batch + (self.nx, self.nu))
        ks, dks_dx, dks_du = [], [], []
        for coeff in (0.5, 0.5, 1.0, None):
            k = self.derivative(stage_x, u)
            a, b = self.jacobians(stage_x, u)
            dk_dx = a @ dx_dx
            dk_du = a @ dx_du + b
            ks.append(k)
            dks_dx.append(dk_dx)
            dks_du.append(dk_du)
            if coeff is not None:
                stage_x = x + coeff * dt * k
                dx_dx = eye + coeff * dt * dk_dx
                dx_du = coeff * dt * dk_du
        w = (1.0, 2.0, 2.0, 1.0)
        x_next = x + dt / 6.0 * sum(wi * ki for wi, ki in zip(w, ks))
        a_d = eye + dt / 6.0 * sum(wi * di for wi, di in zip(w, dks_dx))
        b_d = dt / 6.0 * sum(wi * di for wi, di in zip(w, dks_du))
        return x_next, a_d, b_d


# =============================================================================
# Object-level API
# =============================================================================


def continuous_dynamics(
    state: ExtendedState,
    control: ControlRate,
    params: GtmrParams,
    alloc: AllocationMatrices | None = None,
) -> ExtendedState:
    """Time derivative of the extended state, packed as an ExtendedState."""
    model = GtmrModel(params, alloc)
    xdot = model.derivative(state.to_vector(), control.rotor_accels)
    return ExtendedState.from_vector(xdot, params.n_rotors)


def acceleration_output(
    state: ExtendedState, params: GtmrParams, alloc: AllocationMatrices | None = None
) -> np.ndarray:
    return GtmrModel(params, alloc).acceleration(state.to_vector())


def rk4_step(
    state: ExtendedState,
    control: ControlRate,
    dt: float,
    params: GtmrParams,
    alloc: AllocationMatrices | None = None,
) -> ExtendedState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    model = GtmrModel(params, alloc)
    x_next = model.rk4(state.to_vector(), control.rotor_accels, dt)
    return ExtendedState.from_vector(x_next, params.n_rotors)


def hover_state(params: GtmrParams, position=(0.0, 0.0, 0.0), yaw: float = 0.0) -> ExtendedState:
    """Level, motionless state with all rotors at hover speed."""
    speed = hover_speed(params)
    body = RigidBodyState(position, (0.0, 0.0, yaw), np.zeros(3), np.zeros(3))
    return ExtendedState(body, np.full(params.n_rotors, speed))
