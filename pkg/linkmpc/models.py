"""Pydantic models for scenario configuration, physical parameters and reports."""

import math
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = 1


class _Section(BaseModel):
    """Base for configuration sections: immutable, unknown keys rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)


# =============================================================================
# Vehicle and Link Parameters
# =============================================================================


class GtmrParams(_Section):
    """Physical and geometric description of a generically-tilted multirotor."""

    n_rotors: int = 6
    mass: float = 2.57
    gravity: float = 9.81
    inertia_diag: tuple[float, float, float] = (0.11, 0.11, 0.19)
    thrust_coeff: float = 1.18e-3
    torque_coeff: float = 2.5e-5
    arm_length: float = 0.4
    tilt_alpha_deg: list[float] = [20.0, -20.0, 20.0, -20.0, 20.0, -20.0]
    tilt_beta_deg: list[float] = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    spin_dir: list[Literal[-1, 1]] = [1, -1, 1, -1, 1, -1]
    speed_min: float = 16.0
    speed_max: float = 100.0
    accel_min: float = -200.0
    accel_max: float = 400.0

    @field_validator("n_rotors")
    @classmethod
    def validate_n_rotors(cls, v: int) -> int:
        if v < 4:
            raise ValueError("n_rotors must be at least 4")
        return v

    @field_validator("mass", "gravity", "thrust_coeff", "arm_length")
    @classmethod
    def validate_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @field_validator("inertia_diag")
    @classmethod
    def validate_inertia(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(not j > 0 for j in v):
            raise ValueError("inertia_diag entries must be positive")
        return v

    @model_validator(mode="after")
    def check_bounds_and_lengths(self) -> "GtmrParams":
        if not self.speed_min < self.speed_max:
            raise ValueError("speed_min must be below speed_max")
        if not self.accel_min < 0 < self.accel_max:
            raise ValueError("accel bounds must satisfy accel_min < 0 < accel_max")
        for name in ("tilt_alpha_deg", "tilt_beta_deg", "spin_dir"):
            if len(getattr(self, name)) != self.n_rotors:
                raise ValueError(f"{name} must have n_rotors ({self.n_rotors}) entries")
        return self

    @property
    def tilt_alpha(self) -> np.ndarray:
        """Radial tilt angles in radians."""
        return np.radians(self.tilt_alpha_deg)

    @property
    def tilt_beta(self) -> np.ndarray:
        """Tangential tilt angles in radians."""
        return np.radians(self.tilt_beta_deg)

    @property
    def inertia(self) -> np.ndarray:
        return np.diag(self.inertia_diag)


class OpticalParams(_Section):
    """Transceiver geometry and link thresholds."""

    # Cosine threshold of the NMPC cone constraint; independent of rx_fov_deg.
    cone_cos_threshold: float = 0.17
    tx_half_power_deg: float = 10.0
    rx_fov_deg: float = 89.0
    range_min: float = 0.25
    range_max: float = 1.4
    desired_range: float = 1.0
    tx_offset_body: tuple[float, float, float] = (0.1, 0.0, 0.0)
    tx_rotation_body: tuple[
        tuple[float, float, float],
        tuple[float, float, float],
        tuple[float, float, float],
    ] = ((1.0, 0.0, 0.0), (0.0, -1.0, 0.0), (0.0, 0.0, -1.0))
    rx_window: float = 26.0
    receiver_time_constant: float = 0.0

    @model_validator(mode="after")
    def check_geometry(self) -> "OpticalParams":
        if not 0 < self.range_min < self.range_max:
            raise ValueError("range bounds must satisfy 0 < range_min < range_max")
        if not 0 < self.cone_cos_threshold < 1:
            raise ValueError("cone_cos_threshold must lie in (0, 1)")
        if not 0 < self.tx_half_power_deg < 90:
            raise ValueError("tx_half_power_deg must lie in (0, 90)")
        if not 0 < self.rx_fov_deg < 180:
            raise ValueError("rx_fov_deg must lie in (0, 180)")
        if not self.desired_range > 0:
            raise ValueError("desired_range must be positive")
        if not self.rx_window > 0:
            raise ValueError("rx_window must be positive")
        if self.receiver_time_constant < 0:
            raise ValueError("receiver_time_constant must be non-negative")
        rot = np.asarray(self.tx_rotation_body)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("tx_rotation_body must be a proper rotation matrix")
        return self

    @property
    def tx_half_power(self) -> float:
        """Transmitter half-power beamwidth in radians."""
        return math.radians(self.tx_half_power_deg)

    @property
    def rx_fov(self) -> float:
        """Receiver field-of-view half-aperture in radians."""
        return math.radians(self.rx_fov_deg)

    @property
    def tx_offset(self) -> np.ndarray:
        return np.asarray(self.tx_offset_body, dtype=float)

    @property
    def tx_rotation(self) -> np.ndarray:
        return np.asarray(self.tx_rotation_body, dtype=float)


# =============================================================================
# Controller Configuration
# =============================================================================


class OcpWeights(_Section):
    """Diagonal cost weights; output weights are given per block."""

    position: float = 0.0
    velocity: float = 0.1
    acceleration: float = 0.1
    cos_delta: float = 10.0
    cos_delta_rate: float = 10.0
    range: float = 2.0
    rate: float = 10.0
    # Rotor accelerations enter the rate penalty as rotor_accel / rate_scale.
    rate_scale: float = 400.0
    slack: float = 1.0e4

    @model_validator(mode="after")
    def check_signs(self) -> "OcpWeights":
        for name, value in self.model_dump().items():
            if value < 0:
                raise ValueError(f"weight {name} must be non-negative")
        if not self.slack > 0:
            raise ValueError("slack weight must be positive")
        if not self.rate_scale > 0:
            raise ValueError("rate_scale must be positive")
        return self

    def output_diagonal(self) -> np.ndarray:
        """Diagonal of Q in output order (p, v, vdot, c, cdot, range)."""
        return np.concatenate(
            [
                np.full(3, self.position),
                np.full(3, self.velocity),
                np.full(3, self.acceleration),
                [self.cos_delta, self.cos_delta_rate, self.range],
            ]
        )

    def rate_diagonal(self, n_rotors: int) -> np.ndarray:
        """Diagonal of Q_ubar acting on raw rotor accelerations."""
        return np.full(n_rotors, self.rate / self.rate_scale**2)

    def slack_diagonal(self, n_obstacles: int) -> np.ndarray:
        return np.full(n_obstacles, self.slack)


class HorizonConfig(_Section):
    """Prediction horizon discretization."""

    steps: int = 50
    step: float = 0.015
    safety_margin: float = 0.25

    @field_validator("steps")
    @classmethod
    def validate_steps(cls, v: int) -> int:
        if v < 1:
            raise ValueError("horizon steps must be at least 1")
        return v

    @field_validator("step")
    @classmethod
    def validate_step(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("horizon step must be positive")
        return v

    @field_validator("safety_margin")
    @classmethod
    def validate_margin(cls, v: float) -> float:
        if v < 0:
            raise ValueError("safety_margin must be non-negative")
        return v


class SolverConfig(_Section):
    """SQP / QP solver settings."""

    max_sqp_iters: int = 1
    cold_start_iters: int = 50
    max_qp_iters: int = 200
    kkt_tol: float = 1e-6
    active_set_tol: float = 1e-9
    levenberg_damping: float = 1e-8
    merit_penalty: float = 1e6
    debug_checks: bool = False

    @field_validator("max_sqp_iters", "cold_start_iters", "max_qp_iters")
    @classmethod
    def validate_iters(cls, v: int) -> int:
        if v < 1:
            raise ValueError("iteration limits must be at least 1")
        return v

    @field_validator("kkt_tol", "active_set_tol", "levenberg_damping", "merit_penalty")
    @classmethod
    def validate_tolerance(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("tolerances must be positive")
        return v


# =============================================================================
# Scenario
# =============================================================================


class RatesConfig(_Section):
    """Multirate loop frequencies in Hz."""

    reference_hz: int = 200
    control_hz: int = 500
    plant_hz: int = 1000

    @model_validator(mode="after")
    def check_rates(self) -> "RatesConfig":
        if min(self.reference_hz, self.control_hz, self.plant_hz) <= 0:
            raise ValueError("rates must be positive")
        if not self.plant_hz >= self.control_hz >= self.reference_hz:
            raise ValueError("rates must satisfy plant_hz >= control_hz >= reference_hz")
        if self.plant_hz % self.control_hz:
            raise ValueError("plant_hz must be an integer multiple of control_hz")
        if self.plant_hz % self.reference_hz:
            raise ValueError("plant_hz must be an integer multiple of reference_hz")
        return self


class UgvPath(_Section):
    """Closed polyline followed by the ground vehicle at constant speed."""

    waypoints: list[tuple[float, float, float]] = [
        (-3.0, -3.0, 0.0),
        (3.0, -3.0, 0.0),
        (3.0, 3.0, 0.0),
        (-3.0, 3.0, 0.0),
        (-3.0, -3.0, 0.0),
    ]
    lap_time: float = 26.0

    @model_validator(mode="after")
    def check_path(self) -> "UgvPath":
        if len(self.waypoints) < 2:
            raise ValueError("ugv path needs at least two waypoints")
        if not self.lap_time > 0:
            raise ValueError("lap_time must be positive")
        pts = np.asarray(self.waypoints)
        if np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)) <= 0:
            raise ValueError("ugv path must have positive length")
        return self


class MravInitial(_Section):
    """Initial multirotor state; rotor_speeds None means equal hover speeds."""

    position: tuple[float, float, float] = (-3.25, -3.25, 1.0)
    euler: tuple[float, float, float] = (0.0, 0.0, 0.0)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    body_rates: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotor_speeds: list[float] | None = None
    reference_offset: tuple[float, float, float] = (0.0, 0.0, 1.0)


class Obstacle(_Section):
    """Spherical obstacle moving on a straight line during its motion window."""

    start_pos: tuple[float, float, float]
    end_pos: tuple[float, float, float]
    motion_window: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.25

    @field_validator("radius")
    @classmethod
    def validate_radius(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("obstacle radius must be positive")
        return v

    @field_validator("motion_window")
    @classmethod
    def validate_window(cls, v: tuple[float, float]) -> tuple[float, float]:
        if v[0] > v[1]:
            raise ValueError("obstacle motion_window must satisfy t_a <= t_b")
        return v


def _default_obstacles() -> list[Obstacle]:
    return [
        Obstacle(start_pos=(1.5, -3.0, 0.75), end_pos=(1.5, -3.0, 0.75)),
        Obstacle(start_pos=(5.0, 1.0, 2.0), end_pos=(2.0, -1.0, 0.5), motion_window=(6.0, 10.0)),
        Obstacle(start_pos=(-2.0, 1.5, 0.5), end_pos=(0.0, -3.0, 2.0), motion_window=(18.0, 21.0)),
    ]


class Scenario(_Section):
    """Root configuration object: a complete closed-loop experiment."""

    schema_version: int = SCHEMA_VERSION
    duration: float = 26.0
    workspace: tuple[float, float, float] = (5.0, 5.0, 2.0)
    rates: RatesConfig = RatesConfig()
    horizon: HorizonConfig = HorizonConfig()
    ugv: UgvPath = UgvPath()
    mrav: MravInitial = MravInitial()
    obstacles: list[Obstacle] = Field(default_factory=_default_obstacles)
    gtmr: GtmrParams = GtmrParams()
    optics: OpticalParams = OpticalParams()
    weights: OcpWeights = OcpWeights()
    solver: SolverConfig = SolverConfig()

    @field_validator("schema_version")
    @classmethod
    def validate_schema_version(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v} (expected {SCHEMA_VERSION})")
        return v

    @field_validator("duration")
    @classmethod
    def validate_duration(cls, v: float) -> float:
        if v < 0 or not math.isfinite(v):
            raise ValueError("duration must be finite and non-negative")
        return v

    @model_validator(mode="after")
    def check_initial_rotors(self) -> "Scenario":
        speeds = self.mrav.rotor_speeds
        if speeds is not None:
            if len(speeds) != self.gtmr.n_rotors:
                raise ValueError("mrav.rotor_speeds must have n_rotors entries")
            if any(not self.gtmr.speed_min <= s <= self.gtmr.speed_max for s in speeds):
                raise ValueError("mrav.rotor_speeds must lie within [speed_min, speed_max]")
        return self

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacles)

    @property
    def ugv_initial(self) -> np.ndarray:
        return np.asarray(self.ugv.waypoints[0], dtype=float)


class RuntimeSettings(BaseModel):
    """Process-level settings resolved from CLI flags and LINKMPC_* variables."""

    log_level: str = "INFO"
    jobs: int = 1
    rti_iters: int | None = None

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"unknown log level '{v}'")
        return level

    @field_validator("jobs")
    @classmethod
    def validate_jobs(cls, v: int) -> int:
        if v < 1:
            raise ValueError("jobs must be at least 1")
        return v

    @field_validator("rti_iters")
    @classmethod
    def validate_rti_iters(cls, v: int | None) -> int | None:
        if v is not None and not 1 <= v <= 50:
            raise ValueError("rti_iters must lie in 1..50")
        return v


# =============================================================================
# Reports
# =============================================================================


class Metrics(BaseModel):
    """Closed-loop mission summary."""

    mean_link_quality: float
    link_uptime_fraction: float
    rms_velocity_error: float
    rms_range_error: float
    min_obstacle_clearance: float
    max_slack: float
    rotor_bound_violations: int
    cone_violations_duration: float
    range_window_fraction: float
    cone_satisfied_fraction: float
    predicted_range_violations: int = 0
    predicted_cone_violations: int = 0
    controller_invocations: int = 0
    reference_refreshes: int = 0
    duration: float = 0.0
