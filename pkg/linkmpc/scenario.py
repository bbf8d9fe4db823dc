"""Mission timelines: ground-vehicle path, vehicle references and moving obstacles."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from linkmpc.dynamics import ExtendedState, RigidBodyState, hover_speed
from linkmpc.ocp import OutputVector, StageData
from linkmpc.models import Scenario

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class UgvState:
    position: np.ndarray
    velocity: np.ndarray


def _check_time(t: float) -> float:
    if not math.isfinite(t) or t < 0:
        raise ValueError(f"time {t} is outside the scenario timeline")
    return float(t)


def _ugv_track(times: np.ndarray, scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Ground-vehicle positions and velocities at an array of times."""
    points = np.asarray(scenario.ugv.waypoints, dtype=float)
    segments = np.diff(points, axis=0)
    lengths = np.linalg.norm(segments, axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    speed = cumulative[-1] / scenario.ugv.lap_time

    # Zero-length segments (repeated waypoints) hand over to the next real one.
    forward = np.arange(len(lengths))
    for i in range(len(lengths) - 2, -1, -1):
        if lengths[i] == 0:
            forward[i] = forward[i + 1]

    s = (times % scenario.ugv.lap_time) * speed
    idx = np.clip(np.searchsorted(cumulative, s, side="right") - 1, 0, len(lengths) - 1)
    idx = forward[idx]
    seg_len = lengths[idx][:, None]
    direction = np.divide(segments[idx], seg_len, out=np.zeros((idx.shape[0], 3)), where=seg_len > 0)
    positions = points[idx] + direction * (s - cumulative[idx])[:, None]
    return positions, direction * speed


def ugv_state(t: float, scenario: Scenario) -> UgvState:
    """Position and velocity of the ground vehicle at time t.

    The path is traversed at constant speed, one lap per lap_time; times
    beyond one lap wrap around so that horizons may look past the mission end.
    """
    t = _check_time(t)
    positions, velocities = _ugv_track(np.array([t]), scenario)
    return UgvState(positions[0], velocities[0])


def _follow_reference(ugv_position: np.ndarray, ugv_velocity: np.ndarray, scenario: Scenario) -> OutputVector:
    return OutputVector(
        position=ugv_position + np.asarray(scenario.mrav.reference_offset, dtype=float),
        velocity=np.array(ugv_velocity, dtype=float),
        acceleration=np.zeros(3),
        cos_delta=1.0,
        cos_delta_rate=0.0,
        range=scenario.optics.desired_range,
    )


def mrav_reference(t: float, scenario: Scenario) -> OutputVector:
    """Desired output: follow the ground vehicle at a fixed offset with an ideal link."""
    ugv = ugv_state(t, scenario)
    return _follow_reference(ugv.position, ugv.velocity, scenario)


@dataclass(frozen=True, eq=False)
class ReferenceSnapshot:
    """Reference preview and receiver motion sampled at one reference refresh.

    Entry k belongs to time + k * step. The controller tracks this preview
    until the next refresh.
    """

    time: float
    step: float
    outputs: list[OutputVector]
    rx_positions: np.ndarray
    rx_velocities: np.ndarray

    @property
    def current(self) -> OutputVector:
        return self.outputs[0]

    def __len__(self) -> int:
        return len(self.outputs)


def reference_snapshot(t: float, scenario: Scenario) -> ReferenceSnapshot:
    """Sample the reference generator over one horizon starting at t."""
    t = _check_time(t)
    step = scenario.horizon.step
    times = t + step * np.arange(scenario.horizon.steps + 1)
    positions, velocities = _ugv_track(times, scenario)
    return ReferenceSnapshot(
        time=t,
        step=step,
        outputs=[_follow_reference(p, v, scenario) for p, v in zip(positions, velocities)],
        rx_positions=positions,
        rx_velocities=velocities,
    )


def obstacle_position(j: int, t: float, scenario: Scenario) -> np.ndarray:
    """Centre of obstacle j (1-based) at time t."""
    t = _check_time(t)
    if not 1 <= j <= scenario.n_obstacles:
        raise IndexError(f"obstacle index {j} outside 1..{scenario.n_obstacles}")
    obstacle = scenario.obstacles[j - 1]
    start = np.asarray(obstacle.start_pos, dtype=float)
    end = np.asarray(obstacle.end_pos, dtype=float)
    t_a, t_b = obstacle.motion_window
    if t <= t_a and t < t_b:
        return start
    if t >= t_b:
        return end
    return start + (t - t_a) / (t_b - t_a) * (end - start)


def obstacle_positions(t: float, scenario: Scenario) -> np.ndarray:
    if not scenario.n_obstacles:
        return np.zeros((0, 3))
    return np.array([obstacle_position(j, t, scenario) for j in range(1, scenario.n_obstacles + 1)])


def obstacle_radii(scenario: Scenario) -> np.ndarray:
    return np.array([o.radius for o in scenario.obstacles], dtype=float)


def stage_data(t: float, scenario: Scenario, reference: OutputVector | None = None) -> StageData:
    """Stage data at time t; reference overrides the live reference when given."""
    ugv = ugv_state(t, scenario)
    return StageData(
        reference_output=mrav_reference(t, scenario) if reference is None else reference,
        obstacle_centers=obstacle_positions(t, scenario),
        obstacle_radii=obstacle_radii(scenario),
        rx_pos=ugv.position,
        rx_vel=ugv.velocity,
    )


def initial_state(scenario: Scenario) -> ExtendedState:
    """Initial multirotor state; unspecified rotor speeds default to hover."""
    mrav = scenario.mrav
    speeds = mrav.rotor_speeds
    if speeds is None:
        speeds = [hover_speed(scenario.gtmr)] * scenario.gtmr.n_rotors
    body = RigidBodyState(mrav.position, mrav.euler, mrav.velocity, mrav.body_rates)
    return ExtendedState(body, np.asarray(speeds, dtype=float))


def outside_workspace(position: np.ndarray, scenario: Scenario) -> bool:
    """True when the position leaves the symmetric workspace box."""
    half = np.asarray(scenario.workspace, dtype=float)
    return bool(np.any(np.abs(position[:2]) > half[:2]) or position[2] < 0 or position[2] > half[2])
