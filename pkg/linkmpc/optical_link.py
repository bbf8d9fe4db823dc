"""Free-space optical link geometry: misalignment, range, indicators and quality."""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from linkmpc.dynamics import ETA, OMEGA, POS, VEL, E3, rotation_matrix
from linkmpc.models import OpticalParams

logger = logging.getLogger(__name__)

MIN_RANGE = 1e-9


class DegenerateRangeError(ValueError):
    """Raised when transmitter and receiver coincide."""


@dataclass(frozen=True)
class LinkSample:
    """Instantaneous link evaluation."""

    time: float
    cos_delta: float
    cos_delta_rate: float
    range: float
    i_tx: int
    i_rx: int
    i_link: int

    def __post_init__(self):
        if self.i_link > min(self.i_tx, self.i_rx):
            raise ValueError("link indicator cannot exceed the transmitter or receiver indicator")

    @property
    def misalignment_deg(self) -> float:
        return math.degrees(math.acos(min(1.0, max(-1.0, self.cos_delta))))


def link_vector(mrav_pos: np.ndarray, rx_pos: np.ndarray) -> np.ndarray:
    """Vector from the receiver to the transmitter."""
    return np.asarray(mrav_pos, dtype=float) - np.asarray(rx_pos, dtype=float)


def _range(d_c: np.ndarray) -> float:
    r = float(np.linalg.norm(d_c))
    if r < MIN_RANGE:
        raise DegenerateRangeError(f"link range {r:.3e} m is degenerate")
    return r


def transmitter_position(x: np.ndarray, optics: OpticalParams) -> np.ndarray:
    return x[POS] + rotation_matrix(x[ETA]) @ optics.tx_offset


def beam_axis_world(x: np.ndarray, optics: OpticalParams) -> np.ndarray:
    """Unit optical axis of the transmitter in the world frame."""
    axis = rotation_matrix(x[ETA]) @ optics.tx_rotation @ E3
    return axis / np.linalg.norm(axis)


def misalignment_cosine(beam_axis: np.ndarray, d_c: np.ndarray) -> float:
    """cos(delta) between the beam axis and the direction towards the receiver."""
    r = _range(d_c)
    return float(np.clip(-np.dot(beam_axis, d_c) / r, -1.0, 1.0))


def misalignment_rate(
    x: np.ndarray,
    rx_pos: np.ndarray,
    rx_vel: np.ndarray,
    optics: OpticalParams,
) -> float:
    """Time derivative of cos(delta) for a receiver moving with velocity rx_vel."""
    rot = rotation_matrix(x[ETA])
    beam_body = optics.tx_rotation @ E3
    omega = x[OMEGA]
    z = rot @ beam_body
    d = x[POS] + rot @ optics.tx_offset - rx_pos
    r = _range(d)
    u = d / r
    w = rot @ np.cross(omega, beam_body)
    q = x[VEL] + rot @ np.cross(omega, optics.tx_offset) - rx_vel
    return float(-(z @ q - (u @ z) * (u @ q)) / r - u @ w)


def tx_indicator(cos_delta: float, optics: OpticalParams) -> int:
    """1 when the receiver lies inside the transmitter half-power cone (inclusive)."""
    return int(cos_delta >= math.cos(optics.tx_half_power))


def rx_indicator(rx_axis: np.ndarray, d_c: np.ndarray, optics: OpticalParams) -> int:
    """1 when the transmitter lies inside the receiver field of view."""
    r = _range(d_c)
    return int(float(np.dot(rx_axis, d_c)) / r >= math.cos(optics.rx_fov))


def link_indicator(i_tx: int, i_rx: int, range_: float, optics: OpticalParams) -> int:
    return int(bool(i_tx) and bool(i_rx) and optics.range_min <= range_ <= optics.range_max)


def moving_average(history: Sequence[LinkSample], t_now: float, window: float) -> float:
    """Zero-order-hold average of i_link over [t_now - window, t_now].

    Before a full window has elapsed the average is normalized by the covered
    time. A single sample at t_now returns its own indicator.
    """
    if not history:
        raise ValueError("link history is empty")
    if not window > 0:
        raise ValueError("window must be positive")
    times = np.array([s.time for s in history], dtype=float)
    values = np.array([s.i_link for s in history], dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValueError("link history must be time-ordered")
    start = max(t_now - window, times[0])
    if t_now <= start:
        idx = int(np.searchsorted(times, t_now, side="right")) - 1
        return float(values[max(idx, 0)])
    seg_start = np.maximum(times, start)
    seg_end = np.minimum(np.append(times[1:], np.inf), t_now)
    lengths = np.clip(seg_end - seg_start, 0.0, None)
    return float(lengths @ values / (t_now - start))


def moving_average_series(times: np.ndarray, values: np.ndarray, window: float) -> np.ndarray:
    """Running moving_average evaluated at every sample time."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size == 0:
        return np.zeros(0)
    cumulative = np.concatenate([[0.0], np.cumsum(values[:-1] * np.diff(times))])
    start = np.maximum(times - window, times[0])
    covered = times - start
    integral = cumulative - np.interp(start, times, cumulative)
    out = values.copy()
    positive = covered > 0
    out[positive] = integral[positive] / covered[positive]
    return out


def receiver_axis(
    rx_pos: np.ndarray,
    tx_pos: np.ndarray,
    previous_axis: np.ndarray | None,
    dt: float,
    time_constant: float,
) -> np.ndarray:
    """Receiver pointing axis, lagging the line of sight with a first-order slerp."""
    target = link_vector(tx_pos, rx_pos)
    target = target / _range(target)
    if previous_axis is None or time_constant <= 0:
        return target
    prev = np.asarray(previous_axis, dtype=float)
    prev = prev / np.linalg.norm(prev)
    angle = math.acos(float(np.clip(prev @ target, -1.0, 1.0)))
    if angle < 1e-12:
        return target
    keep = math.exp(-dt / time_constant)
    # Angle left between the new axis and the target.
    remaining = keep * angle
    sin_angle = math.sin(angle)
    if sin_angle < 1e-9:
        logger.debug("Receiver axis opposite to line of sight; snapping to target")
        return target
    axis = (math.sin(remaining) * prev + math.sin(angle - remaining) * target) / sin_angle
    return axis / np.linalg.norm(axis)
