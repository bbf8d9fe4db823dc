"""Mission metrics computed from a simulation log."""

import logging

import numpy as np

from linkmpc.dynamics import RIGID_BODY_SIZE
from linkmpc.models import Metrics, OpticalParams
from linkmpc.optical_link import moving_average
from linkmpc.simulator import SimLog

logger = logging.getLogger(__name__)

BOUND_TOL = 1e-6


class EmptyLogError(ValueError):
    """Raised when metrics are requested for a log without records."""


def _rms(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(values**2)))


def compute_metrics(log: SimLog, optics: OpticalParams | None = None) -> Metrics:
    """Summarize link quality, tracking accuracy, clearance and actuator use."""
    if len(log) == 0:
        raise EmptyLogError("cannot compute metrics of an empty log")
    scenario = log.scenario
    optics = optics or scenario.optics
    gtmr = scenario.gtmr
    t_end = float(log.times[-1])

    mean_quality = moving_average(log.link_samples(), t_end, optics.rx_window)

    velocity_error = log.outputs[:, 3:6] - log.references[:, 3:6]
    range_error = log.ranges - optics.desired_range

    clearances = log.clearances
    min_clearance = float(np.min(clearances)) if clearances.size else float("inf")
    max_slack = float(np.max(log.slacks)) if log.slacks.size else 0.0

    speeds = log.states[:, RIGID_BODY_SIZE:]
    speed_bad = np.any(
        (speeds < gtmr.speed_min - BOUND_TOL) | (speeds > gtmr.speed_max + BOUND_TOL), axis=1
    )
    accel_bad = np.any(
        (log.controls < gtmr.accel_min - BOUND_TOL) | (log.controls > gtmr.accel_max + BOUND_TOL),
        axis=1,
    )

    dt = np.diff(log.times, append=log.times[-1])
    cone_bad = log.cos_delta < optics.cone_cos_threshold
    in_range = (log.ranges >= optics.range_min) & (log.ranges <= optics.range_max)

    metrics = Metrics(
        mean_link_quality=mean_quality,
        link_uptime_fraction=float(np.mean(log.i_link)),
        rms_velocity_error=_rms(np.linalg.norm(velocity_error, axis=1)),
        rms_range_error=_rms(range_error),
        min_obstacle_clearance=min_clearance,
        max_slack=max_slack,
        rotor_bound_violations=int(np.sum(speed_bad | accel_bad)),
        cone_violations_duration=float(np.sum(dt[cone_bad])),
        range_window_fraction=float(np.mean(in_range)),
        cone_satisfied_fraction=float(np.mean(~cone_bad)),
        predicted_range_violations=log.predicted_range_violations,
        predicted_cone_violations=log.predicted_cone_violations,
        controller_invocations=log.controller_invocations,
        reference_refreshes=log.reference_refreshes,
        duration=t_end,
    )
    logger.info(
        "Mission metrics: mean link quality %.4f, uptime %.3f",
        metrics.mean_link_quality,
        metrics.link_uptime_fraction,
    )
    return metrics


def format_metrics_report(metrics: Metrics) -> str:
    """Flat 'key = value' report, one metric per line."""
    lines = []
    for key, value in metrics.model_dump().items():
        if isinstance(value, float):
            lines.append(f"{key} = {value:.9g}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

