"""Pytest fixtures for linkmpc tests."""

import numpy as np
import pytest

from linkmpc.dynamics import GtmrModel, hover_state
from linkmpc.models import GtmrParams, OpticalParams, Scenario
from linkmpc.ocp import OcpProblem, OutputVector, StageData, aligned_receiver, hover_reference
from linkmpc.simulator import SimLog

FAR_AWAY = np.array([50.0, 50.0, 50.0])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)


@pytest.fixture
def gtmr() -> GtmrParams:
    return GtmrParams()


@pytest.fixture
def coplanar_gtmr() -> GtmrParams:
    """Hexarotor with all propellers parallel to the body z axis."""
    return GtmrParams(tilt_alpha_deg=[0.0] * 6)


@pytest.fixture
def optics() -> OpticalParams:
    return OpticalParams()


@pytest.fixture
def model(gtmr) -> GtmrModel:
    return GtmrModel(gtmr)


@pytest.fixture
def default_scenario() -> Scenario:
    return Scenario()


def random_state(rng: np.random.Generator, n_rotors: int = 6) -> np.ndarray:
    """State away from the Euler singularity with rotors inside their bounds."""
    return np.concatenate(
        [
            rng.uniform(-2.0, 2.0, 3),
            rng.uniform(-0.5, 0.5, 3),
            rng.uniform(-1.0, 1.0, 3),
            rng.uniform(-1.0, 1.0, 3),
            rng.uniform(30.0, 90.0, n_rotors),
        ]
    )


def make_hover_problem(
    gtmr: GtmrParams | None = None,
    optics: OpticalParams | None = None,
    horizon: int = 5,
    step: float = 0.015,
    distance: float | None = None,
    reference_range: float | None = None,
    n_obstacles: int = 3,
    obstacle_center: np.ndarray = FAR_AWAY,
) -> OcpProblem:
    """Hovering vehicle with a receiver on its beam axis."""
    gtmr = gtmr or GtmrParams()
    optics = optics or OpticalParams()
    state = hover_state(gtmr, position=(0.0, 0.0, 1.0))
    rx = aligned_receiver(state, optics, optics.desired_range if distance is None else distance)
    reference = hover_reference(state, optics)
    if reference_range is not None:
        reference = OutputVector(
            reference.position, reference.velocity, reference.acceleration, 1.0, 0.0, reference_range
        )
    stage = StageData(
        reference_output=reference,
        obstacle_centers=np.tile(obstacle_center, (n_obstacles, 1)),
        obstacle_radii=np.full(n_obstacles, 0.25),
        rx_pos=rx,
        rx_vel=np.zeros(3),
    )
    return OcpProblem(
        horizon_steps=horizon,
        step=step,
        initial_state=state,
        stages=[stage] * (horizon + 1),
        weights=Scenario().weights,
        gtmr=gtmr,
        optics=optics,
        safety_margin=0.25,
    )


@pytest.fixture
def hover_problem() -> OcpProblem:
    return make_hover_problem()


def make_log(
    scenario: Scenario,
    n_records: int = 11,
    i_link: float | np.ndarray = 1.0,
    range_value: float | None = None,
    dt: float | None = None,
) -> SimLog:
    """Synthetic log with exact reference tracking unless overridden."""
    dt = dt or 1.0 / scenario.rates.plant_hz
    n_rotors = scenario.gtmr.n_rotors
    n_obs = scenario.n_obstacles
    times = np.arange(n_records) * dt
    references = np.zeros((n_records, 12))
    references[:, 0:3] = [0.0, 0.0, 1.0]
    references[:, 3] = 0.5
    references[:, 9:12] = [1.0, 0.0, scenario.optics.desired_range]
    outputs = references.copy()
    if range_value is not None:
        outputs[:, 11] = range_value
    states = np.zeros((n_records, 12 + n_rotors))
    states[:, 0:3] = outputs[:, 0:3]
    states[:, 12:] = 60.0
    link = np.broadcast_to(np.asarray(i_link, dtype=float), (n_records,)).copy()
    return SimLog(
        scenario=scenario,
        times=times,
        states=states,
        controls=np.zeros((n_records, n_rotors)),
        commanded_speeds=np.full((n_records, n_rotors), 60.0),
        outputs=outputs,
        references=references,
        i_tx=np.ones(n_records),
        i_rx=np.ones(n_records),
        i_link=link,
        obstacle_distances=np.full((n_records, n_obs), 2.0),
        slacks=np.zeros((n_records, n_obs)),
        kkt=np.full(n_records, 1e-9),
        solve_time=np.zeros(n_records),
        controller_invocations=5,
        reference_refreshes=3,
    )


def central_difference(func, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Jacobian of func at x by central differences, one column per entry of x."""
    cols = []
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((func(x + e) - func(x - e)) / (2 * h))
    return np.column_stack(cols)
