"""Multirate closed-loop simulation: plant, reference generator and NMPC controller."""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from linkmpc.dynamics import POS, RIGID_BODY_SIZE, ExtendedState, GtmrModel, SingularityError
from linkmpc.models import Scenario, SolverConfig
from linkmpc.ocp import OcpProblem, StageData, evaluate_output, stage_violations
from linkmpc.optical_link import (
    DegenerateRangeError,
    LinkSample,
    beam_axis_world,
    link_indicator,
    misalignment_cosine,
    moving_average_series,
    receiver_axis,
    rx_indicator,
    transmitter_position,
    tx_indicator,
)
from linkmpc.qp_solver import QpError, QpInfeasibleError, dump_qp
from linkmpc.scenario import (
    ReferenceSnapshot,
    initial_state,
    obstacle_positions,
    obstacle_radii,
    outside_workspace,
    reference_snapshot,
    stage_data,
    ugv_state,
)
from linkmpc.sqp import OcpSolution, SqpSolver, shift_warm_start

logger = logging.getLogger(__name__)


class SimulationAbort(RuntimeError):
    """Closed loop stopped early; carries the failure time and the partial log."""

    def __init__(self, message: str, time: float, log: "SimLog"):
        super().__init__(message)
        self.time = time
        self.log = log


@dataclass
class SimLog:
    """Columnar record of a closed-loop run, one row per plant step."""

    scenario: Scenario
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    commanded_speeds: np.ndarray
    outputs: np.ndarray
    references: np.ndarray
    i_tx: np.ndarray
    i_rx: np.ndarray
    i_link: np.ndarray
    obstacle_distances: np.ndarray
    slacks: np.ndarray
    kkt: np.ndarray
    solve_time: np.ndarray
    controller_invocations: int = 0
    reference_refreshes: int = 0
    predicted_range_violations: int = 0
    predicted_cone_violations: int = 0
    aborted_at: float | None = None

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def cos_delta(self) -> np.ndarray:
        return self.outputs[:, 9]

    @property
    def cos_delta_rate(self) -> np.ndarray:
        return self.outputs[:, 10]

    @property
    def ranges(self) -> np.ndarray:
        return self.outputs[:, 11]

    @property
    def misalignment_deg(self) -> np.ndarray:
        return np.degrees(np.arccos(np.clip(self.cos_delta, -1.0, 1.0)))

    @property
    def clearances(self) -> np.ndarray:
        """||p - p_O|| - d_O per obstacle."""
        return self.obstacle_distances - obstacle_radii(self.scenario)[None, :]

    @property
    def link_quality(self) -> np.ndarray:
        """Running windowed average of i_link."""
        return moving_average_series(self.times, self.i_link, self.scenario.optics.rx_window)

    @property
    def range_margins(self) -> np.ndarray:
        optics = self.scenario.optics
        return np.column_stack([self.ranges - optics.range_min, optics.range_max - self.ranges])

    @property
    def cone_margin(self) -> np.ndarray:
        return self.cos_delta - self.scenario.optics.cone_cos_threshold

    def link_samples(self) -> list[LinkSample]:
        return [
            LinkSample(
                time=float(t),
                cos_delta=float(y[9]),
                cos_delta_rate=float(y[10]),
                range=float(y[11]),
                i_tx=int(a),
                i_rx=int(b),
                i_link=int(c),
            )
            for t, y, a, b, c in zip(self.times, self.outputs, self.i_tx, self.i_rx, self.i_link)
        ]


@dataclass
class _LogBuilder:
    scenario: Scenario
    rows: dict[str, list] = field(default_factory=dict)

    def append(self, **values):
        for key, value in values.items():
            self.rows.setdefault(key, []).append(value)

    def build(self, counters: dict[str, int], aborted_at: float | None = None) -> SimLog:
        n_rotors = self.scenario.gtmr.n_rotors
        n_obs = self.scenario.n_obstacles
        nx = RIGID_BODY_SIZE + n_rotors

        def stack(key: str, width: int) -> np.ndarray:
            rows = self.rows.get(key, [])
            return np.array(rows, dtype=float).reshape(len(rows), width)

        def column(key: str) -> np.ndarray:
            return np.array(self.rows.get(key, []), dtype=float)

        return SimLog(
            scenario=self.scenario,
            times=column("time"),
            states=stack("state", nx),
            controls=stack("control", n_rotors),
            commanded_speeds=stack("commanded", n_rotors),
            outputs=stack("output", 12),
            references=stack("reference", 12),
            i_tx=column("i_tx"),
            i_rx=column("i_rx"),
            i_link=column("i_link"),
            obstacle_distances=stack("distances", n_obs),
            slacks=stack("slacks", n_obs),
            kkt=column("kkt"),
            solve_time=column("solve_time"),
            aborted_at=aborted_at,
            **counters,
        )


def build_problem(
    scenario: Scenario, x: np.ndarray, t: float, snapshot: ReferenceSnapshot | None = None
) -> OcpProblem:
    """Horizon problem anchored at controller time t.

    Stage k tracks entry k of the held reference snapshot, taken at the last
    reference refresh, and sees the obstacles where they are at t + k * step.
    Without a snapshot the reference is sampled at t.
    """
    step = scenario.horizon.step
    n_steps = scenario.horizon.steps
    if snapshot is None:
        snapshot = reference_snapshot(t, scenario)
    if len(snapshot) != n_steps + 1:
        raise ValueError(f"reference snapshot has {len(snapshot)} stages, horizon needs {n_steps + 1}")
    radii = obstacle_radii(scenario)
    stages = [
        StageData(
            reference_output=snapshot.outputs[k],
            obstacle_centers=obstacle_positions(t + k * step, scenario),
            obstacle_radii=radii,
            rx_pos=snapshot.rx_positions[k],
            rx_vel=snapshot.rx_velocities[k],
        )
        for k in range(n_steps + 1)
    ]
    return OcpProblem(
        horizon_steps=n_steps,
        step=step,
        initial_state=ExtendedState.from_vector(x, scenario.gtmr.n_rotors),
        stages=stages,
        weights=scenario.weights,
        gtmr=scenario.gtmr,
        optics=scenario.optics,
        safety_margin=scenario.horizon.safety_margin,
    )


class ClosedLoop:
    """Deterministic fixed-step loop at plant_hz with decimated controller and reference."""

    def __init__(
        self,
        scenario: Scenario,
        solver_config: SolverConfig | None = None,
        dump_qp_dir: Path | None = None,
        use_controller: bool = True,
    ):
        self.scenario = scenario
        self.config = solver_config or scenario.solver
        self.model = GtmrModel(scenario.gtmr)
        self.solver = SqpSolver(self.config)
        self.dump_qp_dir = dump_qp_dir
        self.use_controller = use_controller
        rates = scenario.rates
        self.dt = 1.0 / rates.plant_hz
        self.control_every = rates.plant_hz // rates.control_hz
        self.reference_every = rates.plant_hz // rates.reference_hz
        self.n_steps = int(round(scenario.duration * rates.plant_hz))
        self._speeds_outside = False

    def _plant_step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """One RK4 plant step; rotor speeds are integrated without clamping."""
        gtmr = self.scenario.gtmr
        x_next = self.model.rk4(x, u, self.dt)
        speeds = x_next[RIGID_BODY_SIZE:]
        outside = bool(np.any((speeds < gtmr.speed_min) | (speeds > gtmr.speed_max)))
        if outside and not self._speeds_outside:
            logger.warning("Rotor speeds left [%g, %g] Hz: %s", gtmr.speed_min, gtmr.speed_max, np.round(speeds, 3))
        self._speeds_outside = outside
        return x_next

    def _solve(
        self,
        x: np.ndarray,
        t: float,
        warm: OcpSolution | None,
        index: int,
        snapshot: ReferenceSnapshot | None = None,
    ) -> OcpSolution:
        problem = build_problem(self.scenario, x, t, snapshot)
        if warm is None:
            solution = self.solver.solve(problem)
        else:
            fraction = min(1.0, self.control_every * self.dt / self.scenario.horizon.step)
            shifted = shift_warm_start(warm, problem.initial_state, fraction)
            solution = self.solver.rti_step(problem, shifted)
        if self.dump_qp_dir is not None and self.solver.last_qp is not None:
            dump_qp(self.solver.last_qp, Path(self.dump_qp_dir) / f"qp_{index:06d}.txt")
        if solution.status == "infeasible_qp":
            raise QpInfeasibleError(f"controller call {index} has no feasible QP step")
        counts = stage_violations(problem, solution.states)
        self.predicted["predicted_range_violations"] += counts["range"]
        self.predicted["predicted_cone_violations"] += counts["cone"]
        return solution

    def run(self) -> SimLog:
        scenario = self.scenario
        optics = scenario.optics
        n_rotors = scenario.gtmr.n_rotors
        n_obs = scenario.n_obstacles
        log = _LogBuilder(scenario)
        self.predicted = {"predicted_range_violations": 0, "predicted_cone_violations": 0}
        self._speeds_outside = False
        counters = {"controller_invocations": 0, "reference_refreshes": 0}

        x = initial_state(scenario).to_vector()
        u_hold = np.zeros(n_rotors)
        commanded = x[RIGID_BODY_SIZE:].copy()
        slacks = np.zeros(n_obs)
        kkt, solve_time = 0.0, 0.0
        solution: OcpSolution | None = None
        snapshot = reference_snapshot(0.0, scenario)
        rx_axis = None
        left_workspace = False

        logger.info(
            "Starting closed loop: %.2f s at %d Hz plant / %d Hz control / %d Hz reference",
            scenario.duration,
            scenario.rates.plant_hz,
            scenario.rates.control_hz,
            scenario.rates.reference_hz,
        )
        wall_start = time.perf_counter()
        step = 0
        t = 0.0
        try:
            for step in range(self.n_steps + 1):
                t = step * self.dt
                if step % self.reference_every == 0:
                    snapshot = reference_snapshot(t, scenario)
                    counters["reference_refreshes"] += 1

                if self.use_controller and step % self.control_every == 0 and step < self.n_steps:
                    tic = time.perf_counter()
                    solution = self._solve(x, t, solution, counters["controller_invocations"], snapshot)
                    solve_time = time.perf_counter() - tic
                    counters["controller_invocations"] += 1
                    u_hold = solution.controls[0].copy()
                    commanded = solution.states[1, RIGID_BODY_SIZE:].copy()
                    slacks = solution.slacks[0].copy()
                    kkt = solution.kkt_residual

                ugv = ugv_state(t, scenario)
                stage = stage_data(t, scenario, snapshot.current)
                y = evaluate_output(x, stage, self.model, optics)
                tx_pos = transmitter_position(x, optics)
                d_c = tx_pos - ugv.position
                rx_axis = receiver_axis(ugv.position, tx_pos, rx_axis, self.dt, optics.receiver_time_constant)
                i_tx = tx_indicator(misalignment_cosine(beam_axis_world(x, optics), d_c), optics)
                i_rx = rx_indicator(rx_axis, d_c, optics)
                centers = obstacle_positions(t, scenario)
                log.append(
                    time=t,
                    state=x.copy(),
                    control=u_hold.copy(),
                    commanded=commanded.copy(),
                    output=y,
                    reference=snapshot.current.to_vector(),
                    i_tx=i_tx,
                    i_rx=i_rx,
                    i_link=link_indicator(i_tx, i_rx, y[11], optics),
                    distances=np.linalg.norm(x[POS][None, :] - centers, axis=1),
                    slacks=slacks.copy(),
                    kkt=kkt,
                    solve_time=solve_time,
                )
                if not left_workspace and outside_workspace(x[POS], scenario):
                    left_workspace = True
                    logger.info("Vehicle left the nominal workspace at t=%.3f s", t)

                if step < self.n_steps:
                    x = self._plant_step(x, u_hold)
                if step and step % scenario.rates.plant_hz == 0:
                    logger.info(
                        "t=%.1f s: range=%.3f m cos_delta=%.3f kkt=%.2e",
                        t,
                        y[11],
                        y[9],
                        kkt,
                    )
        except (QpError, SingularityError, DegenerateRangeError) as e:
            logger.exception("Closed loop aborted at t=%.4f s", t)
            partial = log.build({**counters, **self.predicted}, aborted_at=t)
            raise SimulationAbort(f"solver failure at t={t:.4f} s: {e}", t, partial) from e

        logger.info(
            "Closed loop finished in %.1f s wall time (%d controller calls)",
            time.perf_counter() - wall_start,
            counters["controller_invocations"],
        )
        return log.build({**counters, **self.predicted})


def run_closed_loop(
    scenario: Scenario,
    solver_config: SolverConfig | None = None,
    dump_qp_dir: Path | None = None,
) -> SimLog:
    """Simulate the scenario and return the full log."""
    return ClosedLoop(scenario, solver_config, dump_qp_dir).run()
