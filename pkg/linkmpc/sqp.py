"""Gauss-Newton SQP with multiple shooting, full condensing and real-time iterations."""

import logging
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from linkmpc.dynamics import VEL, DimensionMismatchError, ExtendedState, SingularityError
from linkmpc.models import SolverConfig
from linkmpc.ocp import (
    OcpProblem,
    StageLinearization,
    linearize_stage,
    path_violation,
    trajectory_cost,
)
from linkmpc.qp_solver import (
    QpInfeasibleError,
    QpIterationLimitError,
    QpProblem,
    QpSolution,
    solve_qp,
)

logger = logging.getLogger(__name__)

SolveStatus = Literal["converged", "max_iter", "infeasible_qp"]

# Step lengths below this end the cold-start line search.
MIN_STEP = 2.0**-10


# =============================================================================
# Solution Containers
# =============================================================================


@dataclass
class OcpSolution:
    """Shooting trajectories of one solve, stored as stacked arrays."""

    states: np.ndarray
    controls: np.ndarray
    slacks: np.ndarray
    kkt_residual: float = 0.0
    qp_iterations: int = 0
    sqp_iterations: int = 0
    status: SolveStatus = "max_iter"
    cost: float = 0.0
    cost_history: list[float] = field(default_factory=list)
    kkt_history: list[float] = field(default_factory=list)
    active_set: list = field(default_factory=list)
    qp_truncations: int = 0

    def __post_init__(self):
        self.states = np.array(self.states, dtype=float)
        self.controls = np.array(self.controls, dtype=float)
        self.slacks = np.array(self.slacks, dtype=float)
        if self.states.ndim != 2 or self.controls.ndim != 2 or self.slacks.ndim != 2:
            raise DimensionMismatchError("trajectories must be two-dimensional arrays")
        n_steps = self.controls.shape[0]
        if self.states.shape[0] != n_steps + 1 or self.slacks.shape[0] != n_steps + 1:
            raise DimensionMismatchError("states and slacks need one more stage than controls")
        if np.any(self.slacks < 0):
            raise ValueError("slacks must be non-negative")

    @property
    def horizon_steps(self) -> int:
        return self.controls.shape[0]


@dataclass
class OcpLinearization:
    stages: list[StageLinearization]
    initial_deviation: np.ndarray


@dataclass
class CondensedQp:
    """Condensed QP plus the maps needed to expand its solution."""

    qp: QpProblem
    offsets: list[np.ndarray]
    sensitivities: list[np.ndarray]
    n_controls: int
    n_slacks: int
    horizon_steps: int

    def expand(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """State, control and slack deviations from the QP primal."""
        n_u = self.horizon_steps * self.n_controls
        du = z[:n_u].reshape(self.horizon_steps, self.n_controls)
        de = z[n_u:].reshape(self.horizon_steps + 1, self.n_slacks)
        dx = np.array([a + gamma @ z[:n_u] for a, gamma in zip(self.offsets, self.sensitivities)])
        return dx, du, de


# =============================================================================
# Condensing
# =============================================================================


def condense(linearization: OcpLinearization) -> CondensedQp:
    """Eliminate state deviations through the linearized dynamics.

    QP variables are z = (du_0 .. du_{N-1}, deps_0 .. deps_N). At stage 0
    rows that depend only on the fixed initial state are dropped.
    """
    stages = linearization.stages
    n_steps = len(stages) - 1
    if n_steps < 1:
        raise DimensionMismatchError("linearization needs at least two stages")
    nx = stages[0].output_jacobian.shape[1]
    nu = stages[0].rate_weights.shape[0]
    ne = stages[0].slack_weights.shape[0]
    a = np.asarray(linearization.initial_deviation, dtype=float)
    if a.shape != (nx,):
        raise DimensionMismatchError(f"initial deviation must have {nx} entries")

    n_u = n_steps * nu
    n = n_u + (n_steps + 1) * ne
    hess = np.zeros((n, n))
    grad = np.zeros(n)
    rows, lowers = [], []
    var_lower = np.full(n, -np.inf)
    var_upper = np.full(n, np.inf)
    gamma = np.zeros((nx, n_u))
    offsets, sensitivities = [], []

    for k, st in enumerate(stages):
        if st.output_jacobian.shape[1] != nx or st.slack_weights.shape[0] != ne:
            raise DimensionMismatchError(f"stage {k} has inconsistent dimensions")
        if k < n_steps and (st.state_jacobian is None or st.control_jacobian is None or st.defect is None):
            raise DimensionMismatchError(f"stage {k} is missing its dynamics linearization")
        offsets.append(a.copy())
        sensitivities.append(gamma.copy())
        u_slice = slice(k * nu, (k + 1) * nu)
        e_slice = slice(n_u + k * ne, n_u + (k + 1) * ne)

        # Sensitivity columns past `cols` are still zero at stage k.
        cols = min((k + 1) * nu, n_u)
        g_k = gamma[:, :cols]
        m_out = st.output_jacobian @ g_k
        if k < n_steps and st.output_control_jacobian is not None:
            m_out[:, u_slice] += st.output_control_jacobian
        residual = st.output - st.reference + st.output_jacobian @ a
        q = st.output_weights
        hess[:cols, :cols] += m_out.T @ (q[:, None] * m_out)
        grad[:cols] += m_out.T @ (q * residual)
        if k < n_steps:
            hess[u_slice, u_slice] += np.diag(st.rate_weights)
            grad[u_slice] += st.rate_weights * st.control
        hess[e_slice, e_slice] += np.diag(st.slack_weights)
        grad[e_slice] += st.slack_weights * st.slacks

        mask = st.general_mask
        if k == 0:
            mask = mask & np.any(st.residual_slack_jacobian != 0, axis=1)
        if mask.any():
            gx = st.residual_state_jacobian[mask]
            row = np.zeros((int(mask.sum()), n))
            row[:, :cols] = gx @ g_k
            if k < n_steps:
                row[:, u_slice] += st.residual_control_jacobian[mask]
            row[:, e_slice] = st.residual_slack_jacobian[mask]
            rows.append(row)
            lowers.append(-(st.residuals[mask] + gx @ a))

        if ne:
            var_lower[e_slice] = -st.slacks
        if k < n_steps:
            if st.control_lower is not None:
                var_lower[u_slice] = st.control_lower - st.control
            if st.control_upper is not None:
                var_upper[u_slice] = st.control_upper - st.control
            a = st.state_jacobian @ a + st.defect
            gamma[:, :cols] = st.state_jacobian @ g_k
            gamma[:, u_slice] += st.control_jacobian

    matrix = np.vstack(rows) if rows else np.zeros((0, n))
    lower = np.concatenate(lowers) if lowers else np.zeros(0)
    qp = QpProblem(
        hessian=0.5 * (hess + hess.T),
        gradient=grad,
        ineq_matrix=matrix,
        ineq_lower=lower,
        ineq_upper=np.full(lower.shape[0], np.inf),
        var_lower=var_lower,
        var_upper=var_upper,
    )
    return CondensedQp(qp, offsets, sensitivities, nu, ne, n_steps)


# =============================================================================
# SQP
# =============================================================================


def linearize_problem(
    problem: OcpProblem, states: np.ndarray, controls: np.ndarray, slacks: np.ndarray
) -> OcpLinearization:
    """Linearize every stage and attach the shooting defects.

    Dynamics sensitivities and acceleration Jacobians are evaluated for the
    whole horizon in one batched call each.
    """
    n_steps = problem.horizon_steps
    model = problem.model
    try:
        x_next, a_d, b_d = model.rk4_sensitivities(states[:-1], controls, problem.step)
        a_cont, _ = model.jacobians(states, np.zeros(model.nu))
        accel = model.acceleration(states)
    except SingularityError as e:
        raise SingularityError(f"Euler singularity at stage {e.stage}: {e}", stage=e.stage) from e

    stages: list[StageLinearization] = []
    for k in range(n_steps + 1):
        terminal = k == n_steps
        lin = linearize_stage(
            states[k],
            None if terminal else controls[k],
            slacks[k],
            problem.stages[k],
            problem,
            dynamics=None if terminal else (x_next[k], a_d[k], b_d[k]),
            accel=(accel[k], a_cont[k, VEL, :]),
        )
        if not terminal:
            lin = replace(lin, defect=lin.next_state - states[k + 1])
        stages.append(lin)
    initial = problem.initial_state.to_vector() - states[0]
    return OcpLinearization(stages, initial)


def _nonlinear_kkt(lin: OcpLinearization, cqp: CondensedQp, sol: QpSolution) -> float:
    """KKT residual of the nonlinear problem at the linearization point."""
    qp = cqp.qp
    stationarity = qp.gradient - qp.ineq_matrix.T @ sol.ineq_multipliers - sol.var_multipliers
    parts = [np.max(np.abs(stationarity), initial=0.0), np.max(np.abs(lin.initial_deviation))]
    for st in lin.stages:
        if st.defect is not None:
            parts.append(np.max(np.abs(st.defect), initial=0.0))
    # Primal infeasibility and complementarity evaluated at the zero step.
    lower = np.concatenate([qp.ineq_lower, qp.var_lower])
    upper = np.concatenate([qp.ineq_upper, qp.var_upper])
    mult = np.concatenate([sol.ineq_multipliers, sol.var_multipliers])
    parts.append(np.max(np.maximum(lower, 0.0), initial=0.0))
    parts.append(np.max(np.maximum(-upper, 0.0), initial=0.0))
    lo_gap = np.abs(np.where(np.isfinite(lower), lower, 0.0))
    hi_gap = np.abs(np.where(np.isfinite(upper), upper, 0.0))
    parts.append(np.max(np.maximum(mult, 0.0) * lo_gap, initial=0.0))
    parts.append(np.max(np.maximum(-mult, 0.0) * hi_gap, initial=0.0))
    return float(max(parts))


def shift_warm_start(
    prev: OcpSolution, new_initial: ExtendedState, fraction: float = 1.0
) -> OcpSolution:
    """Shift trajectories forward by `fraction` of a stage and reset stage 0.

    With fraction = 1 stage k takes the values of stage k + 1 and the
    terminal stage is duplicated. Fractional shifts interpolate linearly
    between neighbouring stages.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")

    def shifted(arr: np.ndarray) -> np.ndarray:
        nxt = np.vstack([arr[1:], arr[-1:]])
        return (1.0 - fraction) * arr + fraction * nxt

    states = shifted(prev.states)
    states[0] = new_initial.to_vector()
    return OcpSolution(
        states=states,
        controls=shifted(prev.controls),
        slacks=np.maximum(shifted(prev.slacks), 0.0),
        kkt_residual=prev.kkt_residual,
        status=prev.status,
        active_set=list(prev.active_set),
    )


def initial_guess(problem: OcpProblem) -> OcpSolution:
    """Constant trajectory at the initial state with zero controls and slacks."""
    n_steps = problem.horizon_steps
    x0 = problem.initial_state.to_vector()
    return OcpSolution(
        states=np.tile(x0, (n_steps + 1, 1)),
        controls=np.zeros((n_steps, problem.gtmr.n_rotors)),
        slacks=np.zeros((n_steps + 1, problem.n_obstacles)),
    )


class SqpSolver:
    """Stateful SQP driver; one instance per control loop, not thread-safe."""

    def __init__(self, config: SolverConfig | None = None):
        self.config = config or SolverConfig()
        self.last_qp: QpProblem | None = None

    def _merit(self, problem: OcpProblem, states, controls, slacks) -> float:
        model = problem.model
        defects = float(np.sum(np.abs(model.rk4(states[:-1], controls, problem.step) - states[1:])))
        violation = path_violation(problem, states, controls, slacks) + defects
        return trajectory_cost(problem, states, controls, slacks) + self.config.merit_penalty * violation

    def _solve_subproblem(self, qp: QpProblem, active: list, qp_iters: int) -> tuple[QpSolution, bool]:
        """QP step and whether it was cut at the iteration budget.

        A truncated active-set solve still returns a feasible point with a
        lower QP objective than its start, so the step is usable.
        """
        try:
            return solve_qp(qp, self.config, warm_active_set=active, max_iters=qp_iters), False
        except QpIterationLimitError as e:
            if e.partial is None:
                raise
            logger.warning("QP truncated after %d iterations (kkt=%.3e)", qp_iters, e.partial.kkt_residual)
            return e.partial, True

    def _iterate(
        self,
        problem: OcpProblem,
        warm: OcpSolution,
        max_iters: int,
        line_search: bool,
        qp_iters: int,
    ) -> OcpSolution:
        if warm.states.shape != (problem.horizon_steps + 1, problem.model.nx):
            raise DimensionMismatchError(
                f"warm states have shape {warm.states.shape}, expected "
                f"{(problem.horizon_steps + 1, problem.model.nx)}"
            )
        if warm.slacks.shape[1] != problem.n_obstacles:
            raise DimensionMismatchError("warm slacks do not match the obstacle count")

        states = warm.states.copy()
        controls = warm.controls.copy()
        slacks = warm.slacks.copy()
        active = list(warm.active_set)
        x_init = problem.initial_state.to_vector()
        status: SolveStatus = "max_iter"
        kkt = np.inf
        qp_total = 0
        truncations = 0
        costs: list[float] = []
        kkts: list[float] = []
        it = 0

        for it in range(1, max_iters + 1):
            lin = linearize_problem(problem, states, controls, slacks)
            costs.append(sum(st.cost for st in lin.stages))
            cqp = condense(lin)
            self.last_qp = cqp.qp
            try:
                sol, truncated = self._solve_subproblem(cqp.qp, active, qp_iters)
            except QpInfeasibleError as e:
                logger.warning("SQP iteration %d: linearized constraints are infeasible (%s)", it, e)
                status = "infeasible_qp"
                break
            truncations += truncated
            qp_total += sol.iterations
            active = sol.active_set
            kkt = _nonlinear_kkt(lin, cqp, sol)
            kkts.append(kkt)
            dx, du, de = cqp.expand(sol.primal)

            alpha = 1.0
            if line_search:
                current = self._merit(problem, states, controls, slacks)
                while alpha > MIN_STEP:
                    trial_states = states + alpha * dx
                    trial_states[0] = x_init
                    trial = self._merit(
                        problem,
                        trial_states,
                        controls + alpha * du,
                        np.maximum(slacks + alpha * de, 0.0),
                    )
                    if trial <= current:
                        break
                    alpha *= 0.5

            states = states + alpha * dx
            states[0] = x_init
            controls = controls + alpha * du
            slacks = np.maximum(slacks + alpha * de, 0.0)
            logger.debug("SQP iteration %d: kkt=%.3e cost=%.6g step=%.3g", it, kkt, costs[-1], alpha)
            if kkt < self.config.kkt_tol and not truncated:
                status = "converged"
                break

        return OcpSolution(
            states=states,
            controls=controls,
            slacks=slacks,
            kkt_residual=float(kkt),
            qp_iterations=qp_total,
            sqp_iterations=it,
            status=status,
            cost=trajectory_cost(problem, states, controls, slacks),
            cost_history=costs,
            kkt_history=kkts,
            active_set=active,
            qp_truncations=truncations,
        )

    def rti_step(self, problem: OcpProblem, warm: OcpSolution) -> OcpSolution:
        """Full-step Gauss-Newton iterations (max_sqp_iters of them)."""
        return self._iterate(
            problem,
            warm,
            self.config.max_sqp_iters,
            line_search=False,
            qp_iters=self.config.max_qp_iters,
        )

    def solve(
        self,
        problem: OcpProblem,
        warm: OcpSolution | None = None,
        max_iters: int | None = None,
    ) -> OcpSolution:
        """Cold-start solve with a halving line search on the l1 merit function."""
        warm = warm or initial_guess(problem)
        n_vars = problem.horizon_steps * problem.gtmr.n_rotors + (
            problem.horizon_steps + 1
        ) * problem.n_obstacles
        solution = self._iterate(
            problem,
            warm,
            max_iters or self.config.cold_start_iters,
            line_search=True,
            qp_iters=max(self.config.max_qp_iters, 5 * n_vars),
        )
        logger.info(
            "Cold-start solve: status=%s after %d iterations, kkt=%.3e",
            solution.status,
            solution.sqp_iterations,
            solution.kkt_residual,
        )
        return solution


def rti_step(
    problem: OcpProblem, warm: OcpSolution, config: SolverConfig | None = None
) -> OcpSolution:
    return SqpSolver(config).rti_step(problem, warm)
