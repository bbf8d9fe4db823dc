"""Dense primal active-set solver for convex quadratic programs.

Problem form:
    minimize    0.5 z'Hz + g'z
    subject to  ineq_lower <= A z <= ineq_upper
                var_lower  <= z   <= var_upper
Infinite bounds are allowed.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import linprog

from linkmpc.models import SolverConfig

logger = logging.getLogger(__name__)

QP_DUMP_HEADER = "# linkmpc-qp v1"
_DUMP_BLOCKS = (
    "hessian",
    "gradient",
    "ineq_matrix",
    "ineq_lower",
    "ineq_upper",
    "var_lower",
    "var_upper",
)


class QpError(RuntimeError):
    """Base class for QP solver failures."""


class QpInfeasibleError(QpError):
    """Raised when the linearized constraints admit no feasible point."""


class QpFactorizationError(QpError):
    """Raised when the damped Hessian has no Cholesky factor."""


class QpIterationLimitError(QpError):
    """Raised when the active-set loop exceeds its iteration budget.

    partial holds the last iterate; it satisfies every constraint because the
    primal method never leaves the feasible set.
    """

    def __init__(self, message: str, partial: "QpSolution | None" = None):
        super().__init__(message)
        self.partial = partial


@dataclass(eq=False)
class QpProblem:
    """Dense QP data."""

    hessian: np.ndarray
    gradient: np.ndarray
    ineq_matrix: np.ndarray
    ineq_lower: np.ndarray
    ineq_upper: np.ndarray
    var_lower: np.ndarray
    var_upper: np.ndarray

    def __post_init__(self):
        self.hessian = np.asarray(self.hessian, dtype=float)
        self.gradient = np.asarray(self.gradient, dtype=float).reshape(-1)
        n = self.gradient.shape[0]
        self.ineq_matrix = np.asarray(self.ineq_matrix, dtype=float).reshape(-1, n)
        m = self.ineq_matrix.shape[0]
        self.ineq_lower = np.asarray(self.ineq_lower, dtype=float).reshape(m)
        self.ineq_upper = np.asarray(self.ineq_upper, dtype=float).reshape(m)
        self.var_lower = np.asarray(self.var_lower, dtype=float).reshape(n)
        self.var_upper = np.asarray(self.var_upper, dtype=float).reshape(n)
        if self.hessian.shape != (n, n):
            raise ValueError(f"hessian must be {n}x{n}, got {self.hessian.shape}")
        scale = max(1.0, float(np.max(np.abs(self.hessian), initial=0.0)))
        if np.max(np.abs(self.hessian - self.hessian.T), initial=0.0) > 1e-10 * scale:
            raise ValueError("hessian is not symmetric")
        if np.any(self.ineq_lower > self.ineq_upper) or np.any(self.var_lower > self.var_upper):
            raise ValueError("inconsistent bounds: lower exceeds upper")

    @property
    def n_vars(self) -> int:
        return self.gradient.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.ineq_matrix.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.hessian @ z + self.gradient @ z)

    def max_violation(self, z: np.ndarray) -> float:
        az = self.ineq_matrix @ z
        parts = [
            self.ineq_lower - az,
            az - self.ineq_upper,
            self.var_lower - z,
            z - self.var_upper,
        ]
        return float(max(0.0, *(np.max(p, initial=0.0) for p in parts)))


@dataclass
class QpSolution:
    """Primal-dual result.

    Multipliers are signed: positive when the lower bound is active,
    negative when the upper bound is active, so that
    H z + g = A' ineq_multipliers + var_multipliers.
    """

    primal: np.ndarray
    ineq_multipliers: np.ndarray
    var_multipliers: np.ndarray
    active_set: list[tuple[str, int, int]] = field(default_factory=list)
    iterations: int = 0
    kkt_residual: float = 0.0
    hot_started: bool = False


# One-sided rows c'z >= d: key = (kind, index, sign) with kind "row" or "var".
@dataclass
class _OneSided:
    matrix: np.ndarray
    rhs: np.ndarray
    keys: list[tuple[str, int, int]]


def _one_sided(qp: QpProblem) -> _OneSided:
    n = qp.n_vars
    eye = np.eye(n)
    lo_rows = np.flatnonzero(np.isfinite(qp.ineq_lower))
    hi_rows = np.flatnonzero(np.isfinite(qp.ineq_upper))
    lo_vars = np.flatnonzero(np.isfinite(qp.var_lower))
    hi_vars = np.flatnonzero(np.isfinite(qp.var_upper))
    matrix = np.vstack(
        [qp.ineq_matrix[lo_rows], -qp.ineq_matrix[hi_rows], eye[lo_vars], -eye[hi_vars]]
    ).reshape(-1, n)
    rhs = np.concatenate(
        [qp.ineq_lower[lo_rows], -qp.ineq_upper[hi_rows], qp.var_lower[lo_vars], -qp.var_upper[hi_vars]]
    )
    keys = (
        [("row", int(i), 1) for i in lo_rows]
        + [("row", int(i), -1) for i in hi_rows]
        + [("var", int(j), 1) for j in lo_vars]
        + [("var", int(j), -1) for j in hi_vars]
    )
    return _OneSided(matrix, rhs, keys)


def _feasible_start(
    qp: QpProblem,
    cons: _OneSided,
    hess_factor,
    initial_guess: np.ndarray | None,
    tol: float,
) -> np.ndarray:
    candidates = [-cho_solve(hess_factor, qp.gradient)]
    if initial_guess is not None:
        candidates.append(np.clip(initial_guess, qp.var_lower, qp.var_upper))
    candidates.append(np.clip(np.zeros(qp.n_vars), qp.var_lower, qp.var_upper))
    for z in candidates:
        if cons.matrix.shape[0] == 0 or np.min(cons.matrix @ z - cons.rhs) >= -tol:
            return z

    logger.debug("Computing phase-1 point for QP with %d one-sided rows", cons.matrix.shape[0])
    general = np.array([k[0] == "row" for k in cons.keys], dtype=bool)
    bounds = [
        (lo if np.isfinite(lo) else None, hi if np.isfinite(hi) else None)
        for lo, hi in zip(qp.var_lower, qp.var_upper)
    ]
    result = linprog(
        c=np.zeros(qp.n_vars),
        A_ub=-cons.matrix[general] if general.any() else None,
        b_ub=-cons.rhs[general] if general.any() else None,
        bounds=bounds,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10},
    )
    if result.status == 2:
        raise QpInfeasibleError("linearized constraints admit no feasible point")
    if not result.success:
        raise QpInfeasibleError(f"phase-1 linear program failed: {result.message}")
    z = np.clip(result.x, qp.var_lower, qp.var_upper)

    # Project onto violated rows so the active-set loop starts exactly feasible.
    slack = cons.matrix @ z - cons.rhs
    violated = slack < 0
    if violated.any():
        c_v = cons.matrix[violated]
        correction, *_ = np.linalg.lstsq(c_v @ c_v.T, -slack[violated], rcond=None)
        z = z + c_v.T @ correction
    return z


def _hot_start(
    qp: QpProblem,
    cons: _OneSided,
    hess_factor,
    warm_active_set: list[tuple[str, int, int]],
    tol: float,
) -> tuple[np.ndarray, list[int]] | None:
    """Minimizer on the warm working set, if it is feasible for every row.

    Returns None when the warm rows are dependent or their equality-constrained
    minimizer violates a constraint outside the set.
    """
    key_index = {k: i for i, k in enumerate(cons.keys)}
    working: list[int] = []
    for key in warm_active_set:
        idx = key_index.get(tuple(key))
        if idx is not None and idx not in working:
            working.append(idx)
    if not working:
        return None
    c_work = cons.matrix[working]
    hinv_ct = cho_solve(hess_factor, c_work.T)
    schur = c_work @ hinv_ct
    try:
        chol = np.linalg.cholesky(schur)
    except np.linalg.LinAlgError:
        return None
    pivots = np.diag(chol)
    if pivots.min() <= 1e-8 * pivots.max():
        return None
    h_grad = cho_solve(hess_factor, qp.gradient)
    lam = cho_solve((chol, True), cons.rhs[working] + c_work @ h_grad)
    z = hinv_ct @ lam - h_grad
    if np.min(cons.matrix @ z - cons.rhs) < -tol:
        return None
    return z, working


class _WorkingSet:
    """Working rows with H^-1 C' and the Schur complement C H^-1 C' kept in step."""

    def __init__(self, cons: _OneSided, hess_factor, n: int):
        self.cons = cons
        self.factor = hess_factor
        self.rows: list[int] = []
        self.hinv_ct = np.zeros((n, 0))
        self.schur = np.zeros((0, 0))

    def add(self, idx: int) -> None:
        h_col = cho_solve(self.factor, self.cons.matrix[idx])
        cross = self.cons.matrix[self.rows] @ h_col
        diag = float(self.cons.matrix[idx] @ h_col)
        self.schur = np.block([[self.schur, cross[:, None]], [cross[None, :], np.array([[diag]])]])
        self.hinv_ct = np.column_stack([self.hinv_ct, h_col])
        self.rows.append(idx)

    def drop(self, pos: int) -> None:
        self.schur = np.delete(np.delete(self.schur, pos, axis=0), pos, axis=1)
        self.hinv_ct = np.delete(self.hinv_ct, pos, axis=1)
        self.rows.pop(pos)

    def eqp_step(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Minimize 0.5 p'Hp + grad'p subject to C_work p = 0."""
        h_grad = cho_solve(self.factor, grad)
        if not self.rows:
            return -h_grad, np.zeros(0)
        rhs = self.cons.matrix[self.rows] @ h_grad
        try:
            lam = np.linalg.solve(self.schur, rhs)
        except np.linalg.LinAlgError:
            lam, *_ = np.linalg.lstsq(self.schur, rhs, rcond=None)
        return self.hinv_ct @ lam - h_grad, lam


def _signed_multipliers(qp: QpProblem, cons: _OneSided, rows: list[int], lam: np.ndarray):
    ineq_mult = np.zeros(qp.n_ineq)
    var_mult = np.zeros(qp.n_vars)
    for idx, value in zip(rows, lam):
        kind, i, sign = cons.keys[idx]
        if kind == "row":
            ineq_mult[i] += sign * value
        else:
            var_mult[i] += sign * value
    return ineq_mult, var_mult


def solve_qp(
    qp: QpProblem,
    config: SolverConfig | None = None,
    warm_active_set: list[tuple[str, int, int]] | None = None,
    initial_guess: np.ndarray | None = None,
    max_iters: int | None = None,
) -> QpSolution:
    """Solve a convex QP with a primal active-set method.

    The damped Hessian is factored once per call. warm_active_set holds
    constraint keys from a previous solve: when the minimizer on those rows
    is feasible the loop starts there, otherwise warm keys that are active at
    the cold starting point seed the working set.
    """
    config = config or SolverConfig()
    tol = config.active_set_tol
    n = qp.n_vars
    max_iters = max_iters or config.max_qp_iters

    hess = qp.hessian + config.levenberg_damping * np.eye(n)
    try:
        factor = cho_factor(hess, lower=True, check_finite=False)
    except LinAlgError as e:
        raise QpFactorizationError("QP hessian is not positive definite") from e

    cons = _one_sided(qp)
    n_cons = cons.matrix.shape[0]
    work = _WorkingSet(cons, factor, n)

    hot = _hot_start(qp, cons, factor, warm_active_set, tol) if warm_active_set else None
    if hot is not None:
        z, rows = hot
        for idx in rows:
            work.add(idx)
    else:
        z = _feasible_start(qp, cons, factor, initial_guess, tol)
        if warm_active_set:
            key_index = {k: i for i, k in enumerate(cons.keys)}
            slack = cons.matrix @ z - cons.rhs
            for key in warm_active_set:
                idx = key_index.get(tuple(key))
                if idx is None or abs(slack[idx]) > 1e-8 or idx in work.rows:
                    continue
                trial = cons.matrix[work.rows + [idx]]
                if np.linalg.matrix_rank(trial) == len(work.rows) + 1:
                    work.add(idx)

    bland = False
    stalled_changes = 0
    objective = float(0.5 * z @ hess @ z + qp.gradient @ z)
    lam = np.zeros(len(work.rows))
    at_subspace_minimum = False
    for iterations in range(1, max_iters + 1):
        grad = hess @ z + qp.gradient
        step, lam = work.eqp_step(grad)

        step_norm = np.max(np.abs(step), initial=0.0)
        if at_subspace_minimum or step_norm <= 1e-9 * (1.0 + np.max(np.abs(z), initial=0.0)):
            at_subspace_minimum = False
            if not work.rows or np.min(lam) >= -tol:
                break
            negative = np.flatnonzero(lam < -tol)
            if bland:
                drop = min(negative, key=lambda pos: work.rows[pos])
            else:
                drop = negative[np.argmin(lam[negative])]
            work.drop(int(drop))
            lam = np.delete(lam, int(drop))
            stalled_changes += 1
        else:
            c_step = cons.matrix @ step
            slack = cons.matrix @ z - cons.rhs
            blocking = np.ones(n_cons, dtype=bool)
            blocking[work.rows] = False
            blocking &= c_step < -1e-14
            alpha, hit = 1.0, None
            if blocking.any():
                candidates = np.flatnonzero(blocking)
                ratios = np.maximum(slack[candidates], 0.0) / -c_step[candidates]
                best = float(np.min(ratios))
                if best < 1.0:
                    alpha = best
                    ties = candidates[ratios <= best + 1e-15]
                    hit = int(ties[0]) if bland else int(candidates[np.argmin(ratios)])
            z = z + alpha * step
            if hit is not None:
                work.add(hit)
                lam = np.append(lam, 0.0)
                stalled_changes += 1
            else:
                at_subspace_minimum = True
            new_objective = float(0.5 * z @ hess @ z + qp.gradient @ z)
            if new_objective < objective - 1e-14 * (1.0 + abs(objective)):
                stalled_changes = 0
            objective = new_objective

        if not bland and stalled_changes > 3 * max(n_cons, 1):
            logger.debug("Switching to Bland's rule after %d stalled changes", stalled_changes)
            bland = True
    else:
        ineq_mult, var_mult = _signed_multipliers(qp, cons, work.rows, lam)
        partial = QpSolution(
            primal=z,
            ineq_multipliers=ineq_mult,
            var_multipliers=var_mult,
            active_set=[cons.keys[i] for i in work.rows],
            iterations=max_iters,
            hot_started=hot is not None,
        )
        partial.kkt_residual = qp_kkt_residual(qp, partial)
        raise QpIterationLimitError(f"active-set loop exceeded {max_iters} iterations", partial)

    ineq_mult, var_mult = _signed_multipliers(qp, cons, work.rows, lam)
    solution = QpSolution(
        primal=z,
        ineq_multipliers=ineq_mult,
        var_multipliers=var_mult,
        active_set=[cons.keys[i] for i in work.rows],
        iterations=iterations,
        hot_started=hot is not None,
    )
    solution.kkt_residual = qp_kkt_residual(qp, solution)
    if config.debug_checks and solution.kkt_residual > config.kkt_tol:
        logger.warning(
            "QP KKT residual %.3e exceeds tolerance %.1e after %d iterations",
            solution.kkt_residual,
            config.kkt_tol,
            iterations,
        )
    return solution


def qp_kkt_residual(qp: QpProblem, sol: QpSolution) -> float:
    """Max of stationarity, primal violation, dual sign and complementarity errors."""
    z = sol.primal
    mu, nu = sol.ineq_multipliers, sol.var_multipliers
    stationarity = qp.hessian @ z + qp.gradient - qp.ineq_matrix.T @ mu - nu
    az = qp.ineq_matrix @ z

    def comp(mult, value, lower, upper):
        lo_gap = np.where(np.isfinite(lower), value - lower, 0.0)
        hi_gap = np.where(np.isfinite(upper), upper - value, 0.0)
        return np.maximum(np.abs(np.maximum(mult, 0.0) * lo_gap), np.abs(np.minimum(mult, 0.0) * hi_gap))

    def sign_error(mult, lower, upper):
        bad_lo = np.where(np.isfinite(lower), 0.0, np.maximum(mult, 0.0))
        bad_hi = np.where(np.isfinite(upper), 0.0, np.maximum(-mult, 0.0))
        return np.maximum(bad_lo, bad_hi)

    parts = [
        np.max(np.abs(stationarity), initial=0.0),
        qp.max_violation(z),
        np.max(comp(mu, az, qp.ineq_lower, qp.ineq_upper), initial=0.0),
        np.max(comp(nu, z, qp.var_lower, qp.var_upper), initial=0.0),
        np.max(sign_error(mu, qp.ineq_lower, qp.ineq_upper), initial=0.0),
        np.max(sign_error(nu, qp.var_lower, qp.var_upper), initial=0.0),
    ]
    return float(max(parts))


# =============================================================================
# Diagnostic dump
# =============================================================================


def _write_block(handle, name: str, values: np.ndarray):
    handle.write(f"{name}\n")
    np.savetxt(handle, np.atleast_2d(values), fmt="%.17g")


def dump_qp(qp: QpProblem, path: Path) -> None:
    """Write a QP to a plain-text file (row-major, header with dimensions)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"{QP_DUMP_HEADER}\n")
        f.write(f"n {qp.n_vars} m {qp.n_ineq}\n")
        _write_block(f, "hessian", qp.hessian)
        _write_block(f, "gradient", qp.gradient)
        if qp.n_ineq:
            _write_block(f, "ineq_matrix", qp.ineq_matrix)
            _write_block(f, "ineq_lower", qp.ineq_lower)
            _write_block(f, "ineq_upper", qp.ineq_upper)
        _write_block(f, "var_lower", qp.var_lower)
        _write_block(f, "var_upper", qp.var_upper)
    logger.info("Dumped QP (n=%d, m=%d) to %s", qp.n_vars, qp.n_ineq, path)


def load_qp(path: Path) -> QpProblem:
    """Read a QP written by dump_qp."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != QP_DUMP_HEADER:
        raise ValueError(f"{path} is not a QP dump")
    _, n, _, m = lines[1].split()
    n, m = int(n), int(m)
    blocks: dict[str, list[list[float]]] = {}
    current = None
    for line in lines[2:]:
        token = line.strip()
        if not token:
            continue
        if token in _DUMP_BLOCKS:
            current = token
            blocks[current] = []
        else:
            blocks[current].append([float(v) for v in token.split()])

    def vec(name: str, size: int) -> np.ndarray:
        if name not in blocks:
            return np.zeros(size)
        return np.array(blocks[name], dtype=float).reshape(size)

    matrix = (
        np.array(blocks["ineq_matrix"], dtype=float).reshape(m, n) if m else np.zeros((0, n))
    )
    return QpProblem(
        hessian=np.array(blocks["hessian"], dtype=float).reshape(n, n),
        gradient=vec("gradient", n),
        ineq_matrix=matrix,
        ineq_lower=vec("ineq_lower", m),
        ineq_upper=vec("ineq_upper", m),
        var_lower=vec("var_lower", n),
        var_upper=vec("var_upper", n),
    )