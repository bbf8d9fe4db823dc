"""Tests for OCP outputs, costs, constraint residuals and linearization."""

import numpy as np
import pytest

from linkmpc.dynamics import ControlRate, ExtendedState, GtmrModel, RigidBodyState
from linkmpc.models import OcpWeights
from linkmpc.ocp import (
    OUTPUT_SIZE,
    Y_RANGE,
    NegativeSlackError,
    OcpProblem,
    OutputVector,
    StageData,
    constraint_residuals,
    evaluate_output,
    linearize_stage,
    output_jacobian,
    output_map,
    stage_cost,
    stage_violations,
)
from linkmpc.optical_link import (
    beam_axis_world,
    link_vector,
    misalignment_cosine,
    misalignment_rate,
    transmitter_position,
)
from linkmpc.scenario import initial_state
from linkmpc.simulator import build_problem
from tests.conftest import central_difference, make_hover_problem, random_state


def _random_stage(rng, x: np.ndarray, n_obstacles: int = 3) -> StageData:
    rx = x[0:3] + np.array([0.1, -0.2, -1.0]) + rng.uniform(-0.2, 0.2, 3)
    return StageData(
        reference_output=OutputVector.from_vector(rng.normal(size=OUTPUT_SIZE)),
        obstacle_centers=x[0:3] + rng.uniform(0.5, 1.5, (n_obstacles, 3)),
        obstacle_radii=np.full(n_obstacles, 0.25),
        rx_pos=rx,
        rx_vel=rng.uniform(-1.0, 1.0, 3),
    )


class TestProblemData:
    """Tests for stage and problem validation."""

    def test_non_positive_radius_rejected(self):
        """Should refuse obstacles with radius <= 0."""
        with pytest.raises(ValueError, match="radii"):
            StageData(
                OutputVector.from_vector(np.zeros(OUTPUT_SIZE)),
                np.zeros((1, 3)),
                np.array([0.0]),
                np.zeros(3),
                np.zeros(3),
            )

    def test_stage_count_must_match_horizon(self, hover_problem):
        """Should require N + 1 stages."""
        with pytest.raises(ValueError, match="stages"):
            OcpProblem(
                horizon_steps=3,
                step=0.015,
                initial_state=hover_problem.initial_state,
                stages=hover_problem.stages[:3],
                weights=hover_problem.weights,
                gtmr=hover_problem.gtmr,
                optics=hover_problem.optics,
            )

    def test_output_vector_rejects_wrong_size(self):
        """Should require twelve output components."""
        with pytest.raises(ValueError):
            OutputVector.from_vector(np.zeros(11))


class TestOutputMap:
    """Tests for the output vector y = h(x)."""

    def test_hover_aligned_output(self, gtmr, optics, hover_problem):
        """Should give (p, 0, 0, 1, 0, 1.0) at an aligned hover."""
        y = output_map(hover_problem.initial_state, hover_problem.stages[0], gtmr, optics)
        np.testing.assert_allclose(y.position, [0.0, 0.0, 1.0])
        np.testing.assert_allclose(y.velocity, 0.0)
        np.testing.assert_allclose(y.acceleration, 0.0, atol=1e-10)
        assert y.cos_delta == pytest.approx(1.0)
        assert y.cos_delta_rate == pytest.approx(0.0, abs=1e-12)
        assert y.range == pytest.approx(1.0)

    def test_rotors_off_acceleration_block(self, gtmr, optics, hover_problem):
        """Should report free-fall acceleration with stopped rotors."""
        body = RigidBodyState((0.0, 0.0, 1.0), np.zeros(3), np.zeros(3), np.zeros(3))
        y = output_map(ExtendedState(body, np.zeros(6)), hover_problem.stages[0], gtmr, optics)
        np.testing.assert_allclose(y.acceleration, [0.0, 0.0, -gtmr.gravity])

    def test_blocks_match_link_functions(self, gtmr, optics, model, rng):
        """Should compose the link module outputs exactly."""
        for _ in range(10):
            x = random_state(rng)
            stage = _random_stage(rng, x)
            y = evaluate_output(x, stage, model, optics)
            d_c = link_vector(transmitter_position(x, optics), stage.rx_pos)
            assert y[9] == pytest.approx(misalignment_cosine(beam_axis_world(x, optics), d_c), abs=1e-12)
            assert y[10] == pytest.approx(misalignment_rate(x, stage.rx_pos, stage.rx_vel, optics), abs=1e-10)
            assert y[Y_RANGE] == pytest.approx(np.linalg.norm(d_c))
            np.testing.assert_array_equal(y[6:9], model.acceleration(x))

    def test_output_jacobian_matches_finite_differences(self, optics, model, rng):
        """Should match central differences of the output map."""
        for _ in range(200):
            x = random_state(rng)
            stage = _random_stage(rng, x)
            _, jac = output_jacobian(x, stage, model, optics)
            fd = central_difference(lambda z: evaluate_output(z, stage, model, optics), x)
            np.testing.assert_allclose(jac, fd, rtol=1e-4, atol=1e-6)


class TestStageCost:
    """Tests for the tracking cost."""

    def test_zero_at_reference(self, hover_problem):
        """Should vanish when y = y_d with zero input and slack."""
        stage = hover_problem.stages[0]
        cost = stage_cost(stage.reference_output, stage, ControlRate(np.zeros(6)), np.zeros(3), OcpWeights())
        assert cost == 0.0

    def test_range_error_weighted(self, hover_problem):
        """Should charge 2 * 0.5**2 for a 0.5 m range error."""
        stage = hover_problem.stages[0]
        ref = stage.reference_output
        y = OutputVector(ref.position, ref.velocity, ref.acceleration, ref.cos_delta, ref.cos_delta_rate, ref.range + 0.5)
        assert stage_cost(y, stage, ControlRate(np.zeros(6)), np.zeros(3), OcpWeights()) == pytest.approx(0.5)

    def test_slack_penalty(self, hover_problem):
        """Should charge 1e4 * 0.1**2 = 100 for one slack of 0.1."""
        stage = hover_problem.stages[0]
        cost = stage_cost(stage.reference_output, stage, None, np.array([0.1, 0.0, 0.0]), OcpWeights())
        assert cost == pytest.approx(100.0)

    def test_rate_penalty_uses_scaled_accelerations(self, hover_problem):
        """Should penalize u / rate_scale with the rate weight."""
        stage = hover_problem.stages[0]
        u = ControlRate(np.full(6, 400.0))
        cost = stage_cost(stage.reference_output, stage, u, np.zeros(3), OcpWeights())
        assert cost == pytest.approx(6 * 10.0)

    def test_rate_weight_defaults_to_ten(self, hover_problem):
        """Should weight each rotor acceleration by 10, read in units of rate_scale."""
        weights = OcpWeights()
        assert weights.rate == 10.0
        raw = OcpWeights(rate_scale=1.0)
        np.testing.assert_array_equal(raw.rate_diagonal(6), np.full(6, 10.0))
        stage = hover_problem.stages[0]
        cost = stage_cost(stage.reference_output, stage, ControlRate(np.ones(6)), np.zeros(3), raw)
        assert cost == pytest.approx(6 * 10.0)

    def test_negative_slack_rejected(self, hover_problem):
        """Should refuse negative slacks."""
        stage = hover_problem.stages[0]
        with pytest.raises(NegativeSlackError):
            stage_cost(stage.reference_output, stage, None, np.array([-1e-3, 0.0, 0.0]), OcpWeights())


class TestConstraintResiduals:
    """Tests for the g >= 0 path constraints."""

    def test_initial_condition_range_feasible(self, default_scenario, gtmr, optics):
        """Should keep both range rows positive at the default initial condition."""
        x0 = initial_state(default_scenario)
        problem = build_problem(default_scenario, x0.to_vector(), 0.0)
        res = constraint_residuals(x0, ControlRate(np.zeros(6)), np.zeros(3), problem.stages[0], problem)
        assert np.all(res.of_kind("range") > 0)

    def test_speed_at_upper_bound_is_active(self, hover_problem):
        """Should give a zero upper speed residual at exactly 100 Hz."""
        x = hover_problem.initial_state.to_vector()
        x[12] = 100.0
        state = ExtendedState.from_vector(x, 6)
        res = constraint_residuals(state, ControlRate(np.zeros(6)), np.zeros(3), hover_problem.stages[0], hover_problem)
        upper = res.of_kind("speed")[6:]
        assert upper[0] == 0.0
        assert np.all(upper[1:] > 0)

    def test_obstacle_on_threshold_is_active(self, gtmr, optics):
        """Should give a zero obstacle residual at d_O + d_safe = 0.5 m."""
        problem = make_hover_problem(gtmr, optics, n_obstacles=1, obstacle_center=np.array([0.5, 0.0, 1.0]))
        res = constraint_residuals(problem.initial_state, ControlRate(np.zeros(6)), np.zeros(1), problem.stages[0], problem)
        assert res.of_kind("obstacle")[0] == pytest.approx(0.0, abs=1e-15)

    def test_row_order_and_kinds(self, hover_problem):
        """Should list speed, accel, range, cone, obstacle and slack rows in order."""
        res = constraint_residuals(
            hover_problem.initial_state, ControlRate(np.zeros(6)), np.zeros(3), hover_problem.stages[0], hover_problem
        )
        expected = ["speed"] * 12 + ["accel"] * 12 + ["range"] * 2 + ["cone"] + ["obstacle"] * 3 + ["slack"] * 3
        assert res.kinds == expected

    def test_interior_point_has_positive_residuals(self, hover_problem):
        """Should be strictly positive inside every bound."""
        res = constraint_residuals(
            hover_problem.initial_state,
            ControlRate(np.full(6, 10.0)),
            np.full(3, 0.01),
            hover_problem.stages[0],
            hover_problem,
        )
        assert np.all(res.values > 0)


class TestLinearization:
    """Tests for stage linearization."""

    def _problem_for(self, rng, x):
        base = make_hover_problem()
        stages = [_random_stage(rng, x) for _ in range(base.horizon_steps + 1)]
        return OcpProblem(
            horizon_steps=base.horizon_steps,
            step=base.step,
            initial_state=ExtendedState.from_vector(x, 6),
            stages=stages,
            weights=base.weights,
            gtmr=base.gtmr,
            optics=base.optics,
        )

    def test_residual_jacobians_match_finite_differences(self, rng):
        """Should match central differences in x, u and eps."""
        for _ in range(200):
            x = random_state(rng)
            u = rng.uniform(-200.0, 400.0, 6)
            eps = rng.uniform(0.0, 0.1, 3)
            problem = self._problem_for(rng, x)
            stage = problem.stages[0]
            lin = linearize_stage(x, u, eps, stage, problem)

            def g(xv, uv, ev):
                return constraint_residuals(
                    ExtendedState.from_vector(xv, 6), ControlRate(uv), ev, stage, problem
                ).values

            np.testing.assert_allclose(
                lin.residual_state_jacobian, central_difference(lambda z: g(z, u, eps), x), rtol=1e-4, atol=1e-6
            )
            np.testing.assert_allclose(
                lin.residual_control_jacobian, central_difference(lambda w: g(x, w, eps), u), rtol=1e-4, atol=1e-6
            )
            np.testing.assert_allclose(
                lin.residual_slack_jacobian, central_difference(lambda e: g(x, u, e), eps), rtol=1e-4, atol=1e-6
            )

    def test_taylor_error_decays_quadratically(self, rng):
        """Should shrink the first-order prediction error about 4x per halving."""
        x = random_state(rng)
        u = rng.uniform(-200.0, 400.0, 6)
        eps = np.full(3, 0.05)
        problem = self._problem_for(rng, x)
        stage = problem.stages[0]
        lin = linearize_stage(x, u, eps, stage, problem)
        dx = rng.normal(size=x.shape[0]) * 1e-3
        errors = []
        for scale in (1.0, 0.5, 0.25):
            d = scale * dx
            actual = constraint_residuals(
                ExtendedState.from_vector(x + d, 6), ControlRate(u), eps, stage, problem
            ).values
            predicted = lin.residuals + lin.residual_state_jacobian @ d
            errors.append(np.linalg.norm(actual - predicted))
        assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.15)
        assert errors[1] / errors[2] == pytest.approx(4.0, rel=0.15)

    def test_gauss_newton_hessian_is_psd(self, rng):
        """Should produce a symmetric positive semidefinite Hessian."""
        x = random_state(rng)
        problem = self._problem_for(rng, x)
        lin = linearize_stage(x, np.zeros(6), np.zeros(3), problem.stages[0], problem)
        hess = lin.gauss_newton_hessian()
        np.testing.assert_allclose(hess, hess.T, atol=1e-12)
        assert np.linalg.eigvalsh(hess).min() > -1e-8 * np.abs(hess).max()

    def test_terminal_stage_has_no_dynamics(self, hover_problem):
        """Should drop dynamics and accel rows when u is None."""
        x = hover_problem.initial_state.to_vector()
        lin = linearize_stage(x, None, np.zeros(3), hover_problem.stages[-1], hover_problem)
        assert lin.state_jacobian is None and lin.control is None
        assert "accel" not in lin.residual_kinds

    def test_hover_rate_gradient_vanishes(self, hover_problem):
        """Should have zero cost gradient w.r.t. u at aligned hover with u = 0."""
        x = hover_problem.initial_state.to_vector()
        lin = linearize_stage(x, np.zeros(6), np.zeros(3), hover_problem.stages[0], hover_problem)
        np.testing.assert_allclose(lin.rate_weights * lin.control, 0.0)
        assert lin.cost == pytest.approx(0.0, abs=1e-16)

    def test_dynamics_jacobians_match_model(self, rng):
        """Should reuse the RK4 sensitivities of the model."""
        x = random_state(rng)
        u = rng.uniform(-200.0, 400.0, 6)
        problem = self._problem_for(rng, x)
        lin = linearize_stage(x, u, np.zeros(3), problem.stages[0], problem)
        x_next, a_d, b_d = GtmrModel(problem.gtmr).rk4_sensitivities(x, u, problem.step)
        np.testing.assert_array_equal(lin.next_state, x_next)
        np.testing.assert_array_equal(lin.state_jacobian, a_d)
        np.testing.assert_array_equal(lin.control_jacobian, b_d)

    def test_precomputed_blocks_match_direct_linearization(self, rng):
        """Should give the same stage blocks from batched model evaluations."""
        x = random_state(rng)
        u = rng.uniform(-200.0, 400.0, 6)
        eps = rng.uniform(0.0, 0.1, 3)
        problem = self._problem_for(rng, x)
        model = problem.model
        a_cont, _ = model.jacobians(x[None, :], np.zeros(6))
        direct = linearize_stage(x, u, eps, problem.stages[0], problem)
        batched = linearize_stage(
            x,
            u,
            eps,
            problem.stages[0],
            problem,
            dynamics=model.rk4_sensitivities(x, u, problem.step),
            accel=(model.acceleration(x), a_cont[0, 6:9, :]),
        )
        np.testing.assert_allclose(batched.output, direct.output, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(batched.output_jacobian, direct.output_jacobian, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(batched.state_jacobian, direct.state_jacobian)
        assert batched.cost == pytest.approx(direct.cost, rel=1e-12)


class TestStageViolations:
    """Tests for predicted violation counting."""

    def test_hover_within_window_has_no_violations(self, hover_problem):
        """Should count nothing for an aligned hover at 1 m."""
        states = np.tile(hover_problem.initial_state.to_vector(), (hover_problem.horizon_steps + 1, 1))
        assert stage_violations(hover_problem, states) == {"range": 0, "cone": 0}

    def test_out_of_range_counts_every_stage(self, gtmr, optics):
        """Should flag each predicted stage beyond range_max."""
        problem = make_hover_problem(gtmr, optics, distance=1.5)
        states = np.tile(problem.initial_state.to_vector(), (problem.horizon_steps + 1, 1))
        assert stage_violations(problem, states)["range"] == problem.horizon_steps

