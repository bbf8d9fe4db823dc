"""Tests for optical link geometry, indicators and link quality."""

import math

import numpy as np
import pytest

from linkmpc.dynamics import ETA, OMEGA, POS, VEL, euler_rate_matrix, hover_state
from linkmpc.models import OpticalParams
from linkmpc.ocp import aligned_receiver
from linkmpc.optical_link import (
    DegenerateRangeError,
    LinkSample,
    beam_axis_world,
    link_indicator,
    link_vector,
    misalignment_cosine,
    misalignment_rate,
    moving_average,
    moving_average_series,
    receiver_axis,
    rx_indicator,
    transmitter_position,
    tx_indicator,
)
from tests.conftest import random_state


def _sample(t: float, i_link: int) -> LinkSample:
    return LinkSample(time=t, cos_delta=1.0, cos_delta_rate=0.0, range=1.0, i_tx=1, i_rx=1, i_link=i_link)


class TestGeometry:
    """Tests for misalignment cosine and range."""

    def test_aligned_receiver_gives_unit_cosine(self, gtmr, optics):
        """Should report cos(delta) = 1 for a receiver on the beam axis."""
        state = hover_state(gtmr, position=(0.0, 0.0, 1.0))
        x = state.to_vector()
        rx = aligned_receiver(state, optics, 1.0)
        d_c = link_vector(transmitter_position(x, optics), rx)
        assert misalignment_cosine(beam_axis_world(x, optics), d_c) == pytest.approx(1.0)
        assert np.linalg.norm(d_c) == pytest.approx(1.0)

    def test_beam_points_down_at_level_attitude(self, gtmr, optics):
        """Should aim the transmitter along world -z when level."""
        x = hover_state(gtmr).to_vector()
        np.testing.assert_allclose(beam_axis_world(x, optics), [0.0, 0.0, -1.0], atol=1e-12)

    def test_perpendicular_receiver_gives_zero_cosine(self, gtmr, optics):
        """Should report cos(delta) = 0 for a receiver beside the transmitter."""
        x = hover_state(gtmr, position=(0.0, 0.0, 1.0)).to_vector()
        tx = transmitter_position(x, optics)
        rx = tx + np.array([0.0, 1.0, 0.0])
        assert misalignment_cosine(beam_axis_world(x, optics), link_vector(tx, rx)) == pytest.approx(0.0, abs=1e-12)

    def test_coincident_endpoints_raise(self):
        """Should refuse a zero-length link."""
        with pytest.raises(DegenerateRangeError):
            misalignment_cosine(np.array([0.0, 0.0, -1.0]), np.zeros(3))

    def test_misalignment_degrees_from_sample(self):
        """Should convert the cosine into degrees."""
        sample = LinkSample(0.0, 0.5, 0.0, 1.0, 1, 1, 1)
        assert sample.misalignment_deg == pytest.approx(60.0)

    def test_link_indicator_cannot_exceed_components(self):
        """Should reject samples with i_link above i_tx or i_rx."""
        with pytest.raises(ValueError):
            LinkSample(0.0, 1.0, 0.0, 1.0, i_tx=0, i_rx=1, i_link=1)


class TestMisalignmentRate:
    """Tests for the analytic time derivative of cos(delta)."""

    def test_rate_matches_finite_differences(self, optics, rng):
        """Should equal d/dt cos(delta) along the motion."""
        h = 1e-6
        for _ in range(1000):
            x = random_state(rng)
            rx_pos = x[POS] + np.array([0.2, -0.3, -1.0]) + rng.uniform(-0.3, 0.3, 3)
            rx_vel = rng.uniform(-1.0, 1.0, 3)
            direction = np.zeros_like(x)
            direction[POS] = x[VEL]
            direction[ETA] = euler_rate_matrix(x[ETA]) @ x[OMEGA]

            def cos_at(s: float) -> float:
                xs = x + s * direction
                d_c = link_vector(transmitter_position(xs, optics), rx_pos + s * rx_vel)
                return misalignment_cosine(beam_axis_world(xs, optics), d_c)

            fd = (cos_at(h) - cos_at(-h)) / (2 * h)
            assert misalignment_rate(x, rx_pos, rx_vel, optics) == pytest.approx(fd, abs=1e-6)

    def test_yaw_about_beam_axis_has_zero_rate(self, gtmr):
        """Should not change the cosine when spinning about a vertical beam."""
        optics = OpticalParams(tx_offset_body=(0.0, 0.0, 0.0))
        x = hover_state(gtmr, position=(0.0, 0.0, 1.0)).to_vector()
        x[OMEGA] = [0.0, 0.0, 2.0]
        rx_pos = np.array([0.5, 0.3, 0.0])
        assert misalignment_rate(x, rx_pos, np.zeros(3), optics) == pytest.approx(0.0, abs=1e-12)

    def test_static_geometry_has_zero_rate(self, gtmr, optics):
        """Should vanish when nothing moves."""
        x = hover_state(gtmr, position=(0.0, 0.0, 1.0)).to_vector()
        assert misalignment_rate(x, np.array([0.4, 0.0, 0.0]), np.zeros(3), optics) == 0.0


class TestIndicators:
    """Tests for transmitter, receiver and link indicators."""

    def test_tx_indicator_boundary_is_inclusive(self, optics):
        """Should accept the receiver exactly on the half-power cone."""
        assert tx_indicator(math.cos(math.radians(10.0)), optics) == 1
        assert tx_indicator(math.cos(math.radians(10.01)), optics) == 0
        assert tx_indicator(1.0, optics) == 1

    def test_rx_indicator_field_of_view(self, optics):
        """Should accept incidence inside the 89 degree field of view."""
        inside = np.array([math.sin(math.radians(88.0)), 0.0, math.cos(math.radians(88.0))])
        outside = np.array([1.0, 0.0, -0.01])
        axis = np.array([0.0, 0.0, 1.0])
        assert rx_indicator(axis, inside, optics) == 1
        assert rx_indicator(axis, outside, optics) == 0

    @pytest.mark.parametrize(
        "i_tx, i_rx, range_, expected",
        [
            (1, 1, 1.0, 1),
            (1, 1, 0.25, 1),
            (1, 1, 1.4, 1),
            (1, 1, 0.2499, 0),
            (1, 1, 1.4001, 0),
            (0, 1, 1.0, 0),
            (1, 0, 1.0, 0),
        ],
    )
    def test_link_indicator(self, optics, i_tx, i_rx, range_, expected):
        """Should require both indicators and a range inside the window."""
        assert link_indicator(i_tx, i_rx, range_, optics) == expected


class TestMovingAverage:
    """Tests for the sliding-window link quality."""

    def test_constant_link_gives_one(self):
        """Should average to 1 when the link never drops."""
        history = [_sample(0.1 * k, 1) for k in range(50)]
        assert moving_average(history, 4.9, 26.0) == pytest.approx(1.0)

    def test_partial_window_normalizes_by_elapsed_time(self):
        """Should divide by the covered time before a full window has elapsed."""
        history = [_sample(0.0, 1), _sample(1.0, 0), _sample(2.0, 0)]
        assert moving_average(history, 2.0, 26.0) == pytest.approx(0.5)

    def test_full_window_drops_old_samples(self):
        """Should ignore samples older than the window."""
        history = [_sample(0.0, 0), _sample(10.0, 1), _sample(20.0, 1)]
        assert moving_average(history, 20.0, 5.0) == pytest.approx(1.0)

    def test_single_sample_returns_its_indicator(self):
        """Should return the indicator of a lone sample."""
        assert moving_average([_sample(3.0, 0)], 3.0, 26.0) == 0.0
        assert moving_average([_sample(3.0, 1)], 3.0, 26.0) == 1.0

    def test_empty_history_raises(self):
        """Should refuse to average nothing."""
        with pytest.raises(ValueError):
            moving_average([], 0.0, 26.0)

    def test_series_matches_pointwise_average(self, rng):
        """Should agree with moving_average at every sample time."""
        times = np.arange(200) * 0.05
        values = (rng.uniform(size=200) > 0.3).astype(float)
        history = [_sample(t, int(v)) for t, v in zip(times, values)]
        series = moving_average_series(times, values, 2.0)
        for k in (0, 1, 17, 39, 40, 41, 120, 199):
            assert series[k] == pytest.approx(moving_average(history[: k + 1], times[k], 2.0), abs=1e-12)


class TestReceiverAxis:
    """Tests for the lagging receiver pointing model."""

    def test_zero_time_constant_tracks_line_of_sight(self):
        """Should point straight at the transmitter without lag."""
        axis = receiver_axis(np.zeros(3), np.array([0.0, 3.0, 4.0]), np.array([1.0, 0.0, 0.0]), 0.001, 0.0)
        np.testing.assert_allclose(axis, [0.0, 0.6, 0.8])

    def test_first_order_lag_decays_exponentially(self):
        """Should shrink the pointing error by 1/e after one time constant."""
        tx = np.array([0.0, 0.0, 1.0])
        axis = np.array([1.0, 0.0, 0.0])
        for _ in range(100):
            axis = receiver_axis(np.zeros(3), tx, axis, 0.001, 0.1)
        error = math.degrees(math.acos(float(np.clip(axis[2], -1.0, 1.0))))
        assert error == pytest.approx(90.0 / math.e, rel=1e-6)
        assert np.linalg.norm(axis) == pytest.approx(1.0)
