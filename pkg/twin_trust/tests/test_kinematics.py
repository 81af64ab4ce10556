import numpy as np
import pytest

from twin_trust.services import kinematics


class TestKinematics:

    def test_distance_and_speed(self) -> None:
        assert kinematics.distance((0, 0, 0), (3, 4, 0)) == 5.0
        assert kinematics.speed_of((0, 6, 8)) == 10.0

    def test_heading_change(self) -> None:
        assert kinematics.heading_change_deg((1, 0, 0), (0, 1, 0)) == pytest.approx(90.0)
        assert kinematics.heading_change_deg((0, 0, 0), (0, 1, 0)) == 0.0

    def test_turn_direction(self) -> None:
        assert kinematics.turn_direction((1, 0, 0), (0, 1, 0)) == 1
        assert kinematics.turn_direction((1, 0, 0), (0, -1, 0)) == -1
        assert kinematics.turn_direction((1, 0, 0), (2, 0, 0)) == 0

    def test_clamp_speed(self) -> None:
        clamped = kinematics.clamp_speed(np.array([12.0, 0.0, 0.0]), 10.0)
        assert kinematics.as_vec(clamped) == (10.0, 0.0, 0.0)
        assert kinematics.as_vec(kinematics.clamp_speed(np.array([3.0, 0.0, 0.0]), 10.0)) == (3.0, 0.0, 0.0)

    def test_steer_is_rate_limited(self) -> None:
        steered = kinematics.steer_toward(np.array([5.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), 15.0)
        assert kinematics.speed_of(steered) == pytest.approx(5.0)
        assert kinematics.heading_change_deg((5.0, 0.0, 0.0), steered) == pytest.approx(15.0)

    def test_steer_reversal_turns_horizontally(self) -> None:
        steered = kinematics.steer_toward(np.array([5.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]), 15.0)
        assert steered[2] == pytest.approx(0.0)
        assert kinematics.heading_change_deg((5.0, 0.0, 0.0), steered) == pytest.approx(15.0)

    def test_integrate_step_moves_first(self) -> None:
        """Position advances by the old velocity; acceleration affects the next tick."""
        p, v, index = kinematics.integrate_step(
            (0, 0, 10), (2, 0, 0), (1, 0, 0), [(100.0, 0.0, 10.0)], 0, 10.0, 15.0, 2.0
        )
        assert kinematics.as_vec(p) == (2.0, 0.0, 10.0)
        assert kinematics.as_vec(v) == (3.0, 0.0, 0.0)
        assert index == 0

    def test_waypoints_are_marked_reached(self) -> None:
        mission = [(2.0, 0.0, 10.0), (100.0, 0.0, 10.0)]
        _, _, index = kinematics.integrate_step((0, 0, 10), (2, 0, 0), (0, 0, 0), mission, 0, 10.0, 15.0, 2.0)
        assert index == 1

    def test_velocity_override(self) -> None:
        _, v, _ = kinematics.integrate_step(
            (0, 0, 10), (2, 0, 0), (0, 0, 0), [(100.0, 0.0, 10.0)], 0, 10.0, 15.0, 2.0,
            velocity_override=(0.0, 20.0, 0.0),
        )
        assert kinematics.as_vec(v) == (0.0, 10.0, 0.0)

    def test_remaining_path_length(self) -> None:
        mission = [(10.0, 0.0, 0.0), (10.0, 10.0, 0.0)]
        assert kinematics.remaining_path_length((0, 0, 0), mission, 0) == pytest.approx(20.0)
        assert kinematics.remaining_path_length((0, 0, 0), mission, 2) == 0.0
