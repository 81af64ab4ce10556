"""Point-mass kinematics shared by trajectory prediction and the simulator.

Velocities are expressed in metres per tick and accelerations in metres per
tick squared, so one integration step is ``pos += vel`` followed by
``vel += acc``.
"""
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from twin_trust.app.schemas import Vec3

ZERO_NORM = 1e-12
UP = np.array([0.0, 0.0, 1.0])


def as_array(vec: Sequence[float]) -> np.ndarray:
    return np.asarray(vec, dtype=float)


def as_vec(arr: Sequence[float]) -> Vec3:
    return (float(arr[0]), float(arr[1]), float(arr[2]))


def speed_of(vel: Sequence[float]) -> float:
    return float(np.linalg.norm(as_array(vel)))


def distance(a: Sequence[float], b: Sequence[float]) -> float:
    return float(np.linalg.norm(as_array(a) - as_array(b)))


def heading_change_deg(before: Sequence[float], after: Sequence[float]) -> float:
    """Angle between two velocity vectors; 0 when either is (near) zero."""
    u, w = as_array(before), as_array(after)
    nu, nw = np.linalg.norm(u), np.linalg.norm(w)
    if nu < ZERO_NORM or nw < ZERO_NORM:
        return 0.0
    cos = float(np.clip(np.dot(u, w) / (nu * nw), -1.0, 1.0))
    return math.degrees(math.acos(cos))


def turn_direction(before: Sequence[float], after: Sequence[float]) -> int:
    """+1 for a left (counter-clockwise seen from above) turn, -1 for right, 0 otherwise."""
    z = float(np.cross(as_array(before), as_array(after))[2])
    if abs(z) < ZERO_NORM:
        return 0
    return 1 if z > 0 else -1


def clamp_speed(vel: np.ndarray, cap: float) -> np.ndarray:
    speed = float(np.linalg.norm(vel))
    if speed > cap and speed > ZERO_NORM:
        return vel * (cap / speed)
    return vel


def _rotate(u: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    k = axis / np.linalg.norm(axis)
    return (
        u * math.cos(angle)
        + np.cross(k, u) * math.sin(angle)
        + k * float(np.dot(k, u)) * (1.0 - math.cos(angle))
    )


def steer_toward(vel: np.ndarray, direction: np.ndarray, max_turn_deg: float) -> np.ndarray:
    """Rotate ``vel`` toward ``direction`` by at most ``max_turn_deg``, keeping its speed."""
    speed = float(np.linalg.norm(vel))
    span = float(np.linalg.norm(direction))
    if speed < ZERO_NORM or span < ZERO_NORM:
        return vel
    u = vel / speed
    w = direction / span
    angle = math.acos(float(np.clip(np.dot(u, w), -1.0, 1.0)))
    if angle <= 1e-9:
        return vel
    max_turn = math.radians(max_turn_deg)
    if angle <= max_turn:
        return w * speed
    axis = np.cross(u, w)
    if np.linalg.norm(axis) < ZERO_NORM:
        # Reversal: turn in the horizontal plane, or about x when flying vertically.
        axis = UP if np.linalg.norm(np.cross(u, UP)) > ZERO_NORM else np.array([1.0, 0.0, 0.0])
    return _rotate(u, axis, max_turn) * speed


def advance_waypoints(
    pos: np.ndarray,
    mission: Sequence[Vec3],
    waypoint_index: int,
    reach: float,
) -> int:
    while waypoint_index < len(mission) and distance(pos, mission[waypoint_index]) <= reach:
        waypoint_index += 1
    return waypoint_index


def integrate_step(
    pos: Sequence[float],
    vel: Sequence[float],
    acc: Sequence[float],
    mission: Sequence[Vec3],
    waypoint_index: int,
    max_speed: float,
    turn_rate_deg: float,
    arrival_radius: float,
    velocity_override: Optional[Sequence[float]] = None,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Advance one tick.

    Order: move by the current velocity, mark reached waypoints, apply the
    acceleration, steer toward the next unvisited waypoint, clamp the speed.
    A ``velocity_override`` replaces the acceleration and steering stages.
    """
    p0, v0 = as_array(pos), as_array(vel)
    p1 = p0 + v0
    reach = max(arrival_radius, float(np.linalg.norm(v0)))
    waypoint_index = advance_waypoints(p1, mission, waypoint_index, reach)
    if velocity_override is not None:
        v1 = as_array(velocity_override)
    else:
        v1 = v0 + as_array(acc)
        if waypoint_index < len(mission):
            v1 = steer_toward(v1, as_array(mission[waypoint_index]) - p1, turn_rate_deg)
    return p1, clamp_speed(v1, max_speed), waypoint_index


def remaining_path_length(pos: Sequence[float], mission: Sequence[Vec3], waypoint_index: int) -> float:
    if waypoint_index >= len(mission):
        return 0.0
    total = distance(pos, mission[waypoint_index])
    for a, b in zip(mission[waypoint_index:], mission[waypoint_index + 1:]):
        total += distance(a, b)
    return total
