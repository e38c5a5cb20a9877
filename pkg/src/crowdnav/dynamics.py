"""Unicycle robot kinematics with a 3x3 discrete acceleration action grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = ["RobotState", "RobotSpec", "ACTION_COUNT", "decode_action", "encode_action", "step_unicycle", "normalize_angle"]

ACTION_COUNT = 9

# each action applies for one control step; the commanded acceleration is
# integrated over an effective 1 s window so a single step changes speed by
# the full option value (a literal a*dt update would take ~40 steps to reach
# cruise speed)
ACCEL_TIME_CONSTANT = 1.0


def normalize_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class RobotSpec:
    radius: float = 0.3
    v_max: float = 0.5
    omega_max: float = 1.0
    a_trans_options: tuple = (-0.05, 0.0, 0.05)
    a_rot_options: tuple = (-0.1, 0.0, 0.1)

    def __post_init__(self):
        if list(self.a_trans_options) != sorted(self.a_trans_options):
            raise ValueError("a_trans_options must be ascending")
        if list(self.a_rot_options) != sorted(self.a_rot_options):
            raise ValueError("a_rot_options must be ascending")


@dataclass(frozen=True)
class RobotState:
    """Pose (x, y, theta), scalar speeds (v, omega) and the goal position."""

    x: float
    y: float
    theta: float
    v: float
    omega: float
    goal_x: float
    goal_y: float

    @property
    def position(self):
        return np.array([self.x, self.y])

    @property
    def velocity(self):
        """Cartesian velocity (v*cos(theta), v*sin(theta))."""
        return np.array([self.v * math.cos(self.theta), self.v * math.sin(self.theta)])

    def goal_distance(self):
        return math.hypot(self.goal_x - self.x, self.goal_y - self.y)

    def feature_vector(self, pos_scale=1.0):
        """Policy input (px, py, vx, vy, gx, gy, theta), positions scaled."""
        vx, vy = self.velocity
        return np.array(
            [
                self.x / pos_scale,
                self.y / pos_scale,
                vx,
                vy,
                self.goal_x / pos_scale,
                self.goal_y / pos_scale,
                self.theta,
            ]
        )


def decode_action(index, spec=RobotSpec()):
    """Row-major index -> (a_trans, a_rot) over the 3x3 option grid."""
    index = int(index)
    if not 0 <= index < ACTION_COUNT:
        raise ValueError(f"action index {index} out of range [0, {ACTION_COUNT})")
    return spec.a_trans_options[index // 3], spec.a_rot_options[index % 3]


def encode_action(a_trans, a_rot, spec=RobotSpec()):
    return 3 * spec.a_trans_options.index(a_trans) + spec.a_rot_options.index(a_rot)


def step_unicycle(state, action, spec=RobotSpec(), dt=0.25):
    """Advance one control step.

    Speeds update first (clipped to their bounds), then the heading, then
    the position integrates along the new heading (semi-implicit Euler).
    """
    a_trans, a_rot = action
    v = min(max(state.v + a_trans * ACCEL_TIME_CONSTANT, 0.0), spec.v_max)
    omega = min(max(state.omega + a_rot * ACCEL_TIME_CONSTANT, -spec.omega_max), spec.omega_max)
    theta = normalize_angle(state.theta + omega * dt)
    return replace(
        state,
        x=state.x + v * math.cos(theta) * dt,
        y=state.y + v * math.sin(theta) * dt,
        theta=theta,
        v=v,
        omega=omega,
    )
