"""ORCA-controlled holonomic human agents with continuous goal resampling.

Each human computes one velocity half-plane per nearby agent (reciprocal,
half responsibility) and per nearby obstacle edge (full responsibility),
then solves a small 2D linear program for the feasible velocity closest to
its preferred velocity.  Infeasible systems fall back to the velocity
minimizing the largest constraint violation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

__all__ = [
    "HumanAgent",
    "OrcaParams",
    "HalfPlane",
    "AgentView",
    "compute_orca_halfplanes",
    "solve_velocity_lp",
    "step_humans",
]

_EPS = 1e-10
HUMAN_SPEED_LIMIT = 0.5
ARRIVAL_TOLERANCE = 0.2
GOAL_SAMPLE_TRIES = 100


class AgentView(NamedTuple):
    """Minimal neighbor info ORCA needs about another agent."""

    position: np.ndarray
    velocity: np.ndarray
    radius: float


@dataclass(frozen=True)
class HumanAgent:
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    radius: float = 0.3
    max_speed: float = 0.5
    reactive_to_robot: bool = False

    def __post_init__(self):
        for name in ("position", "velocity", "goal"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.max_speed > HUMAN_SPEED_LIMIT + 1e-12:
            raise ValueError(f"human max_speed {self.max_speed} exceeds {HUMAN_SPEED_LIMIT} m/s")
        if float(np.hypot(*self.velocity)) > self.max_speed + 1e-9:
            raise ValueError("human velocity exceeds max_speed")

    def as_view(self):
        return AgentView(self.position, self.velocity, self.radius)


@dataclass(frozen=True)
class OrcaParams:
    time_horizon_agents: float = 2.0
    time_horizon_obstacles: float = 2.0
    neighbor_dist: float = 5.0
    dt: float = 0.25
    # inflate radii in the velocity-obstacle construction; absorbs the
    # discrete-timestep linearization error so true clearance never dips
    # below the radius sum
    safety_margin: float = 0.05

    def __post_init__(self):
        for name in ("time_horizon_agents", "time_horizon_obstacles", "neighbor_dist", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.safety_margin < 0:
            raise ValueError("safety_margin must be >= 0")


@dataclass(frozen=True)
class HalfPlane:
    """Feasible velocities v satisfy (v - point) . normal >= 0."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=np.float64))
        n = float(np.hypot(*self.normal))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"half-plane normal must be unit length, |n| = {n}")

    def violation(self, v):
        return -float((np.asarray(v) - self.point) @ self.normal)


def _plane_from_line(point, direction):
    # RVO convention: feasible side is left of the directed line
    normal = np.array([-direction[1], direction[0]])
    return HalfPlane(point, normal)


def _agent_halfplane(position, velocity, other, inv_horizon, inv_dt):
    """One reciprocal ORCA half-plane against a single neighbor."""
    rel_pos = other.position - position
    rel_vel = velocity - other.velocity
    dist_sq = float(rel_pos @ rel_pos)
    combined = other.radius_sum
    combined_sq = combined * combined
    if dist_sq > combined_sq:
        w = rel_vel - inv_horizon * rel_pos
        w_len_sq = float(w @ w)
        dot1 = float(w @ rel_pos)
        if dot1 < 0.0 and dot1 * dot1 > combined_sq * w_len_sq:
            # closest point on the truncation disc
            w_len = math.sqrt(w_len_sq)
            unit_w = w / w_len
            direction = np.array([unit_w[1], -unit_w[0]])
            u = (combined * inv_horizon - w_len) * unit_w
        else:
            # closest point on one of the cone legs
            leg = math.sqrt(dist_sq - combined_sq)
            if rel_pos[0] * w[1] - rel_pos[1] * w[0] > 0.0:
                direction = np.array(
                    [rel_pos[0] * leg - rel_pos[1] * combined, rel_pos[0] * combined + rel_pos[1] * leg]
                ) / dist_sq
            else:
                direction = -np.array(
                    [rel_pos[0] * leg + rel_pos[1] * combined, -rel_pos[0] * combined + rel_pos[1] * leg]
                ) / dist_sq
            dot2 = float(rel_vel @ direction)
            u = dot2 * direction - rel_vel
    else:
        # already overlapping: separate along the center line within one step
        w = rel_vel - inv_dt * rel_pos
        w_len = float(np.hypot(*w))
        if w_len > _EPS:
            unit_w = w / w_len
        elif dist_sq > _EPS:
            unit_w = -rel_pos / math.sqrt(dist_sq)
        else:
            unit_w = np.array([1.0, 0.0])
        direction = np.array([unit_w[1], -unit_w[0]])
        u = (combined * inv_dt - w_len) * unit_w
    point = velocity + 0.5 * u
    return _plane_from_line(point, direction)


class _Neighbor(NamedTuple):
    position: np.ndarray
    velocity: np.ndarray
    radius_sum: float


def compute_orca_halfplanes(agent, neighbors, obstacles, params):
    """Half-planes for one agent: obstacle edges first, then other agents.

    Neighbors beyond ``params.neighbor_dist`` are ignored.  Obstacle edges
    use a closest-point linear constraint with full responsibility; agent
    pairs use the truncated velocity obstacle with half responsibility.
    """
    position = np.asarray(agent.position, dtype=np.float64)
    velocity = np.asarray(agent.velocity, dtype=np.float64)
    planes = []
    if obstacles is not None:
        planes.extend(
            _obstacle_halfplanes(
                position, velocity, agent.radius, obstacles, params
            )
        )
    inv_horizon = 1.0 / params.time_horizon_agents
    inv_dt = 1.0 / params.dt
    for other in neighbors:
        rel = np.asarray(other.position, dtype=np.float64) - position
        if float(np.hypot(*rel)) > params.neighbor_dist:
            continue
        view = _Neighbor(
            np.asarray(other.position, dtype=np.float64),
            np.asarray(other.velocity, dtype=np.float64),
            agent.radius + other.radius + params.safety_margin,
        )
        planes.append(_agent_halfplane(position, velocity, view, inv_horizon, inv_dt))
    return planes


def _obstacle_halfplanes(position, velocity, radius, map_model, params):
    """One linear constraint per nearby edge: the velocity component toward
    the edge may close at most the current surface gap within the obstacle
    horizon (within one step when already penetrating)."""
    segs = map_model.all_segments()
    if segs.size == 0:
        return []
    a = segs[:, 0, :]
    b = segs[:, 1, :]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.einsum("ij,ij->i", position[None, :] - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    offsets = position[None, :] - closest
    dists = np.hypot(offsets[:, 0], offsets[:, 1])
    planes = []
    for k in np.nonzero(dists <= params.neighbor_dist)[0]:
        d = float(dists[k])
        if d > _EPS:
            n = offsets[k] / d
        else:
            edge = ab[k]
            edge_len = float(np.hypot(*edge))
            if edge_len <= _EPS:
                continue
            n = np.array([edge[1], -edge[0]]) / edge_len  # outward for CCW interiors
        surface_gap = d - radius - params.safety_margin
        horizon = params.time_horizon_obstacles if surface_gap >= 0 else params.dt
        bound = -surface_gap / horizon
        planes.append(HalfPlane(bound * n, n))
    return planes


# ---------------------------------------------------------------------------
# 2D linear program over half-planes (incremental, with violation fallback)
# ---------------------------------------------------------------------------


def _det(a, b):
    return a[0] * b[1] - a[1] * b[0]


def _lp1(lines, index, radius, opt_v, direction_opt):
    """Optimize along line ``index`` subject to lines[:index] and the disc."""
    point, direction = lines[index]
    dot = float(point @ direction)
    disc = dot * dot + radius * radius - float(point @ point)
    if disc < 0.0:
        return None
    sqrt_disc = math.sqrt(disc)
    t_left = -dot - sqrt_disc
    t_right = -dot + sqrt_disc
    for j in range(index):
        p_j, d_j = lines[j]
        denominator = _det(direction, d_j)
        numerator = _det(d_j, point - p_j)
        if abs(denominator) <= _EPS:
            if numerator < 0.0:
                return None
            continue
        t = numerator / denominator
        if denominator >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    if direction_opt:
        t = t_right if float(opt_v @ direction) > 0.0 else t_left
    else:
        t = min(max(float(direction @ (opt_v - point)), t_left), t_right)
    return point + t * direction


def _lp2(lines, radius, opt_v, direction_opt):
    """Incremental LP; returns (first failing index or len(lines), result)."""
    if direction_opt:
        result = opt_v * radius
    elif float(opt_v @ opt_v) > radius * radius:
        result = opt_v / float(np.hypot(*opt_v)) * radius
    else:
        result = np.array(opt_v, dtype=np.float64)
    for i, (p_i, d_i) in enumerate(lines):
        if _det(d_i, p_i - result) > 0.0:
            new_result = _lp1(lines, i, radius, opt_v, direction_opt)
            if new_result is None:
                return i, result
            result = new_result
    return len(lines), result


def _lp3(lines, begin, radius, result):
    """Minimize the maximum violation over all lines (infeasible fallback)."""
    distance = 0.0
    for i in range(begin, len(lines)):
        p_i, d_i = lines[i]
        if _det(d_i, p_i - result) > distance:
            proj = []
            for j in range(i):
                p_j, d_j = lines[j]
                determinant = _det(d_i, d_j)
                if abs(determinant) <= _EPS:
                    if float(d_i @ d_j) > 0.0:
                        continue  # same direction: line j dominates or equals
                    point = 0.5 * (p_i + p_j)
                else:
                    point = p_i + (_det(d_j, p_i - p_j) / determinant) * d_i
                direction = d_j - d_i
                direction = direction / float(np.hypot(*direction))
                proj.append((point, direction))
            temp = result
            fail, result = _lp2(proj, radius, np.array([-d_i[1], d_i[0]]), True)
            if fail < len(proj):
                result = temp
            distance = _det(d_i, p_i - result)
    return result


def solve_velocity_lp(halfplanes, preferred_velocity, max_speed):
    """Velocity closest to the preferred one satisfying every half-plane and
    the speed disc; minimizes the worst violation when infeasible."""
    if max_speed <= 0:
        raise ValueError("max_speed must be > 0")
    pref = np.asarray(preferred_velocity, dtype=np.float64)
    lines = []
    for hp in halfplanes:
        direction = np.array([hp.normal[1], -hp.normal[0]])
        lines.append((hp.point, direction))
    fail, result = _lp2(lines, max_speed, pref, False)
    if fail < len(lines):
        result = _lp3(lines, fail, max_speed, result)
    return result


# ---------------------------------------------------------------------------
# crowd step
# ---------------------------------------------------------------------------


def _clip_speed(v, max_speed):
    norm = float(np.hypot(*v))
    while norm > max_speed:
        v = v * (max_speed / norm)
        norm = float(np.hypot(*v))
    return v


def sample_free_goal(rng, map_model, radius, tries=GOAL_SAMPLE_TRIES):
    """Uniform draw over the bounds with obstacle clearance >= radius; None
    when every try fails."""
    xmin, ymin, xmax, ymax = map_model.bounds
    for _ in range(tries):
        x = rng.uniform(xmin + radius, xmax - radius)
        y = rng.uniform(ymin + radius, ymax - radius)
        if map_model.min_obstacle_distance((x, y)) >= radius:
            return np.array([x, y])
    return None


def step_humans(humans, robot_view, map_model, params, rng):
    """Advance all humans one control step (synchronous update).

    Every human plans against the pre-step snapshot of the others; reactive
    humans additionally see ``robot_view`` (an :class:`AgentView` or None).
    Humans within the arrival tolerance of their goal after the move get a
    fresh random goal.
    """
    dt = params.dt
    views = [h.as_view() for h in humans]
    planned = []
    for i, human in enumerate(humans):
        to_goal = human.goal - human.position
        dist = float(np.hypot(*to_goal))
        if dist > 1e-12:
            pref = to_goal / dist * min(human.max_speed, dist / dt)
        else:
            pref = np.zeros(2)
        neighbors = [v for j, v in enumerate(views) if j != i]
        if human.reactive_to_robot and robot_view is not None:
            neighbors.append(robot_view)
        planes = compute_orca_halfplanes(human, neighbors, map_model, params)
        velocity = _clip_speed(solve_velocity_lp(planes, pref, human.max_speed), human.max_speed)
        planned.append(velocity)
    stepped = []
    for human, velocity in zip(humans, planned):
        position = human.position + velocity * dt
        goal = human.goal
        if float(np.hypot(*(goal - position))) < ARRIVAL_TOLERANCE:
            fresh = sample_free_goal(rng, map_model, human.radius)
            if fresh is not None:
                goal = fresh
        stepped.append(replace(human, position=position, velocity=velocity, goal=goal))
    return stepped
