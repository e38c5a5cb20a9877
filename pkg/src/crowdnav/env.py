"""The navigation MDP: randomized episodes, sensing, reward and termination.

Each episode draws random convex obstacles, circle-crossing ORCA humans
(20% react to the robot) and a start/goal pair for the unicycle robot.
The observation couples the robot state, a ray-traced obstacle scan and up
to ``n_max_humans`` detected human states gated by a visibility mask.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import crowd
from . import geometry as geo
from .dynamics import RobotSpec, RobotState, decode_action, normalize_angle, step_unicycle

__all__ = [
    "EnvConfig",
    "SensorConfig",
    "RewardConfig",
    "Observation",
    "StepResult",
    "Outcome",
    "CrowdNavEnv",
    "compute_reward",
    "sense",
    "PlacementError",
    "TrajectoryWriter",
]


class Outcome(enum.Enum):
    RUNNING = "Running"
    SUCCESS = "Success"
    COLLISION_HUMAN = "CollisionHuman"
    COLLISION_OBSTACLE = "CollisionObstacle"
    TIMEOUT = "Timeout"


class PlacementError(RuntimeError):
    """Episode randomization could not find a collision-free layout."""


@dataclass(frozen=True)
class SensorConfig:
    human_range: float = 5.0
    occlusion: bool = True


@dataclass(frozen=True)
class RewardConfig:
    collision: float = -20.0
    discomfort_dist: float = 0.25
    discomfort_scale: float = 2.0
    goal_reward: float = 20.0
    shaping_scale: float = 2.0


@dataclass(frozen=True)
class EnvConfig:
    n_humans_range: tuple = (2, 4)
    n_obstacles_range: tuple = (7, 9)
    arena_half_width: float = 6.0
    crossing_radius: float = 4.0
    max_episode_steps: int = 200
    dt: float = 0.25
    sensor: SensorConfig = field(default_factory=SensorConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    robot: RobotSpec = field(default_factory=RobotSpec)
    scan: geo.ScanSpec = field(default_factory=geo.ScanSpec)
    n_max_humans: int = 6
    human_radius: float = 0.3
    human_max_speed: float = 0.5
    reactive_fraction: float = 0.2
    obstacle_circumradius: tuple = (0.3, 1.0)
    obstacle_vertex_range: tuple = (3, 6)
    obstacle_clearance: float = 0.5
    robot_goal_separation: float = 3.0
    orca_time_horizon_agents: float = 2.0
    orca_time_horizon_obstacles: float = 2.0
    orca_neighbor_dist: float = 5.0

    def __post_init__(self):
        if self.n_humans_range[0] > self.n_humans_range[1] or self.n_humans_range[0] < 0:
            raise ValueError("bad n_humans_range")
        if self.n_obstacles_range[0] > self.n_obstacles_range[1] or self.n_obstacles_range[0] < 0:
            raise ValueError("bad n_obstacles_range")
        if self.max_episode_steps <= 0:
            raise ValueError("max_episode_steps must be > 0")

    @classmethod
    def reduced(cls, **overrides):
        """Small training arena: 2 humans, 3 obstacles, 8 m across."""
        base = dict(
            n_humans_range=(2, 2),
            n_obstacles_range=(3, 3),
            arena_half_width=4.0,
            crossing_radius=2.5,
        )
        base.update(overrides)
        return cls(**base)

    def orca_params(self):
        return crowd.OrcaParams(
            time_horizon_agents=self.orca_time_horizon_agents,
            time_horizon_obstacles=self.orca_time_horizon_obstacles,
            neighbor_dist=self.orca_neighbor_dist,
            dt=self.dt,
        )

    def to_dict(self):
        d = asdict(self)
        for key in ("n_humans_range", "n_obstacles_range", "obstacle_circumradius", "obstacle_vertex_range"):
            d[key] = list(d[key])
        d["robot"]["a_trans_options"] = list(d["robot"]["a_trans_options"])
        d["robot"]["a_rot_options"] = list(d["robot"]["a_rot_options"])
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("n_humans_range", "n_obstacles_range", "obstacle_circumradius", "obstacle_vertex_range"):
            if key in data:
                data[key] = tuple(data[key])
        if "sensor" in data and isinstance(data["sensor"], dict):
            data["sensor"] = SensorConfig(**data["sensor"])
        if "reward" in data and isinstance(data["reward"], dict):
            data["reward"] = RewardConfig(**data["reward"])
        if "robot" in data and isinstance(data["robot"], dict):
            robot = dict(data["robot"])
            for key in ("a_trans_options", "a_rot_options"):
                if key in robot:
                    robot[key] = tuple(robot[key])
            data["robot"] = RobotSpec(**robot)
        if "scan" in data and isinstance(data["scan"], dict):
            data["scan"] = geo.ScanSpec(**data["scan"])
        return cls(**data)


@dataclass(frozen=True)
class Observation:
    """MDP state: robot state, obstacle scan, masked human slots."""

    robot: RobotState
    scan: geo.RayScan
    human_slots: np.ndarray  # (n_max, 4): px, py, vx, vy; zero when masked
    visibility_mask: np.ndarray  # (n_max,) of {0, 1}


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    outcome: Outcome
    info: dict


def compute_reward(prev_d_goal, d_min, d_goal, cfg, robot_radius=0.3):
    """Piecewise reward, cases evaluated in order: collision, discomfort,
    goal, potential shaping toward the goal."""
    if d_min < 0:
        return cfg.collision
    if 0 < d_min < cfg.discomfort_dist:
        return cfg.discomfort_scale * (d_min - cfg.discomfort_dist)
    if d_goal <= robot_radius:
        return cfg.goal_reward
    return cfg.shaping_scale * (prev_d_goal - d_goal)


def sense(robot, humans, map_model, sensor, scan_spec, n_max):
    """Detected human slots (nearest first), visibility mask and the scan.

    A human is visible when within range and, with occlusion on, the
    robot-human segment crosses no obstacle polygon.
    """
    robot_pos = robot.position
    obstacle_segs = map_model.obstacle_segments()
    visible = []
    for h in humans:
        d = float(np.hypot(*(h.position - robot_pos)))
        if d > sensor.human_range:
            continue
        if sensor.occlusion and geo.segment_blocked(robot_pos, h.position, obstacle_segs):
            continue
        visible.append((d, h))
    visible.sort(key=lambda pair: pair[0])
    slots = np.zeros((n_max, 4))
    mask = np.zeros(n_max)
    for k, (_, h) in enumerate(visible[:n_max]):
        slots[k] = [h.position[0], h.position[1], h.velocity[0], h.velocity[1]]
        mask[k] = 1.0
    scan = geo.ray_cast(robot_pos, robot.theta, map_model, scan_spec)
    return slots, mask, scan


class CrowdNavEnv:
    """Single-threaded environment instance owning its episode RNG."""

    def __init__(self, config=None):
        self.config = config or EnvConfig()
        self.map_model = None
        self.humans = []
        self.robot = None
        self.t = 0
        self.done = True
        self.outcome = Outcome.RUNNING
        self.prev_d_goal = 0.0
        self._rng = None

    # -- episode construction ------------------------------------------------

    def reset(self, seed):
        """Start a fresh randomized episode; the caller should zero any
        recurrent policy state."""
        rng = np.random.default_rng(seed)
        for _ in range(20):
            map_model = self._sample_obstacles(rng)
            if map_model is None:
                continue
            humans = self._sample_humans(rng, map_model)
            if humans is None:
                continue
            robot = self._sample_robot(rng, map_model, humans)
            if robot is None:
                continue
            break
        else:
            raise PlacementError(f"could not build a collision-free episode for seed {seed}")
        self.map_model = map_model
        self.humans = humans
        self.robot = robot
        self.t = 0
        self.done = False
        self.outcome = Outcome.RUNNING
        self.prev_d_goal = robot.goal_distance()
        self._rng = rng
        return self._observe()

    def _sample_obstacles(self, rng):
        cfg = self.config
        hw = cfg.arena_half_width
        n = int(rng.integers(cfg.n_obstacles_range[0], cfg.n_obstacles_range[1] + 1))
        placed = []  # (center, circumradius)
        polys = []
        for _ in range(n):
            for _ in range(200):
                radius = rng.uniform(*cfg.obstacle_circumradius)
                margin = radius + 0.1
                center = rng.uniform(-(hw - margin), hw - margin, size=2)
                if all(
                    np.hypot(*(center - c)) >= radius + r + cfg.obstacle_clearance
                    for c, r in placed
                ):
                    break
            else:
                return None
            k = int(rng.integers(cfg.obstacle_vertex_range[0], cfg.obstacle_vertex_range[1] + 1))
            angles = self._spread_angles(rng, k)
            verts = np.column_stack(
                [center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles)]
            )
            placed.append((center, radius))
            polys.append(geo.Polygon(verts))
        bounds = (-hw, -hw, hw, hw)
        return geo.MapModel(tuple(polys), bounds)

    @staticmethod
    def _spread_angles(rng, k, min_gap=0.35):
        for _ in range(100):
            angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=k))
            gaps = np.diff(angles, append=angles[0] + 2.0 * math.pi)
            if gaps.min() >= min_gap:
                return angles
        return np.arange(k) * 2.0 * math.pi / k  # evenly spaced fallback

    def _sample_humans(self, rng, map_model):
        cfg = self.config
        n = int(rng.integers(cfg.n_humans_range[0], cfg.n_humans_range[1] + 1))
        humans = []
        for _ in range(n):
            for _ in range(200):
                angle = rng.uniform(0.0, 2.0 * math.pi)
                pos = cfg.crossing_radius * np.array([math.cos(angle), math.sin(angle)])
                if map_model.min_obstacle_distance(pos) < cfg.human_radius + 0.1:
                    continue
                if any(
                    np.hypot(*(pos - h.position)) < cfg.human_radius + h.radius + 0.1
                    for h in humans
                ):
                    continue
                jitter = rng.uniform(-math.radians(15.0), math.radians(15.0))
                goal_angle = angle + math.pi + jitter
                goal = cfg.crossing_radius * np.array(
                    [math.cos(goal_angle), math.sin(goal_angle)]
                )
                if map_model.min_obstacle_distance(goal) < cfg.human_radius + 0.1:
                    continue
                humans.append(
                    crowd.HumanAgent(
                        position=pos,
                        velocity=np.zeros(2),
                        goal=goal,
                        radius=cfg.human_radius,
                        max_speed=cfg.human_max_speed,
                        reactive_to_robot=bool(rng.random() < cfg.reactive_fraction),
                    )
                )
                break
            else:
                return None
        return humans

    def _sample_robot(self, rng, map_model, humans):
        cfg = self.config
        rho = cfg.robot.radius
        hw = cfg.arena_half_width
        lim = hw - rho - 0.2
        for _ in range(200):
            start = rng.uniform(-lim, lim, size=2)
            if map_model.min_obstacle_distance(start) < rho + 0.1:
                continue
            if any(
                np.hypot(*(start - h.position)) < rho + h.radius + 0.1 for h in humans
            ):
                continue
            goal = rng.uniform(-lim, lim, size=2)
            if np.hypot(*(goal - start)) < cfg.robot_goal_separation:
                continue
            if map_model.min_obstacle_distance(goal) < rho + 0.1:
                continue
            heading = normalize_angle(rng.uniform(-math.pi, math.pi))
            return RobotState(
                x=float(start[0]),
                y=float(start[1]),
                theta=heading,
                v=0.0,
                omega=0.0,
                goal_x=float(goal[0]),
                goal_y=float(goal[1]),
            )
        return None

    # -- stepping ------------------------------------------------------------

    def step(self, action_index):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        cfg = self.config
        action = decode_action(action_index, cfg.robot)
        robot_snapshot = crowd.AgentView(
            self.robot.position, self.robot.velocity, cfg.robot.radius
        )
        self.robot = step_unicycle(self.robot, action, cfg.robot, cfg.dt)
        self.humans = crowd.step_humans(
            self.humans, robot_snapshot, self.map_model, cfg.orca_params(), self._rng
        )
        self.t += 1

        d_human = self._min_human_distance()
        d_obstacle = self._min_obstacle_distance()
        d_min = min(d_human, d_obstacle)
        d_goal = self.robot.goal_distance()

        if d_min < 0:
            outcome = (
                Outcome.COLLISION_HUMAN
                if d_human <= d_obstacle
                else Outcome.COLLISION_OBSTACLE
            )
        elif d_goal <= cfg.robot.radius:
            outcome = Outcome.SUCCESS
        elif self.t >= cfg.max_episode_steps:
            outcome = Outcome.TIMEOUT
        else:
            outcome = Outcome.RUNNING

        reward = compute_reward(self.prev_d_goal, d_min, d_goal, cfg.reward, cfg.robot.radius)
        self.prev_d_goal = d_goal
        self.outcome = outcome
        self.done = outcome is not Outcome.RUNNING
        info = {"d_min": d_min, "d_goal": d_goal}
        return StepResult(self._observe(), reward, self.done, outcome, info)

    def _min_human_distance(self):
        pos = self.robot.position
        rho = self.config.robot.radius
        if not self.humans:
            return math.inf
        return min(
            float(np.hypot(*(h.position - pos))) - (rho + h.radius) for h in self.humans
        )

    def _min_obstacle_distance(self):
        pos = self.robot.position
        rho = self.config.robot.radius
        d = self.map_model.wall_distance(pos) - rho
        poly_d = self.map_model.min_obstacle_distance(pos)
        if not math.isinf(poly_d):
            d = min(d, poly_d - rho)
        return d

    def _observe(self):
        cfg = self.config
        slots, mask, scan = sense(
            self.robot, self.humans, self.map_model, cfg.sensor, cfg.scan, cfg.n_max_humans
        )
        return Observation(self.robot, scan, slots, mask)

    # -- snapshots (training resume) ------------------------------------------

    def get_state(self):
        r = self.robot
        return {
            "t": self.t,
            "done": self.done,
            "outcome": self.outcome.value,
            "prev_d_goal": self.prev_d_goal,
            "robot": [r.x, r.y, r.theta, r.v, r.omega, r.goal_x, r.goal_y],
            "humans": [
                {
                    "position": h.position.tolist(),
                    "velocity": h.velocity.tolist(),
                    "goal": h.goal.tolist(),
                    "radius": h.radius,
                    "max_speed": h.max_speed,
                    "reactive": h.reactive_to_robot,
                }
                for h in self.humans
            ],
            "obstacles": [p.vertices.tolist() for p in self.map_model.obstacles],
            "bounds": list(self.map_model.bounds),
            "rng_state": self._rng.bit_generator.state,
        }

    def set_state(self, state):
        self.t = state["t"]
        self.done = state["done"]
        self.outcome = Outcome(state["outcome"])
        self.prev_d_goal = state["prev_d_goal"]
        x, y, theta, v, omega, gx, gy = state["robot"]
        self.robot = RobotState(x=x, y=y, theta=theta, v=v, omega=omega, goal_x=gx, goal_y=gy)
        self.humans = [
            crowd.HumanAgent(
                position=np.array(h["position"]),
                velocity=np.array(h["velocity"]),
                goal=np.array(h["goal"]),
                radius=h["radius"],
                max_speed=h["max_speed"],
                reactive_to_robot=h["reactive"],
            )
            for h in state["humans"]
        ]
        self.map_model = geo.MapModel(
            tuple(geo.Polygon(np.array(v)) for v in state["obstacles"]),
            tuple(state["bounds"]),
        )
        self._rng = np.random.default_rng()
        self._rng.bit_generator.state = state["rng_state"]


class TrajectoryWriter:
    """Line-delimited JSON trajectory log; one header + one record per step."""

    def __init__(self, stream):
        self.stream = stream

    def _emit(self, record):
        self.stream.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    def episode_header(self, seed, env, config_hash=""):
        self._emit(
            {
                "type": "episode",
                "seed": seed,
                "config_hash": config_hash,
                "n_humans": len(env.humans),
                "n_obstacles": len(env.map_model.obstacles),
                "bounds": list(env.map_model.bounds),
                "obstacles": [p.vertices.tolist() for p in env.map_model.obstacles],
                "robot_goal": [env.robot.goal_x, env.robot.goal_y],
            }
        )

    def record_step(self, t, env, action, reward, outcome, info, mask=None, attention=None):
        r = env.robot
        record = {
            "type": "step",
            "t": t,
            "robot": [r.x, r.y, r.theta, r.v, r.omega],
            "humans": [h.position.tolist() + h.velocity.tolist() for h in env.humans],
            "action": int(action),
            "reward": reward,
            "outcome": outcome.value,
            "d_min": info["d_min"],
            "d_goal": info["d_goal"],
        }
        if mask is not None:
            record["mask"] = [int(m) for m in mask]
        if attention is not None:
            record["attention"] = attention
        self._emit(record)
