import math

import numpy as np
import pytest

from crowdnav import crowd
from crowdnav import geometry as geo


def empty_map(half_width=6.0):
    return geo.MapModel((), (-half_width, -half_width, half_width, half_width))


def make_human(pos, vel=(0.0, 0.0), goal=(0.0, 0.0), reactive=False):
    return crowd.HumanAgent(
        position=np.array(pos, dtype=float),
        velocity=np.array(vel, dtype=float),
        goal=np.array(goal, dtype=float),
        reactive_to_robot=reactive,
    )


def circle_crossing(n, rng, circle_radius=4.0, min_gap=0.7):
    humans = []
    while len(humans) < n:
        angle = rng.uniform(0, 2 * math.pi)
        jitter = rng.uniform(-math.radians(15), math.radians(15))
        start = circle_radius * np.array([math.cos(angle), math.sin(angle)])
        if any(np.hypot(*(start - h.position)) < min_gap for h in humans):
            continue
        goal_angle = angle + math.pi + jitter
        goal = circle_radius * np.array([math.cos(goal_angle), math.sin(goal_angle)])
        humans.append(make_human(start, goal=goal))
    return humans


# ---------------------------------------------------------------------------
# half-plane construction
# ---------------------------------------------------------------------------


def test_no_neighbors_no_obstacles_empty():
    h = make_human((0, 0), goal=(1, 0))
    planes = crowd.compute_orca_halfplanes(h, [], None, crowd.OrcaParams())
    assert planes == []


def test_far_neighbors_filtered():
    h = make_human((0, 0))
    other = make_human((10.0, 0.0))
    planes = crowd.compute_orca_halfplanes(h, [other.as_view()], None, crowd.OrcaParams())
    assert planes == []


def test_stationary_pair_normal_parallel_to_center_line():
    h = make_human((0, 0))
    other = make_human((2.0, 0.0))
    planes = crowd.compute_orca_halfplanes(
        h, [other.as_view()], None, crowd.OrcaParams(time_horizon_agents=2.0)
    )
    assert len(planes) == 1
    normal = planes[0].normal
    # parallel to the center line (x axis), pointing away from the other agent
    assert abs(normal[1]) < 1e-12
    assert normal[0] == pytest.approx(-1.0)


def test_overlapping_agents_fallback_separates():
    h = make_human((0, 0))
    other = make_human((0.3, 0.0))  # overlap: distance 0.3 < 0.6
    planes = crowd.compute_orca_halfplanes(h, [other.as_view()], None, crowd.OrcaParams())
    assert len(planes) == 1
    v = crowd.solve_velocity_lp(planes, np.zeros(2), 0.5)
    # resulting velocity must push away from the other agent
    assert v[0] < 0


def test_wall_constraint_prevents_penetration_fine_timestep():
    # long wall at x = 1 (left edge of a thick slab); agent driving straight in
    wall = geo.Polygon(np.array([[1.0, -8.0], [3.0, -8.0], [3.0, 8.0], [1.0, 8.0]]))
    model = geo.MapModel((wall,), (-10, -10, 10, 10))
    params = crowd.OrcaParams(dt=0.025)  # dt/10 oracle
    human = make_human((0.6, 0.0), goal=(2.0, 0.0))
    humans = [human]
    rng = np.random.default_rng(0)
    for _ in range(400):
        humans = crowd.step_humans(humans, None, model, params, rng)
        gap = 1.0 - humans[0].position[0]
        assert gap >= humans[0].radius - 1e-9, f"wall penetrated, gap={gap}"


# ---------------------------------------------------------------------------
# velocity LP
# ---------------------------------------------------------------------------


def test_lp_unconstrained_returns_pref():
    v = crowd.solve_velocity_lp([], np.array([0.2, -0.1]), 0.5)
    np.testing.assert_allclose(v, [0.2, -0.1])


def test_lp_scales_fast_pref_to_disc():
    v = crowd.solve_velocity_lp([], np.array([3.0, 4.0]), 0.5)
    np.testing.assert_allclose(v, [0.3, 0.4], atol=1e-12)


def brute_force_lp(halfplanes, pref, max_speed, resolution=1e-3):
    """Grid search over the speed disc; None when no grid point is feasible."""
    lin = np.arange(-max_speed, max_speed + resolution, resolution)
    gx, gy = np.meshgrid(lin, lin)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    ok = np.hypot(pts[:, 0], pts[:, 1]) <= max_speed
    for hp in halfplanes:
        ok &= (pts - hp.point) @ hp.normal >= 0
    candidates = pts[ok]
    if len(candidates) == 0:
        return None
    d = np.hypot(candidates[:, 0] - pref[0], candidates[:, 1] - pref[1])
    return candidates[np.argmin(d)]


def brute_force_min_max_violation(halfplanes, max_speed, resolution=2e-3):
    lin = np.arange(-max_speed, max_speed + resolution, resolution)
    gx, gy = np.meshgrid(lin, lin)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts = pts[np.hypot(pts[:, 0], pts[:, 1]) <= max_speed]
    worst = np.full(len(pts), -np.inf)
    for hp in halfplanes:
        worst = np.maximum(worst, -((pts - hp.point) @ hp.normal))
    return float(worst.min())


@pytest.mark.parametrize("seed", range(5))
def test_lp_single_halfplane_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=2)
    normal /= np.hypot(*normal)
    hp = crowd.HalfPlane(point=0.1 * normal, normal=normal)
    pref = -0.3 * normal + 0.1 * np.array([-normal[1], normal[0]])
    got = crowd.solve_velocity_lp([hp], pref, 0.5)
    expected = brute_force_lp([hp], pref, 0.5)
    # grid oracle: the solver may not do better than the best grid point
    assert np.hypot(*(got - pref)) <= np.hypot(*(expected - pref)) + 1e-9
    assert hp.violation(got) <= 1e-9
    # analytic: orthogonal projection onto the boundary
    overshoot = float((pref - hp.point) @ hp.normal)
    proj = pref - overshoot * hp.normal
    np.testing.assert_allclose(got, proj, atol=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_lp_multiple_halfplanes_matches_grid_search(seed):
    rng = np.random.default_rng(100 + seed)
    planes = []
    for _ in range(rng.integers(2, 5)):
        normal = rng.normal(size=2)
        normal /= np.hypot(*normal)
        planes.append(crowd.HalfPlane(point=rng.uniform(-0.2, 0.1) * normal, normal=normal))
    pref = rng.uniform(-0.5, 0.5, size=2)
    got = crowd.solve_velocity_lp(planes, pref, 0.5)
    expected = brute_force_lp(planes, pref, 0.5)
    if expected is not None:
        assert np.hypot(*(got - pref)) <= np.hypot(*(expected - pref)) + 1e-9
        assert all(hp.violation(got) <= 1e-9 for hp in planes)
    else:
        # infeasible system: result minimizes the worst violation
        worst_got = max(hp.violation(got) for hp in planes)
        assert worst_got <= brute_force_min_max_violation(planes, 0.5) + 1e-6


def test_lp_infeasible_minimizes_max_violation():
    # two opposing half-planes that cannot both be satisfied
    planes = [
        crowd.HalfPlane(point=np.array([0.4, 0.0]), normal=np.array([1.0, 0.0])),
        crowd.HalfPlane(point=np.array([-0.4, 0.0]), normal=np.array([-1.0, 0.0])),
    ]
    got = crowd.solve_velocity_lp(planes, np.array([0.0, 0.0]), 0.5)
    worst = max(hp.violation(got) for hp in planes)
    # best possible max-violation is 0.4 (sit in the middle)
    assert worst == pytest.approx(0.4, abs=1e-6)


def test_lp_rejects_bad_max_speed():
    with pytest.raises(ValueError):
        crowd.solve_velocity_lp([], np.zeros(2), 0.0)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def test_human_at_goal_gets_new_goal_and_zero_pref():
    rng = np.random.default_rng(1)
    human = make_human((1.0, 1.0), goal=(1.0, 1.0))
    stepped = crowd.step_humans([human], None, empty_map(), crowd.OrcaParams(), rng)
    assert np.allclose(stepped[0].position, [1.0, 1.0])
    assert np.allclose(stepped[0].velocity, [0.0, 0.0])
    assert not np.allclose(stepped[0].goal, [1.0, 1.0])


def test_head_on_pair_keeps_clearance_fine_timestep():
    params = crowd.OrcaParams(dt=0.025)
    humans = [
        make_human((-2.0, 0.0), goal=(2.0, 0.0)),
        make_human((2.0, 0.001), goal=(-2.0, 0.001)),
    ]
    rng = np.random.default_rng(0)
    min_dist = math.inf
    for _ in range(int(12.0 / params.dt)):
        humans = crowd.step_humans(humans, None, empty_map(), params, rng)
        min_dist = min(min_dist, float(np.hypot(*(humans[0].position - humans[1].position))))
    assert min_dist >= 0.6


def test_nonreactive_human_ignores_robot():
    params = crowd.OrcaParams()
    robot = crowd.AgentView(np.array([1.0, 0.0]), np.zeros(2), 0.3)
    rng1, rng2 = np.random.default_rng(5), np.random.default_rng(5)
    humans = [make_human((0.0, 0.0), goal=(3.0, 0.0), reactive=False)]
    with_robot = crowd.step_humans(list(humans), robot, empty_map(), params, rng1)
    without_robot = crowd.step_humans(list(humans), None, empty_map(), params, rng2)
    assert np.array_equal(with_robot[0].position, without_robot[0].position)
    assert np.array_equal(with_robot[0].velocity, without_robot[0].velocity)
    # and the non-reactive human may overlap the robot eventually
    rng = np.random.default_rng(6)
    state = list(humans)
    min_gap = math.inf
    for _ in range(60):
        state = crowd.step_humans(state, robot, empty_map(), params, rng)
        min_gap = min(min_gap, float(np.hypot(*(state[0].position - robot.position))))
    assert min_gap < 0.6


def test_reactive_human_avoids_robot():
    params = crowd.OrcaParams()
    robot = crowd.AgentView(np.array([1.5, 0.0]), np.zeros(2), 0.3)
    state = [make_human((0.0, 0.0), goal=(3.0, 0.0), reactive=True)]
    rng = np.random.default_rng(7)
    for _ in range(80):
        state = crowd.step_humans(state, robot, empty_map(), params, rng)
        gap = float(np.hypot(*(state[0].position - robot.position)))
        assert gap >= 0.6 - 1e-9


def test_robot_deletion_identical_for_nonreactive_crowd():
    params = crowd.OrcaParams()
    rng_a, rng_b = np.random.default_rng(11), np.random.default_rng(11)
    humans = circle_crossing(3, np.random.default_rng(2))
    robot = crowd.AgentView(np.array([0.0, 0.0]), np.array([0.1, 0.0]), 0.3)
    a = list(humans)
    b = list(humans)
    for _ in range(100):
        a = crowd.step_humans(a, robot, empty_map(), params, rng_a)
        b = crowd.step_humans(b, None, empty_map(), params, rng_b)
    for ha, hb in zip(a, b):
        assert np.array_equal(ha.position, hb.position)
        assert np.array_equal(ha.velocity, hb.velocity)
        assert np.array_equal(ha.goal, hb.goal)


def test_step_humans_deterministic():
    params = crowd.OrcaParams()
    humans = circle_crossing(4, np.random.default_rng(3))
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(42)
        state = list(humans)
        for _ in range(50):
            state = crowd.step_humans(state, None, empty_map(), params, rng)
        runs.append(state)
    for ha, hb in zip(*runs):
        assert np.array_equal(ha.position, hb.position)


def test_speed_never_exceeds_limit():
    params = crowd.OrcaParams()
    humans = circle_crossing(4, np.random.default_rng(4))
    rng = np.random.default_rng(8)
    for _ in range(80):
        humans = crowd.step_humans(humans, None, empty_map(), params, rng)
        for h in humans:
            assert float(np.hypot(*h.velocity)) <= h.max_speed


def test_circle_crossing_episodes_no_collisions():
    params = crowd.OrcaParams()
    for seed in range(20):
        humans = circle_crossing(4, np.random.default_rng(1000 + seed))
        rng = np.random.default_rng(seed)
        for _ in range(100):
            humans = crowd.step_humans(humans, None, empty_map(), params, rng)
            for i in range(len(humans)):
                for j in range(i + 1, len(humans)):
                    gap = float(np.hypot(*(humans[i].position - humans[j].position)))
                    assert gap >= humans[i].radius + humans[j].radius, (seed, i, j, gap)


def test_human_speed_cap_validated():
    with pytest.raises(ValueError):
        crowd.HumanAgent(np.zeros(2), np.zeros(2), np.zeros(2), max_speed=0.9)
