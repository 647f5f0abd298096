import numpy as np
import pytest

from quadrace.dynamics import QuadrotorParams, QuadrotorState
from quadrace.world import (
    CollisionStatus,
    Obstacle,
    RandomizationSpec,
    Waypoint,
    WorldGenerationError,
    WorldSpec,
    check_collision,
    forest_track,
    generate_forest,
    nearest_obstacle_distances,
    randomize_initial_state,
    randomize_params,
    split_s_world,
    waypoint_passed,
)

PARAMS = QuadrotorParams()


def simple_world(obstacles=(), bounds=((-50.0, -50.0, -50.0), (50.0, 50.0, 50.0))):
    return WorldSpec(
        track=(Waypoint(np.array([5.0, 0.0, 1.0])),),
        obstacles=tuple(obstacles),
        bounds_min=np.array(bounds[0]),
        bounds_max=np.array(bounds[1]),
    )


class TestNearestObstacleDistances:
    def test_inside_obstacle_is_negative(self):
        w = simple_world([Obstacle(np.array([0.0, 0.0, 0.0]), 0.5)])
        d = nearest_obstacle_distances(np.zeros(3), w, 1)
        assert d[0] == pytest.approx(-0.5)

    def test_padding_with_sentinel(self):
        w = simple_world([Obstacle(np.array([1.0, 0.0, 0.0]), 0.5)])
        d = nearest_obstacle_distances(np.zeros(3), w, 2, d_far=100.0)
        np.testing.assert_allclose(d, [0.5, 100.0])

    def test_no_obstacles_all_sentinel(self):
        d = nearest_obstacle_distances(np.zeros(3), simple_world(), 3, d_far=100.0)
        np.testing.assert_array_equal(d, [100.0, 100.0, 100.0])

    def test_matches_brute_force(self):
        # Oracle: scalar per-obstacle distances, stable full sort, pad. The
        # elementary arithmetic matches the contract definition so the
        # comparison is exact.
        import math

        rng = np.random.default_rng(9)
        for _ in range(50):
            n_obs = int(rng.integers(1, 60))
            obstacles = [
                Obstacle(rng.uniform(-20, 20, 3), float(rng.uniform(0.2, 1.5)))
                for _ in range(n_obs)
            ]
            w = simple_world(obstacles)
            p = rng.uniform(-20, 20, 3)
            n = int(rng.integers(1, 8))
            got = nearest_obstacle_distances(p, w, n)

            def surface_distance(o):
                dx = p[0] - o.center[0]
                dy = p[1] - o.center[1]
                dz = p[2] - o.center[2]
                return math.sqrt(dx * dx + dy * dy + dz * dz) - o.radius

            brute = [d for d, _ in sorted((surface_distance(o), i) for i, o in enumerate(obstacles))]
            brute = (brute + [100.0] * n)[:n]
            np.testing.assert_array_equal(got, np.array(brute))


class TestCheckCollision:
    def test_rule_from_geometry(self):
        # d_safe = r + arm + margin = 0.5 + 0.15 + 0.2 = 0.85
        w = simple_world([Obstacle(np.array([1.0, 0.0, 0.0]), 0.5)])
        assert check_collision(np.zeros(3), w, PARAMS) is CollisionStatus.FREE
        assert check_collision(np.array([0.2, 0.0, 0.0]), w, PARAMS) is CollisionStatus.OBSTACLE_HIT

    def test_out_of_bounds(self):
        w = WorldSpec(
            track=(Waypoint(np.array([0.0, 0.0, 1.0])),),
            bounds_min=np.array([-1.0, -1.0, 0.0]),
            bounds_max=np.array([1.0, 1.0, 2.0]),
        )
        assert check_collision(np.array([2.0, 0.0, 1.0]), w, PARAMS) is CollisionStatus.OUT_OF_BOUNDS
        assert check_collision(np.array([1.0, 1.0, 2.0]), w, PARAMS) is CollisionStatus.FREE

    def test_obstacle_takes_precedence(self):
        w = WorldSpec(
            track=(Waypoint(np.array([0.0, 0.0, 1.0])),),
            obstacles=(Obstacle(np.array([2.0, 0.0, 1.0]), 0.5),),
            bounds_min=np.array([-1.0, -1.0, 0.0]),
            bounds_max=np.array([1.5, 1.0, 2.0]),
        )
        p = np.array([1.8, 0.0, 1.0])
        assert check_collision(p, w, PARAMS) is CollisionStatus.OBSTACLE_HIT

    def test_monotone_in_margin(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            obstacle = Obstacle(rng.uniform(-5, 5, 3), 0.5)
            p = rng.uniform(-5, 5, 3)
            eps1, eps2 = sorted(rng.uniform(0.0, 2.0, 2))
            w1 = simple_world([obstacle])
            w1 = WorldSpec(w1.track, w1.obstacles, w1.bounds_min, w1.bounds_max, safety_margin=eps1)
            w2 = WorldSpec(w1.track, w1.obstacles, w1.bounds_min, w1.bounds_max, safety_margin=eps2)
            if check_collision(p, w1, PARAMS) is CollisionStatus.OBSTACLE_HIT:
                assert check_collision(p, w2, PARAMS) is CollisionStatus.OBSTACLE_HIT


class TestWaypointPassed:
    def test_center(self):
        wp = Waypoint(np.array([1.0, 2.0, 3.0]), 0.5)
        assert waypoint_passed(np.array([1.0, 2.0, 3.0]), wp)

    def test_boundary_is_closed(self):
        wp = Waypoint(np.array([0.0, 0.0, 0.0]), 0.5)
        assert waypoint_passed(np.array([0.5, 0.0, 0.0]), wp)
        assert not waypoint_passed(np.array([0.5 + 1e-6, 0.0, 0.0]), wp)


class TestForestTrack:
    def test_table_values(self):
        track = forest_track()
        assert len(track) == 9
        np.testing.assert_array_equal(track[0].center, [-20.0, 0.0, 1.12])
        np.testing.assert_array_equal(track[4].center, [0.0, -10.0, 3.53])
        np.testing.assert_array_equal(track[8].center, [20.0, 0.0, 1.12])


class TestGenerateForest:
    @pytest.mark.parametrize("level,lo,hi", [(1, 4.5, None), (2, 3.0, 5.0), (3, 1.0, 3.0)])
    def test_spacing_band(self, level, lo, hi):
        for seed in range(5):
            w = generate_forest(level, np.random.default_rng(seed))
            spacing = w.min_obstacle_spacing()
            assert spacing >= lo
            if hi is not None:
                assert spacing <= hi

    def test_waypoint_clearance(self):
        w = generate_forest(2, np.random.default_rng(12))
        # surface distance to every waypoint center exceeds d_safe + rho
        assert w.waypoint_obstacle_clearance() >= 0.15 + 0.2 + 0.5

    def test_deterministic(self):
        a = generate_forest(3, np.random.default_rng(77))
        b = generate_forest(3, np.random.default_rng(77))
        np.testing.assert_array_equal(a.obstacle_centers(), b.obstacle_centers())
        assert a.min_obstacle_spacing() == b.min_obstacle_spacing()

    def test_impossible_world_raises(self):
        with pytest.raises(WorldGenerationError):
            generate_forest(1, np.random.default_rng(0), bounds=((-0.5, -0.5, 0.0), (0.5, 0.5, 0.4)))


class TestSplitSWorld:
    def test_layout(self):
        w = split_s_world()
        assert len(w.track) == 7
        assert w.jitter_waypoint is not None
        # one vertically stacked pair: same x/y, different z
        stacked = [
            (i, j)
            for i in range(7)
            for j in range(i + 1, 7)
            if np.allclose(w.track[i].center[:2], w.track[j].center[:2])
            and abs(w.track[i].center[2] - w.track[j].center[2]) > 1.0
        ]
        assert stacked

    def test_obstacles_clear_of_gates(self):
        w = split_s_world()
        assert w.waypoint_obstacle_clearance() >= 0.15 + 0.2 + 0.5


class TestRandomizeInitialState:
    def test_zero_deltas_identity(self):
        spec = RandomizationSpec(position_delta=0.0, velocity_delta=0.0, orientation_delta=0.0)
        base = QuadrotorState.hover(PARAMS, (1.0, 2.0, 3.0))
        rng = np.random.default_rng(0)
        out = randomize_initial_state(base, spec, rng)
        np.testing.assert_array_equal(out.position, base.position)
        np.testing.assert_array_equal(out.velocity, base.velocity)
        np.testing.assert_array_equal(out.attitude, base.attitude)
        np.testing.assert_array_equal(out.body_rate, np.zeros(3))
        np.testing.assert_array_equal(out.rotor_thrusts, base.rotor_thrusts)

    def test_position_bounds(self):
        spec = RandomizationSpec(position_delta=1.0)
        base = QuadrotorState.hover(PARAMS, (0.0, 0.0, 2.0))
        rng = np.random.default_rng(1)
        offsets = np.stack(
            [randomize_initial_state(base, spec, rng).position - base.position for _ in range(10000)]
        )
        assert np.all(np.abs(offsets) <= 1.0)
        assert offsets.max() > 0.9 and offsets.min() < -0.9

    def test_unit_quaternion(self):
        spec = RandomizationSpec(orientation_delta=1.0)
        base = QuadrotorState.hover(PARAMS)
        rng = np.random.default_rng(2)
        for _ in range(200):
            q = randomize_initial_state(base, spec, rng).attitude
            assert abs(np.linalg.norm(q) - 1.0) < 1e-9


class TestRandomizeParams:
    def test_zero_jitter_identity(self):
        spec = RandomizationSpec(param_jitter=0.0)
        out = randomize_params(PARAMS, spec, np.random.default_rng(0))
        np.testing.assert_array_equal(out.drag, PARAMS.drag)
        assert out.torque_const == PARAMS.torque_const
        assert out.arm_length == PARAMS.arm_length

    def test_bounds_and_mean(self):
        spec = RandomizationSpec(param_jitter=0.1)
        rng = np.random.default_rng(3)
        dx = np.array([randomize_params(PARAMS, spec, rng).drag[0] for _ in range(10000)])
        assert np.all(dx >= 0.26 * 0.9) and np.all(dx <= 0.26 * 1.1)
        assert abs(dx.mean() - 0.26) < 0.01 * 0.26

    def test_invariants_preserved(self):
        spec = RandomizationSpec(param_jitter=0.3)
        rng = np.random.default_rng(4)
        for _ in range(50):
            p = randomize_params(PARAMS, spec, rng)
            assert p.arm_length > 0 and p.torque_const > 0
            assert np.all(p.drag >= 0)


class TestWorldSpecValidation:
    def test_waypoint_outside_bounds(self):
        with pytest.raises(ValueError):
            WorldSpec(
                track=(Waypoint(np.array([10.0, 0.0, 1.0])),),
                bounds_min=np.array([-1.0, -1.0, 0.0]),
                bounds_max=np.array([1.0, 1.0, 2.0]),
            )

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            WorldSpec(
                track=(Waypoint(np.array([0.0, 0.0, 1.0])),),
                bounds_min=np.array([1.0, -1.0, 0.0]),
                bounds_max=np.array([-1.0, 1.0, 2.0]),
            )

    def test_empty_track(self):
        with pytest.raises(ValueError):
            WorldSpec(track=())
