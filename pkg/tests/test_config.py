import numpy as np
import pytest

from quadrace.config import (
    ConfigError,
    build_scenario,
    effective_dict,
    load_world,
    parse_experiment,
    save_world,
    world_from_dict,
    world_to_dict,
)
from quadrace.world import generate_forest, split_s_world


def base_raw(**overrides):
    raw = {
        "experiment": {"scenario": "forest_fixed", "seed": 3, "n_envs": 4, "eval_trajectories": 10},
        "env": {
            "lambda1": 1.0, "lambda2": 0.01, "lambda3": -0.05, "lambda4": -1.0,
            "r_collision": -30.0,
        },
    }
    for key, value in overrides.items():
        raw[key] = value
    return raw


class TestParseExperiment:
    def test_defaults_fill_in(self):
        cfg = parse_experiment(base_raw())
        assert cfg.params.mass == 1.0
        assert cfg.env.lambda3 == -0.05
        assert cfg.ppo.gamma == 0.99
        assert cfg.randomization.position_delta == 1.0
        assert cfg.hidden_dim == 128

    def test_missing_lambda3_named(self):
        raw = base_raw()
        del raw["env"]["lambda3"]
        with pytest.raises(ConfigError, match="lambda3"):
            parse_experiment(raw)

    def test_missing_seed_named(self):
        raw = base_raw()
        del raw["experiment"]["seed"]
        with pytest.raises(ConfigError, match="experiment.seed"):
            parse_experiment(raw)

    def test_unknown_key_rejected(self):
        raw = base_raw()
        raw["env"]["lambda9"] = 1.0
        with pytest.raises(ConfigError, match="lambda9"):
            parse_experiment(raw)

    def test_unknown_scenario_rejected(self):
        raw = base_raw()
        raw["experiment"]["scenario"] = "loop_the_loop"
        with pytest.raises(ConfigError, match="scenario"):
            parse_experiment(raw)

    def test_custom_requires_track_and_bounds(self):
        raw = base_raw()
        raw["experiment"]["scenario"] = "custom"
        with pytest.raises(ConfigError, match="world.track"):
            parse_experiment(raw)
        raw["world"] = {"track": [[0.0, 0.0, 1.0]]}
        with pytest.raises(ConfigError, match="world.bounds"):
            parse_experiment(raw)

    def test_invalid_value_propagates_section(self):
        raw = base_raw()
        raw["env"]["lambda3"] = 0.5
        with pytest.raises(ConfigError, match="env"):
            parse_experiment(raw)

    def test_effective_round_trip(self):
        cfg = parse_experiment(base_raw())
        again = parse_experiment(effective_dict(cfg))
        assert effective_dict(again) == effective_dict(cfg)


class TestBuildScenario:
    def test_forest_fixed_deterministic(self):
        cfg = parse_experiment(base_raw())
        a = build_scenario(cfg)
        b = build_scenario(cfg)
        np.testing.assert_array_equal(a.world.obstacle_centers(), b.world.obstacle_centers())

    def test_forest_randomized_generator(self):
        raw = base_raw()
        raw["experiment"]["scenario"] = "forest_randomized"
        raw["randomization"] = {"forest_level_range": [1]}
        scenario = build_scenario(parse_experiment(raw))
        assert scenario.world is None
        w1 = scenario.world_generator(np.random.default_rng(0))
        w2 = scenario.world_generator(np.random.default_rng(0))
        np.testing.assert_array_equal(w1.obstacle_centers(), w2.obstacle_centers())

    def test_split_s_default(self):
        raw = base_raw()
        raw["experiment"]["scenario"] = "split_s_obstacles"
        scenario = build_scenario(parse_experiment(raw))
        assert len(scenario.world.track) == 7
        assert scenario.world.jitter_waypoint is not None

    def test_custom_world(self):
        raw = base_raw()
        raw["experiment"]["scenario"] = "custom"
        raw["world"] = {
            "track": [[0.0, 0.0, 1.5], [4.0, 0.0, 1.5, 0.4]],
            "bounds": {"min": [-5.0, -5.0, 0.0], "max": [8.0, 5.0, 4.0]},
            "obstacles": [[2.0, 1.0, 1.5, 0.5]],
            "start": [0.0, 0.0, 1.5],
        }
        scenario = build_scenario(parse_experiment(raw))
        assert len(scenario.world.track) == 2
        assert scenario.world.track[1].pass_radius == 0.4
        assert len(scenario.world.obstacles) == 1
        np.testing.assert_array_equal(scenario.start_position, [0.0, 0.0, 1.5])

    def test_forest_track_override(self):
        raw = base_raw()
        raw["world"] = {
            "track": [[-20.0, 0.0, 1.12], [-15.0, -5.0, 1.12]],
            "bounds": {"min": [-25.0, -10.0, 0.0], "max": [-10.0, 5.0, 6.0]},
        }
        scenario = build_scenario(parse_experiment(raw))
        assert len(scenario.world.track) == 2
        assert len(scenario.world.obstacles) >= 2


class TestWorldSerialization:
    def test_round_trip(self, tmp_path):
        world = generate_forest(2, np.random.default_rng(4))
        path = tmp_path / "world.yaml"
        save_world(world, path)
        loaded = load_world(path)
        np.testing.assert_array_equal(world.obstacle_centers(), loaded.obstacle_centers())
        np.testing.assert_array_equal(world.track_centers(), loaded.track_centers())
        np.testing.assert_array_equal(world.bounds_min, loaded.bounds_min)
        assert world.safety_margin == loaded.safety_margin

    def test_jitter_flag_round_trip(self):
        world = split_s_world()
        d = world_to_dict(world)
        assert d["jitter_waypoint"] == world.jitter_waypoint
        again = world_from_dict(d)
        assert again.jitter_waypoint == world.jitter_waypoint

    def test_byte_identical_files(self, tmp_path):
        a = generate_forest(1, np.random.default_rng(11))
        b = generate_forest(1, np.random.default_rng(11))
        save_world(a, tmp_path / "a.yaml")
        save_world(b, tmp_path / "b.yaml")
        assert (tmp_path / "a.yaml").read_bytes() == (tmp_path / "b.yaml").read_bytes()

    def test_invalid_world_file(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("track: 3\n")
        with pytest.raises(ConfigError):
            load_world(tmp_path / "bad.yaml")
