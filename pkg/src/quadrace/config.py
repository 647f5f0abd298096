"""Experiment configuration: parsing, validation, scenario resolution and
world-file serialization.

Config files are flat sectioned YAML. The reward coefficients must be
explicit in every experiment file (no silent defaults), so a frozen config
always re-runs to the same results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dynamics import QuadrotorParams
from .env import EnvConfig, Scenario
from .ppo import PPOConfig
from .world import (
    DEFAULT_FOREST_BOUNDS,
    DEFAULT_OBSTACLE_RADIUS,
    DEFAULT_PASS_RADIUS,
    DEFAULT_SAFETY_MARGIN,
    Obstacle,
    RandomizationSpec,
    Waypoint,
    WorldSpec,
    forest_track,
    generate_forest,
    split_s_world,
)

SCENARIOS = ("split_s_obstacles", "forest_fixed", "forest_randomized", "custom")

REQUIRED_KEYS = (
    ("experiment", "scenario"),
    ("experiment", "seed"),
    ("env", "lambda1"),
    ("env", "lambda2"),
    ("env", "lambda3"),
    ("env", "lambda4"),
    ("env", "r_collision"),
)

EXPERIMENT_DEFAULTS = {
    "eval_trajectories": 1000,
    "n_envs": 100,
    "forest_level": 1,
}

QUADROTOR_DEFAULTS = {
    "mass": 1.0,
    "inertia": [0.0025, 0.0021, 0.0043],
    "arm_length": 0.15,
    "torque_const": 0.022,
    "drag": [0.26, 0.28, 0.42],
    "motor_tau": 0.05,
    "thrust_limits": [0.0, 7.0],
    "gravity": 9.81,
    "body_rate_gains": [20.0, 20.0, 8.0],
}

ENV_DEFAULTS = {
    "control_dt": 0.02,
    "sim_substeps": 5,
    "n_obstacles": 5,
    "lookahead_j": 2,
    "max_episode_time": 30.0,
    "d_far": 100.0,
    "action_ranges": None,
}

RANDOMIZATION_DEFAULTS = {
    "position_delta": 1.0,
    "velocity_delta": 1.0,
    "orientation_delta": 1.0,
    "param_jitter": 0.1,
    "waypoint_jitter": 1.0,
    "forest_level_range": [1, 2, 3],
}

PPO_DEFAULTS = {
    "gamma": 0.99,
    "gae_lambda": 0.95,
    "clip_epsilon": 0.2,
    "learning_rate": 3e-4,
    "rollout_horizon": 256,
    "epochs_per_update": 10,
    "minibatch_size": 2048,
    "entropy_coef": 0.0,
    "value_coef": 0.5,
    "max_grad_norm": 0.5,
    "total_env_steps": 1_000_000,
    "checkpoint_interval": 20,
    "hidden_dim": 128,
}

WORLD_DEFAULTS = {
    "track": None,
    "pass_radius": DEFAULT_PASS_RADIUS,
    "obstacle_radius": DEFAULT_OBSTACLE_RADIUS,
    "obstacles": None,
    "bounds": None,
    "safety_margin": DEFAULT_SAFETY_MARGIN,
    "world_seed": None,
    "start": None,
    "jitter_waypoint": None,
    "forest_target_count": None,
}


class ConfigError(ValueError):
    """Configuration problem; the message names the offending key."""


def load_yaml(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return data


def save_yaml(data: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=False, default_flow_style=None)


def _merge_section(raw: dict, name: str, defaults: dict) -> dict:
    section = raw.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    unknown = set(section) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key in section '{name}': {sorted(unknown)[0]}")
    merged = dict(defaults)
    merged.update(section)
    return merged


@dataclass
class ExperimentConfig:
    scenario: str
    seed: int
    eval_trajectories: int
    n_envs: int
    forest_level: int
    params: QuadrotorParams
    env: EnvConfig
    randomization: RandomizationSpec
    ppo: PPOConfig
    hidden_dim: int
    world_options: dict = field(default_factory=dict)
    effective: dict = field(default_factory=dict)


def parse_experiment(raw: dict) -> ExperimentConfig:
    """Validate a raw config mapping and build the typed experiment config."""
    known_sections = {"experiment", "world", "quadrotor", "env", "randomization", "ppo"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown section: {sorted(unknown)[0]}")
    for section, key in REQUIRED_KEYS:
        if key not in (raw.get(section) or {}):
            raise ConfigError(f"missing required key: {section}.{key}")

    exp = _merge_section(raw, "experiment", {**EXPERIMENT_DEFAULTS, "scenario": None, "seed": None})
    if exp["scenario"] not in SCENARIOS:
        raise ConfigError(f"experiment.scenario must be one of {SCENARIOS}, got {exp['scenario']!r}")
    if int(exp["eval_trajectories"]) < 1:
        raise ConfigError("experiment.eval_trajectories must be at least 1")

    quad = _merge_section(raw, "quadrotor", QUADROTOR_DEFAULTS)
    try:
        params = QuadrotorParams(
            mass=float(quad["mass"]),
            inertia=np.asarray(quad["inertia"], dtype=float),
            arm_length=float(quad["arm_length"]),
            torque_const=float(quad["torque_const"]),
            drag=np.asarray(quad["drag"], dtype=float),
            motor_tau=float(quad["motor_tau"]),
            thrust_limits=tuple(float(v) for v in quad["thrust_limits"]),
            gravity=float(quad["gravity"]),
            body_rate_gains=np.asarray(quad["body_rate_gains"], dtype=float),
        )
    except ValueError as exc:
        raise ConfigError(f"quadrotor: {exc}") from exc

    env_required = {"lambda1": None, "lambda2": None, "lambda3": None, "lambda4": None, "r_collision": None}
    env_section = _merge_section(raw, "env", {**ENV_DEFAULTS, **env_required})
    ranges = env_section["action_ranges"]
    thrust_range = None
    omega_max = 8.0
    if ranges is not None:
        unknown = set(ranges) - {"thrust", "body_rate"}
        if unknown:
            raise ConfigError(f"unknown key in env.action_ranges: {sorted(unknown)[0]}")
        if "thrust" in ranges:
            thrust_range = tuple(float(v) for v in ranges["thrust"])
        if "body_rate" in ranges:
            omega_max = float(ranges["body_rate"])
    try:
        env_cfg = EnvConfig(
            control_dt=float(env_section["control_dt"]),
            sim_substeps=int(env_section["sim_substeps"]),
            lambda1=float(env_section["lambda1"]),
            lambda2=float(env_section["lambda2"]),
            lambda3=float(env_section["lambda3"]),
            lambda4=float(env_section["lambda4"]),
            r_collision=float(env_section["r_collision"]),
            n_obstacles=int(env_section["n_obstacles"]),
            lookahead_j=int(env_section["lookahead_j"]),
            max_episode_time=float(env_section["max_episode_time"]),
            thrust_range=thrust_range,
            omega_max=omega_max,
            d_far=float(env_section["d_far"]),
        )
    except ValueError as exc:
        raise ConfigError(f"env: {exc}") from exc

    rand_section = _merge_section(raw, "randomization", RANDOMIZATION_DEFAULTS)
    try:
        randomization = RandomizationSpec(
            position_delta=float(rand_section["position_delta"]),
            velocity_delta=float(rand_section["velocity_delta"]),
            orientation_delta=float(rand_section["orientation_delta"]),
            param_jitter=float(rand_section["param_jitter"]),
            waypoint_jitter=float(rand_section["waypoint_jitter"]),
            forest_level_range=tuple(rand_section["forest_level_range"]),
        )
    except ValueError as exc:
        raise ConfigError(f"randomization: {exc}") from exc

    ppo_section = _merge_section(raw, "ppo", PPO_DEFAULTS)
    hidden_dim = int(ppo_section.pop("hidden_dim"))
    try:
        ppo = PPOConfig(
            gamma=float(ppo_section["gamma"]),
            gae_lambda=float(ppo_section["gae_lambda"]),
            clip_epsilon=float(ppo_section["clip_epsilon"]),
            learning_rate=float(ppo_section["learning_rate"]),
            rollout_horizon=int(ppo_section["rollout_horizon"]),
            epochs_per_update=int(ppo_section["epochs_per_update"]),
            minibatch_size=int(ppo_section["minibatch_size"]),
            entropy_coef=float(ppo_section["entropy_coef"]),
            value_coef=float(ppo_section["value_coef"]),
            max_grad_norm=float(ppo_section["max_grad_norm"]),
            total_env_steps=int(ppo_section["total_env_steps"]),
            checkpoint_interval=int(ppo_section["checkpoint_interval"]),
        )
    except ValueError as exc:
        raise ConfigError(f"ppo: {exc}") from exc

    world_options = _merge_section(raw, "world", WORLD_DEFAULTS)
    scenario = exp["scenario"]
    if scenario == "custom":
        if world_options["track"] is None:
            raise ConfigError("missing required key: world.track (custom scenario)")
        if world_options["bounds"] is None:
            raise ConfigError("missing required key: world.bounds (custom scenario)")

    cfg = ExperimentConfig(
        scenario=scenario,
        seed=int(exp["seed"]),
        eval_trajectories=int(exp["eval_trajectories"]),
        n_envs=int(exp["n_envs"]),
        forest_level=int(exp["forest_level"]),
        params=params,
        env=env_cfg,
        randomization=randomization,
        ppo=ppo,
        hidden_dim=hidden_dim,
        world_options=world_options,
    )
    cfg.effective = effective_dict(cfg)
    return cfg


def load_experiment(path) -> ExperimentConfig:
    return parse_experiment(load_yaml(path))


def effective_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved config mapping; parsing it again reproduces cfg."""
    p = cfg.params
    env = cfg.env
    r = cfg.randomization
    ppo = cfg.ppo
    world = {k: v for k, v in cfg.world_options.items() if v is not None}
    out = {
        "experiment": {
            "scenario": cfg.scenario,
            "seed": cfg.seed,
            "eval_trajectories": cfg.eval_trajectories,
            "n_envs": cfg.n_envs,
            "forest_level": cfg.forest_level,
        },
        "quadrotor": {
            "mass": p.mass,
            "inertia": [float(v) for v in p.inertia],
            "arm_length": p.arm_length,
            "torque_const": p.torque_const,
            "drag": [float(v) for v in p.drag],
            "motor_tau": p.motor_tau,
            "thrust_limits": [p.thrust_limits[0], p.thrust_limits[1]],
            "gravity": p.gravity,
            "body_rate_gains": [float(v) for v in p.body_rate_gains],
        },
        "env": {
            "control_dt": env.control_dt,
            "sim_substeps": env.sim_substeps,
            "lambda1": env.lambda1,
            "lambda2": env.lambda2,
            "lambda3": env.lambda3,
            "lambda4": env.lambda4,
            "r_collision": env.r_collision,
            "n_obstacles": env.n_obstacles,
            "lookahead_j": env.lookahead_j,
            "max_episode_time": env.max_episode_time,
            "d_far": env.d_far,
            "action_ranges": {
                "thrust": list(env.resolved_thrust_range(p)),
                "body_rate": env.omega_max,
            },
        },
        "randomization": {
            "position_delta": r.position_delta,
            "velocity_delta": r.velocity_delta,
            "orientation_delta": r.orientation_delta,
            "param_jitter": r.param_jitter,
            "waypoint_jitter": r.waypoint_jitter,
            "forest_level_range": list(r.forest_level_range),
        },
        "ppo": {
            "gamma": ppo.gamma,
            "gae_lambda": ppo.gae_lambda,
            "clip_epsilon": ppo.clip_epsilon,
            "learning_rate": ppo.learning_rate,
            "rollout_horizon": ppo.rollout_horizon,
            "epochs_per_update": ppo.epochs_per_update,
            "minibatch_size": ppo.minibatch_size,
            "entropy_coef": ppo.entropy_coef,
            "value_coef": ppo.value_coef,
            "max_grad_norm": ppo.max_grad_norm,
            "total_env_steps": ppo.total_env_steps,
            "checkpoint_interval": ppo.checkpoint_interval,
            "hidden_dim": cfg.hidden_dim,
        },
    }
    if world:
        out["world"] = world
    return out


def _track_from_options(opts: dict) -> tuple[Waypoint, ...] | None:
    if opts["track"] is None:
        return None
    rho = float(opts["pass_radius"])
    track = []
    for entry in opts["track"]:
        entry = list(entry)
        if len(entry) == 4:
            track.append(Waypoint(np.array(entry[:3], dtype=float), float(entry[3])))
        elif len(entry) == 3:
            track.append(Waypoint(np.array(entry, dtype=float), rho))
        else:
            raise ConfigError("world.track entries must be [x, y, z] or [x, y, z, pass_radius]")
    return tuple(track)


def _obstacles_from_options(opts: dict) -> tuple[Obstacle, ...]:
    if opts["obstacles"] is None:
        return ()
    out = []
    for entry in opts["obstacles"]:
        entry = list(entry)
        if len(entry) != 4:
            raise ConfigError("world.obstacles entries must be [x, y, z, r]")
        out.append(Obstacle(np.array(entry[:3], dtype=float), float(entry[3])))
    return tuple(out)


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    """Resolve the scenario's world (or per-reset world generator)."""
    opts = cfg.world_options
    track = _track_from_options(opts)
    bounds = opts["bounds"]
    margin = float(opts["safety_margin"])
    start = None if opts["start"] is None else np.array(opts["start"], dtype=float)

    if cfg.scenario == "split_s_obstacles":
        base = split_s_world(safety_margin=margin)
        world = WorldSpec(
            track=track or base.track,
            obstacles=base.obstacles if opts["obstacles"] is None else _obstacles_from_options(opts),
            bounds_min=np.array(bounds["min"], dtype=float) if bounds else base.bounds_min,
            bounds_max=np.array(bounds["max"], dtype=float) if bounds else base.bounds_max,
            safety_margin=margin,
            jitter_waypoint=(
                base.jitter_waypoint if opts["jitter_waypoint"] is None else int(opts["jitter_waypoint"])
            ),
        )
        return Scenario(cfg.params, cfg.env, cfg.randomization, world=world, start_position=start)

    if cfg.scenario == "custom":
        world = WorldSpec(
            track=track,
            obstacles=_obstacles_from_options(opts),
            bounds_min=np.array(bounds["min"], dtype=float),
            bounds_max=np.array(bounds["max"], dtype=float),
            safety_margin=margin,
            jitter_waypoint=None if opts["jitter_waypoint"] is None else int(opts["jitter_waypoint"]),
        )
        return Scenario(cfg.params, cfg.env, cfg.randomization, world=world, start_position=start)

    forest_kwargs = dict(
        bounds=(
            (np.array(bounds["min"], dtype=float), np.array(bounds["max"], dtype=float))
            if bounds
            else DEFAULT_FOREST_BOUNDS
        ),
        track=track or forest_track(float(opts["pass_radius"])),
        obstacle_radius=float(opts["obstacle_radius"]),
        safety_margin=margin,
        arm_length=cfg.params.arm_length,
        target_count=opts["forest_target_count"],
    )

    if cfg.scenario == "forest_fixed":
        world_seed = opts["world_seed"]
        if world_seed is None:
            world_seed = cfg.seed + 101
        world = generate_forest(cfg.forest_level, np.random.default_rng(int(world_seed)), **forest_kwargs)
        return Scenario(cfg.params, cfg.env, cfg.randomization, world=world, start_position=start)

    # forest_randomized: a fresh forest per episode, level sampled from the
    # randomization range.
    levels = cfg.randomization.forest_level_range

    def generator(rng: np.random.Generator) -> WorldSpec:
        level = int(levels[rng.integers(len(levels))])
        return generate_forest(level, rng, **forest_kwargs)

    return Scenario(cfg.params, cfg.env, cfg.randomization, world_generator=generator, start_position=start)


def world_to_dict(world: WorldSpec) -> dict:
    out = {
        "track": [
            [float(wp.center[0]), float(wp.center[1]), float(wp.center[2]), float(wp.pass_radius)]
            for wp in world.track
        ],
        "obstacles": [
            [float(o.center[0]), float(o.center[1]), float(o.center[2]), float(o.radius)]
            for o in world.obstacles
        ],
        "bounds": {
            "min": [float(v) for v in world.bounds_min],
            "max": [float(v) for v in world.bounds_max],
        },
        "safety_margin": float(world.safety_margin),
    }
    if world.jitter_waypoint is not None:
        out["jitter_waypoint"] = int(world.jitter_waypoint)
    return out


def world_from_dict(d: dict) -> WorldSpec:
    try:
        track = tuple(Waypoint(np.array(e[:3], dtype=float), float(e[3])) for e in d["track"])
        obstacles = tuple(Obstacle(np.array(e[:3], dtype=float), float(e[3])) for e in d.get("obstacles", []))
        return WorldSpec(
            track=track,
            obstacles=obstacles,
            bounds_min=np.array(d["bounds"]["min"], dtype=float),
            bounds_max=np.array(d["bounds"]["max"], dtype=float),
            safety_margin=float(d.get("safety_margin", DEFAULT_SAFETY_MARGIN)),
            jitter_waypoint=d.get("jitter_waypoint"),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"invalid world file: {exc}") from exc


def save_world(world: WorldSpec, path):
    save_yaml(world_to_dict(world), path)


def load_world(path) -> WorldSpec:
    return world_from_dict(load_yaml(path))
