"""quadrace: quadrotor racing simulation and safety-aware RL training."""

from .dynamics import (
    BodyCommand,
    QuadrotorParams,
    QuadrotorState,
    SimulationDiverged,
    Wrench,
    body_rate_controller,
    rk4_step,
    state_derivative,
    thrust_allocation,
    wrench_from_thrusts,
)
from .env import (
    EnvConfig,
    EpisodeStatus,
    Outcome,
    RacingEnv,
    RewardBreakdown,
    Scenario,
    VectorEnv,
    observe,
    progress_reward,
    safety_reward,
)
from .networks import PolicyNet, ValueNet, policy_forward, sample_action
from .ppo import PPOConfig, RolloutBuffer, Trainer, compute_gae, gae_scan, ppo_update
from .world import (
    CollisionStatus,
    Obstacle,
    RandomizationSpec,
    Waypoint,
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

__version__ = "0.1.0"

__all__ = [
    "BodyCommand", "QuadrotorParams", "QuadrotorState", "SimulationDiverged", "Wrench",
    "body_rate_controller", "rk4_step", "state_derivative", "thrust_allocation", "wrench_from_thrusts",
    "EnvConfig", "EpisodeStatus", "Outcome", "RacingEnv", "RewardBreakdown", "Scenario", "VectorEnv",
    "observe", "progress_reward", "safety_reward",
    "PolicyNet", "ValueNet", "policy_forward", "sample_action",
    "PPOConfig", "RolloutBuffer", "Trainer", "compute_gae", "gae_scan", "ppo_update",
    "CollisionStatus", "Obstacle", "RandomizationSpec", "Waypoint", "WorldSpec",
    "check_collision", "forest_track", "generate_forest", "nearest_obstacle_distances",
    "randomize_initial_state", "randomize_params", "split_s_world", "waypoint_passed",
    "__version__",
]
