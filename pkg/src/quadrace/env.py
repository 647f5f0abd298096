"""Racing MDP: observation assembly, reward shaping, episode lifecycle and a
vectorized multi-environment stepper.

Per control step the environment decodes the normalized action into a
collective-thrust / body-rate command, runs the low-level rate loop once,
integrates ``sim_substeps`` RK4 steps, then advances waypoint passage, checks
collisions and assembles the three reward components:

  progress  lambda1 * (|g - p_prev| - |g - p|) - lambda2 * |omega|
  safety    lambda3 * sum_i exp(-d_i)           (d_i surface distances)
  terminal  r_collision on crash, lambda4 * T on completion, else 0

``VectorEnv`` batches K environments through the same elementwise kernels a
single environment uses, so vectorized stepping is bit-identical to stepping
each environment alone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import (
    ParamsBatch,
    QuadrotorParams,
    QuadrotorState,
    StateBatch,
    _rate_control_batch,
    _rk4_batch,
    quat_to_rotmat_flat,
)
from .world import (
    DEFAULT_D_FAR,
    RandomizationSpec,
    WorldSpec,
    masked_surface_distances,
    nearest_from_masked,
    randomize_initial_state,
    randomize_params,
    surface_distances_batch,
)


@dataclass(frozen=True)
class EnvConfig:
    """Reward coefficients, observation sizes and control-loop timing."""

    control_dt: float = 0.02
    sim_substeps: int = 5
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = -0.05
    lambda4: float = -1.0
    r_collision: float = -30.0
    n_obstacles: int = 5
    lookahead_j: int = 2
    max_episode_time: float = 30.0
    thrust_range: tuple[float, float] | None = None
    omega_max: float = 8.0
    d_far: float = DEFAULT_D_FAR

    def __post_init__(self):
        if self.control_dt <= 0 or self.sim_substeps < 1:
            raise ValueError("control_dt must be positive and sim_substeps >= 1")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be non-negative")
        if self.lambda3 > 0:
            raise ValueError("lambda3 must be non-positive")
        if self.lambda4 > 0:
            raise ValueError("lambda4 must be non-positive")
        if self.r_collision >= 0:
            raise ValueError("r_collision must be negative")
        if self.lookahead_j < 1 or self.n_obstacles < 1:
            raise ValueError("lookahead_j and n_obstacles must be at least 1")
        if self.max_episode_time <= 0:
            raise ValueError("max_episode_time must be positive")
        if self.thrust_range is not None:
            lo, hi = self.thrust_range
            if not (0.0 <= lo < hi):
                raise ValueError("thrust_range must satisfy 0 <= low < high")
            object.__setattr__(self, "thrust_range", (float(lo), float(hi)))

    def resolved_thrust_range(self, params: QuadrotorParams) -> tuple[float, float]:
        """Default command range: 5% to 100% of the summed rotor limit."""
        if self.thrust_range is not None:
            return self.thrust_range
        total = 4.0 * params.thrust_limits[1]
        return (0.05 * total, total)

    def observation_dim(self) -> int:
        return 18 + 3 * self.lookahead_j + self.n_obstacles


class Outcome(enum.Enum):
    RUNNING = "Running"
    COLLIDED = "Collided"
    COMPLETED = "Completed"
    TIMEOUT = "Timeout"
    ABORTED = "Aborted"


_OUTCOME_CODES = {o: i for i, o in enumerate(Outcome)}
_CODE_OUTCOMES = {i: o for o, i in _OUTCOME_CODES.items()}


@dataclass(frozen=True)
class EpisodeStatus:
    outcome: Outcome
    elapsed_time: float
    next_waypoint_index: int
    completion_time: float | None = None

    @property
    def terminal(self) -> bool:
        return self.outcome is not Outcome.RUNNING


@dataclass(frozen=True)
class RewardBreakdown:
    progress: float
    safety: float
    terminal: float
    total: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.total is None:
            object.__setattr__(self, "total", self.progress + self.safety + self.terminal)


@dataclass
class Scenario:
    """Everything needed to instantiate environments for one experiment."""

    params: QuadrotorParams
    env_config: EnvConfig
    randomization: RandomizationSpec
    world: WorldSpec | None = None
    world_generator: Callable[[np.random.Generator], WorldSpec] | None = None
    start_position: np.ndarray | None = None

    def __post_init__(self):
        if (self.world is None) == (self.world_generator is None):
            raise ValueError("provide exactly one of world or world_generator")
        if self.start_position is not None:
            self.start_position = np.asarray(self.start_position, dtype=np.float64)


def decode_action(action, config: EnvConfig, params: QuadrotorParams):
    """Normalized [-1, 1]^4 action -> (collective thrust N, body-rate setpoint)."""
    u = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    lo, hi = config.resolved_thrust_range(params)
    f_total = lo + (u[..., 0] + 1.0) * 0.5 * (hi - lo)
    omega = u[..., 1:4] * config.omega_max
    return f_total, omega


def progress_reward(target, p_prev, p, body_rate, config: EnvConfig) -> float:
    """Distance-made-good toward the current gate minus the body-rate penalty."""
    g = np.asarray(target, dtype=np.float64)
    d_prev = g - np.asarray(p_prev, dtype=np.float64)
    d_now = g - np.asarray(p, dtype=np.float64)
    w = np.asarray(body_rate, dtype=np.float64)
    gain = np.sqrt(d_prev @ d_prev) - np.sqrt(d_now @ d_now)
    return float(config.lambda1 * gain - config.lambda2 * np.sqrt(w @ w))


def safety_reward(distances, config: EnvConfig) -> float:
    """Exponential proximity penalty over the observed obstacle distances."""
    d = np.asarray(distances, dtype=np.float64)
    if d.shape != (config.n_obstacles,):
        raise ValueError(f"expected {config.n_obstacles} distances, got shape {d.shape}")
    return float(config.lambda3 * np.sum(np.exp(-d)))


@dataclass
class StepBatch:
    """Outputs of one vectorized control step, one row per environment."""

    obs: np.ndarray
    progress: np.ndarray
    safety: np.ndarray
    terminal: np.ndarray
    total: np.ndarray
    outcome_codes: np.ndarray
    elapsed: np.ndarray
    next_waypoint: np.ndarray
    completion_time: np.ndarray
    episode_reward: np.ndarray  # cumulative reward of the episode this step ends or continues

    @property
    def done(self) -> np.ndarray:
        return self.outcome_codes != _OUTCOME_CODES[Outcome.RUNNING]

    def status(self, k: int) -> EpisodeStatus:
        outcome = _CODE_OUTCOMES[int(self.outcome_codes[k])]
        t = float(self.completion_time[k])
        return EpisodeStatus(
            outcome=outcome,
            elapsed_time=float(self.elapsed[k]),
            next_waypoint_index=int(self.next_waypoint[k]),
            completion_time=None if np.isnan(t) else t,
        )

    def reward(self, k: int) -> RewardBreakdown:
        return RewardBreakdown(
            float(self.progress[k]), float(self.safety[k]), float(self.terminal[k]), float(self.total[k])
        )


class VectorEnv:
    """K racing environments stepped in lockstep through batched kernels.

    Each environment owns an independent random generator; resets consume
    only that generator, so results per slot do not depend on the batch
    width. With ``auto_reset`` a terminal environment is reset immediately
    and its slot carries the fresh observation alongside the terminal
    record.
    """

    def __init__(self, scenario: Scenario, n_envs: int = 1, seed=0, auto_reset: bool = True):
        self.scenario = scenario
        self.cfg = scenario.env_config
        self.n_envs = int(n_envs)
        self.auto_reset = auto_reset
        if isinstance(seed, (list, tuple)):
            # Explicit per-environment seed sequences; slot i behaves exactly
            # like slot i of any other batch built from the same sequences.
            if len(seed) != self.n_envs:
                raise ValueError("need one seed sequence per environment")
            children = list(seed)
        else:
            root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
            children = root.spawn(self.n_envs)
        self.seed_sequences = children
        self._rngs = [np.random.Generator(np.random.PCG64(ss)) for ss in children]

        self._calibrated = scenario.params
        self._thrust_lo, self._thrust_hi = self.cfg.resolved_thrust_range(scenario.params)
        self._sub_dt = self.cfg.control_dt / self.cfg.sim_substeps

        n = self.n_envs
        self._state = StateBatch.zeros(n)
        self._par = ParamsBatch([scenario.params] * n)
        self.worlds: list[WorldSpec] = [None] * n  # type: ignore[list-item]
        self._next_idx = np.zeros(n, dtype=np.int64)
        self._steps = np.zeros(n, dtype=np.int64)
        self._ep_reward = np.zeros(n)
        self._track_c = None
        self._track_r = None
        self._obst_c = None
        self._obst_r = None
        self._obst_valid = None
        self._bounds_lo = np.zeros((n, 3))
        self._bounds_hi = np.zeros((n, 3))
        self._margin = np.zeros(n)
        self._ready = False

    @property
    def observation_dim(self) -> int:
        return self.cfg.observation_dim()

    def _alloc_world_arrays(self, track_len: int, obst_cap: int):
        n = self.n_envs
        self._track_c = np.zeros((n, track_len, 3))
        self._track_r = np.zeros((n, track_len))
        self._obst_c = np.full((n, obst_cap, 3), 1e9)
        self._obst_r = np.zeros((n, obst_cap))
        self._obst_valid = np.zeros((n, obst_cap), dtype=bool)

    def _install_world(self, k: int, world: WorldSpec):
        track_c = world.track_centers()
        if self._track_c is None or self._track_c.shape[1] != len(world.track):
            if self._track_c is not None and self._track_c.shape[1] != len(world.track):
                raise ValueError("all environments in a batch must share the track length")
            self._alloc_world_arrays(len(world.track), max(len(world.obstacles), 1))
        m = len(world.obstacles)
        if m > self._obst_c.shape[1]:
            grow = max(m, self._obst_c.shape[1] * 2)
            c = np.full((self.n_envs, grow, 3), 1e9)
            r = np.zeros((self.n_envs, grow))
            v = np.zeros((self.n_envs, grow), dtype=bool)
            old = self._obst_c.shape[1]
            c[:, :old] = self._obst_c
            r[:, :old] = self._obst_r
            v[:, :old] = self._obst_valid
            self._obst_c, self._obst_r, self._obst_valid = c, r, v
        self._track_c[k] = track_c
        self._track_r[k] = world.track_radii()
        self._obst_c[k] = 1e9
        self._obst_r[k] = 0.0
        self._obst_valid[k] = False
        if m:
            self._obst_c[k, :m] = world.obstacle_centers()
            self._obst_r[k, :m] = world.obstacle_radii()
            self._obst_valid[k, :m] = True
        self._bounds_lo[k] = world.bounds_min
        self._bounds_hi[k] = world.bounds_max
        self._margin[k] = world.safety_margin
        self.worlds[k] = world

    def _reset_env(self, k: int):
        rng = self._rngs[k]
        rspec = self.scenario.randomization
        params = randomize_params(self._calibrated, rspec, rng)
        if self.scenario.world is not None:
            world = self.scenario.world
        else:
            world = self.scenario.world_generator(rng)
        if world.jitter_waypoint is not None and rspec.waypoint_jitter > 0:
            wp = world.track[world.jitter_waypoint]
            center = wp.center + rng.uniform(-rspec.waypoint_jitter, rspec.waypoint_jitter, 3)
            center = np.clip(center, world.bounds_min + 1e-6, world.bounds_max - 1e-6)
            world = world.with_waypoint(world.jitter_waypoint, center)
        start = self.scenario.start_position
        if start is None:
            start = world.track[0].center
        base = QuadrotorState.hover(params, start)
        state = randomize_initial_state(base, rspec, rng)
        self._par.set_row(k, params)
        self._install_world(k, world)
        self._state.set_row(k, state)
        self._next_idx[k] = 0
        self._steps[k] = 0
        self._ep_reward[k] = 0.0

    def reset(self) -> np.ndarray:
        """Reset every environment; returns the initial observations (K, D)."""
        for k in range(self.n_envs):
            self._reset_env(k)
        self._ready = True
        return self._observe()

    def _observe(self, dists: np.ndarray | None = None) -> np.ndarray:
        cfg = self.cfg
        n = self.n_envs
        track_len = self._track_c.shape[1]
        rot = quat_to_rotmat_flat(self._state.q)
        idx = np.clip(
            self._next_idx[:, None] + np.arange(cfg.lookahead_j)[None, :], 0, track_len - 1
        )
        lookahead = self._track_c[np.arange(n)[:, None], idx].reshape(n, 3 * cfg.lookahead_j)
        if dists is None:
            dists = surface_distances_batch(
                self._state.p, self._obst_c, self._obst_r, self._obst_valid, cfg.n_obstacles, cfg.d_far
            )
        return np.concatenate(
            [self._state.p, rot, self._state.v, self._state.w, lookahead, dists], axis=1
        )

    def observe(self, k: int = 0) -> np.ndarray:
        """Current observation of environment k."""
        return self._observe()[k]

    def step(self, actions) -> StepBatch:
        """Advance every environment one control period."""
        if not self._ready:
            raise RuntimeError("call reset() before step()")
        cfg = self.cfg
        n = self.n_envs
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (n, 4):
            raise ValueError(f"actions must have shape ({n}, 4), got {actions.shape}")
        u = np.clip(actions, -1.0, 1.0)
        f_total = self._thrust_lo + (u[:, 0] + 1.0) * 0.5 * (self._thrust_hi - self._thrust_lo)
        omega_des = u[:, 1:4] * cfg.omega_max

        p_prev = self._state.p.copy()
        f_des = _rate_control_batch(self._state, f_total, omega_des, self._par)
        state = self._state
        for _ in range(cfg.sim_substeps):
            state = _rk4_batch(state, f_des, self._sub_dt, self._par)
        self._state = state

        finite = (
            np.all(np.isfinite(state.p), axis=1)
            & np.all(np.isfinite(state.v), axis=1)
            & np.all(np.isfinite(state.q), axis=1)
            & np.all(np.isfinite(state.w), axis=1)
        )
        aborted = ~finite
        if np.any(aborted):
            # Quarantine diverged rows so the shared kernels stay finite.
            rows = np.where(aborted)[0]
            state.p[rows] = 0.0
            state.v[rows] = 0.0
            state.q[rows] = np.array([1.0, 0.0, 0.0, 0.0])
            state.w[rows] = 0.0
            state.f[rows] = 0.0

        p = state.p
        ar = np.arange(n)

        # Progress toward the pre-advancement target, with the realized body
        # rate after the step as the penalty term.
        g = self._track_c[ar, self._next_idx]
        d_prev = g - p_prev
        d_now = g - p
        dist_prev = np.sqrt(d_prev[:, 0] ** 2 + d_prev[:, 1] ** 2 + d_prev[:, 2] ** 2)
        dist_now = np.sqrt(d_now[:, 0] ** 2 + d_now[:, 1] ** 2 + d_now[:, 2] ** 2)
        w_norm = np.sqrt(state.w[:, 0] ** 2 + state.w[:, 1] ** 2 + state.w[:, 2] ** 2)
        r_progress = cfg.lambda1 * (dist_prev - dist_now) - cfg.lambda2 * w_norm

        # Waypoint passage, possibly several gates in one step.
        track_len = self._track_c.shape[1]
        while True:
            active = (self._next_idx < track_len) & finite
            if not np.any(active):
                break
            cur = self._track_c[ar, np.minimum(self._next_idx, track_len - 1)]
            diff = cur - p
            dist = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2)
            radius = self._track_r[ar, np.minimum(self._next_idx, track_len - 1)]
            passed = active & (dist <= radius)
            if not np.any(passed):
                break
            self._next_idx[passed] += 1
        completed = self._next_idx >= track_len

        # Collision: any obstacle center closer than r + arm + margin, or
        # leaving the bounds box. Obstacle hits and bound violations both
        # terminate as a collision.
        surf = masked_surface_distances(p, self._obst_c, self._obst_r, self._obst_valid)
        threshold = (self._par.arm_length + self._margin)[:, None]
        obstacle_hit = np.any(surf < threshold, axis=1)
        oob = np.any(p < self._bounds_lo, axis=1) | np.any(p > self._bounds_hi, axis=1)
        collided = (obstacle_hit | oob) & ~aborted

        self._steps += 1
        elapsed = self._steps * cfg.control_dt

        dists = nearest_from_masked(surf, cfg.n_obstacles, cfg.d_far)
        r_safety = cfg.lambda3 * np.sum(np.exp(-dists), axis=1)

        r_progress = np.where(aborted, 0.0, r_progress)
        r_safety = np.where(aborted, 0.0, r_safety)

        timeout = elapsed >= cfg.max_episode_time

        outcome = np.zeros(n, dtype=np.int8)
        outcome[timeout] = _OUTCOME_CODES[Outcome.TIMEOUT]
        outcome[completed] = _OUTCOME_CODES[Outcome.COMPLETED]
        outcome[collided] = _OUTCOME_CODES[Outcome.COLLIDED]
        outcome[aborted] = _OUTCOME_CODES[Outcome.ABORTED]

        completed_clean = outcome == _OUTCOME_CODES[Outcome.COMPLETED]
        r_terminal = np.zeros(n)
        r_terminal[collided] = cfg.r_collision
        r_terminal[completed_clean] = cfg.lambda4 * elapsed[completed_clean]
        total = r_progress + r_safety + r_terminal
        self._ep_reward += total

        completion_time = np.full(n, np.nan)
        completion_time[completed_clean] = elapsed[completed_clean]

        result = StepBatch(
            obs=self._observe(dists),
            progress=r_progress,
            safety=r_safety,
            terminal=r_terminal,
            total=total,
            outcome_codes=outcome,
            elapsed=elapsed,
            next_waypoint=self._next_idx.copy(),
            completion_time=completion_time,
            episode_reward=self._ep_reward.copy(),
        )
        if self.auto_reset:
            done = outcome != _OUTCOME_CODES[Outcome.RUNNING]
            for k in np.where(done)[0]:
                self._reset_env(int(k))
            if np.any(done):
                fresh = self._observe()
                result.obs[done] = fresh[done]
        return result

    def episode_rewards(self) -> np.ndarray:
        """Cumulative reward of the episode currently running in each slot."""
        return self._ep_reward.copy()

    def get_state(self) -> dict:
        """Snapshot for checkpointing; restorable with set_state."""
        return {
            "p": self._state.p.copy(),
            "v": self._state.v.copy(),
            "q": self._state.q.copy(),
            "w": self._state.w.copy(),
            "f": self._state.f.copy(),
            "rng_states": [r.bit_generator.state for r in self._rngs],
            "worlds": list(self.worlds),
            "params": [
                QuadrotorParams(
                    mass=self._par.mass[k],
                    inertia=self._par.inertia[k],
                    arm_length=self._par.arm_length[k],
                    torque_const=self._par.torque_const[k],
                    drag=self._par.drag[k],
                    motor_tau=self._par.motor_tau[k],
                    thrust_limits=(self._par.f_min[k], self._par.f_max[k]),
                    gravity=self._par.gravity[k],
                    body_rate_gains=self._par.gains[k],
                )
                for k in range(self.n_envs)
            ],
            "next_idx": self._next_idx.copy(),
            "steps": self._steps.copy(),
            "ep_reward": self._ep_reward.copy(),
            "ready": self._ready,
        }

    def set_state(self, snap: dict):
        n = self.n_envs
        if snap["p"].shape[0] != n:
            raise ValueError("snapshot width does not match environment count")
        for k in range(n):
            self._par.set_row(k, snap["params"][k])
            self._install_world(k, snap["worlds"][k])
        self._state = StateBatch(
            snap["p"].copy(), snap["v"].copy(), snap["q"].copy(), snap["w"].copy(), snap["f"].copy()
        )
        for r, s in zip(self._rngs, snap["rng_states"]):
            r.bit_generator.state = s
        self._next_idx = snap["next_idx"].copy()
        self._steps = snap["steps"].copy()
        self._ep_reward = snap["ep_reward"].copy()
        self._ready = snap["ready"]


class RacingEnv:
    """Single racing environment with scalar-friendly step/reset semantics."""

    def __init__(self, scenario: Scenario, seed=0):
        self._sim = VectorEnv(scenario, 1, seed, auto_reset=False)
        self._status: EpisodeStatus | None = None

    @property
    def cfg(self) -> EnvConfig:
        return self._sim.cfg

    @property
    def observation_dim(self) -> int:
        return self._sim.observation_dim

    @property
    def world(self) -> WorldSpec:
        return self._sim.worlds[0]

    @property
    def state(self) -> QuadrotorState:
        return self._sim._state.state(0)

    @state.setter
    def state(self, s: QuadrotorState):
        self._sim._state.set_row(0, s)

    @property
    def status(self) -> EpisodeStatus | None:
        return self._status

    def reset(self) -> np.ndarray:
        obs = self._sim.reset()
        self._status = EpisodeStatus(Outcome.RUNNING, 0.0, 0)
        return obs[0]

    def step(self, action) -> tuple[np.ndarray, RewardBreakdown, EpisodeStatus]:
        if self._status is None or self._status.terminal:
            raise RuntimeError("episode is not running; call reset()")
        batch = self._sim.step(np.asarray(action, dtype=np.float64)[None, :])
        self._status = batch.status(0)
        return batch.obs[0], batch.reward(0), self._status


def observe(state: QuadrotorState, world: WorldSpec, next_waypoint_index: int, config: EnvConfig) -> np.ndarray:
    """Assemble the flat observation [p, R, v, omega, next-j gates, nearest-N
    obstacle surface distances] for one vehicle."""
    if not (0 <= next_waypoint_index < len(world.track)):
        raise ValueError("next_waypoint_index out of range")
    track_c = world.track_centers()
    rot = quat_to_rotmat_flat(state.attitude[None, :])
    idx = np.clip(next_waypoint_index + np.arange(config.lookahead_j), 0, len(world.track) - 1)
    lookahead = track_c[idx].reshape(1, -1)
    dists = surface_distances_batch(
        state.position[None, :],
        world.obstacle_centers()[None, :, :],
        world.obstacle_radii()[None, :],
        np.ones((1, len(world.obstacles)), dtype=bool),
        config.n_obstacles,
        config.d_far,
    )
    return np.concatenate(
        [state.position[None, :], rot, state.velocity[None, :], state.body_rate[None, :], lookahead, dists],
        axis=1,
    )[0]
