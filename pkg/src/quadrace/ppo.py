"""PPO trainer: rollout collection from the vectorized environment,
generalized advantage estimation, and the clipped-surrogate update.

Everything is seeded and single-threaded, so two runs with the same
configuration produce bit-identical parameters, logs and checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .env import VectorEnv
from .networks import PolicyNet, ValueNet, sample_action, squashed_log_prob

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when an update produces a non-finite loss."""


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    rollout_horizon: int = 256
    epochs_per_update: int = 10
    minibatch_size: int = 2048
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_env_steps: int = 1_000_000
    checkpoint_interval: int = 20

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.rollout_horizon < 1 or self.minibatch_size < 1 or self.epochs_per_update < 1:
            raise ValueError("rollout_horizon, minibatch_size and epochs_per_update must be >= 1")


class RunningNormalizer:
    """Per-dimension running mean/variance for observation scaling."""

    def __init__(self, dim: int, clip: float = 10.0, eps: float = 1e-8):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip
        self.eps = eps

    def update(self, batch: np.ndarray):
        batch = np.asarray(batch, dtype=np.float64)
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        b_count = batch.shape[0]
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean = self.mean + delta * (b_count / total)
        m_a = self.var * self.count
        m_b = b_var * b_count
        m2 = m_a + m_b + delta ** 2 * (self.count * b_count / total)
        self.var = m2 / total
        self.count = total

    def normalize(self, batch: np.ndarray) -> np.ndarray:
        out = (np.asarray(batch, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(out, -self.clip, self.clip).astype(np.float32)

    def state_dict(self) -> dict:
        return {"mean": self.mean.copy(), "var": self.var.copy(), "count": self.count}

    def load_state_dict(self, d: dict):
        self.mean = d["mean"].copy()
        self.var = d["var"].copy()
        self.count = d["count"]


class RolloutBuffer:
    """Fixed-horizon storage for one on-policy batch across K environments."""

    def __init__(self, horizon: int, n_envs: int, obs_dim: int, action_dim: int = 4):
        self.horizon = horizon
        self.n_envs = n_envs
        self.obs = np.zeros((horizon, n_envs, obs_dim), dtype=np.float32)
        self.z = np.zeros((horizon, n_envs, action_dim), dtype=np.float32)
        self.log_prob = np.zeros((horizon, n_envs), dtype=np.float64)
        self.reward = np.zeros((horizon, n_envs), dtype=np.float64)
        self.value = np.zeros((horizon, n_envs), dtype=np.float64)
        self.done = np.zeros((horizon, n_envs), dtype=bool)

    def add(self, t: int, obs, z, log_prob, reward, value, done):
        self.obs[t] = obs
        self.z[t] = z
        self.log_prob[t] = log_prob
        self.reward[t] = reward
        self.value[t] = value
        self.done[t] = done


def gae_scan(rewards, values, dones, last_values, gamma: float, lam: float):
    """Reverse-scan GAE; episode boundaries zero the bootstrap.

    rewards/values/dones: (T, K); last_values: (K,). Returns raw advantages
    of the same shape.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_values, dtype=np.float64)
    next_adv = np.zeros(rewards.shape[1])
    for t in range(t_len - 1, -1, -1):
        nonterminal = np.where(dones[t], 0.0, 1.0)
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        adv[t] = delta + gamma * lam * nonterminal * next_adv
        next_adv = adv[t]
        next_value = values[t]
    return adv


def compute_gae(buffer: RolloutBuffer, last_values, gamma: float, lam: float):
    """Advantages (normalized to zero mean, unit variance) and returns."""
    raw = gae_scan(buffer.reward, buffer.value, buffer.done, last_values, gamma, lam)
    returns = raw + buffer.value
    mean = raw.mean()
    std = raw.std()
    adv = (raw - mean) / (std + 1e-8)
    return adv, returns


def ppo_loss(policy: PolicyNet, value_net: ValueNet, batch: dict, cfg: PPOConfig):
    """Clipped-surrogate loss on one minibatch of tensors.

    batch keys: obs, z, old_log_prob, advantage, ret. Works in whatever
    dtype the tensors carry (float64 for the gradient checks).
    """
    new_log_prob = squashed_log_prob(policy, batch["obs"], batch["z"])
    ratio = torch.exp(new_log_prob - batch["old_log_prob"])
    adv = batch["advantage"]
    surr1 = ratio * adv
    surr2 = torch.clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv
    policy_loss = -torch.min(surr1, surr2).mean()
    value_pred = value_net(batch["obs"])
    value_loss = ((value_pred - batch["ret"]) ** 2).mean()
    entropy_est = -new_log_prob.mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy_est
    with torch.no_grad():
        kl = ((ratio - 1.0) - torch.log(ratio)).mean()
        clip_fraction = ((ratio - 1.0).abs() > cfg.clip_epsilon).double().mean()
    stats = {
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy_est.item(),
        "kl": kl.item(),
        "clip_fraction": clip_fraction.item(),
    }
    return loss, stats


def ppo_update(policy, value_net, optimizer, data: dict, cfg: PPOConfig, generator: torch.Generator):
    """Run the epoch/minibatch loop over one rollout; returns diagnostics."""
    n = data["obs"].shape[0]
    obs = torch.as_tensor(data["obs"])
    z = torch.as_tensor(data["z"])
    old_log_prob = torch.as_tensor(data["log_prob"].astype(np.float32))
    advantage = torch.as_tensor(data["advantage"].astype(np.float32))
    ret = torch.as_tensor(data["ret"].astype(np.float32))

    agg = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "kl": 0.0, "clip_fraction": 0.0}
    batches = 0
    for _ in range(cfg.epochs_per_update):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            batch = {
                "obs": obs[idx],
                "z": z[idx],
                "old_log_prob": old_log_prob[idx],
                "advantage": advantage[idx],
                "ret": ret[idx],
            }
            loss, stats = ppo_loss(policy, value_net, batch, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss: {stats}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                list(policy.parameters()) + list(value_net.parameters()), cfg.max_grad_norm
            )
            optimizer.step()
            for k in agg:
                agg[k] += stats[k]
            batches += 1
    return {k: v / batches for k, v in agg.items()}


LOG_COLUMNS = [
    "update_index", "env_steps", "mean_reward", "mean_episode_time_s", "crash_fraction",
    "policy_loss", "value_loss", "kl", "clip_fraction",
]


@dataclass
class TrainResult:
    policy: PolicyNet
    value: ValueNet
    normalizer: RunningNormalizer
    log_rows: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None


class Trainer:
    """Owns the nets, the optimizer, the normalizer and the rollout loop."""

    def __init__(self, env: VectorEnv, cfg: PPOConfig, seed: int = 0, hidden_dim: int = 128):
        torch.set_num_threads(1)
        self.env = env
        self.cfg = cfg
        self.seed = seed
        obs_dim = env.observation_dim
        torch.manual_seed(seed)
        self.policy = PolicyNet(obs_dim, hidden_dim=hidden_dim)
        self.value = ValueNet(obs_dim, hidden_dim=hidden_dim)
        self.optimizer = torch.optim.Adam(
            list(self.policy.parameters()) + list(self.value.parameters()), lr=cfg.learning_rate
        )
        self.generator = torch.Generator().manual_seed(seed + 1)
        self.normalizer = RunningNormalizer(obs_dim)
        self.update_index = 0
        self.env_steps = 0
        self._last_obs: np.ndarray | None = None

    def _collect(self):
        cfg = self.cfg
        env = self.env
        k = env.n_envs
        buffer = RolloutBuffer(cfg.rollout_horizon, k, env.observation_dim)
        if self._last_obs is None:
            self._last_obs = env.reset()
        obs_raw = self._last_obs
        ended_rewards = []
        completed_times = []
        ended = 0
        crashed = 0
        for t in range(cfg.rollout_horizon):
            self.normalizer.update(obs_raw)
            obs_n = self.normalizer.normalize(obs_raw)
            obs_t = torch.as_tensor(obs_n)
            with torch.no_grad():
                action, z, log_prob = sample_action(self.policy, obs_t, self.generator)
                value = self.value(obs_t)
            step = env.step(action.numpy().astype(np.float64))
            buffer.add(t, obs_n, z.numpy(), log_prob.numpy(), step.total, value.numpy(), step.done)
            done_idx = np.where(step.done)[0]
            for i in done_idx:
                ended += 1
                ended_rewards.append(step.episode_reward[i])
                code = int(step.outcome_codes[i])
                if code in (1, 4):  # collided or aborted
                    crashed += 1
                if not np.isnan(step.completion_time[i]):
                    completed_times.append(step.completion_time[i])
            obs_raw = step.obs
        self._last_obs = obs_raw
        self.normalizer.update(obs_raw)
        with torch.no_grad():
            last_values = self.value(torch.as_tensor(self.normalizer.normalize(obs_raw))).numpy()
        self.env_steps += cfg.rollout_horizon * k
        stats = {
            "mean_reward": float(np.mean(ended_rewards)) if ended_rewards else float("nan"),
            "mean_episode_time_s": float(np.mean(completed_times)) if completed_times else float("nan"),
            "crash_fraction": crashed / ended if ended else float("nan"),
        }
        return buffer, last_values, stats

    def run_update(self) -> dict:
        """One collect + optimize cycle; returns the training-log row."""
        buffer, last_values, stats = self._collect()
        advantage, returns = compute_gae(buffer, last_values, self.cfg.gamma, self.cfg.gae_lambda)
        n = self.cfg.rollout_horizon * self.env.n_envs
        data = {
            "obs": buffer.obs.reshape(n, -1),
            "z": buffer.z.reshape(n, -1),
            "log_prob": buffer.log_prob.reshape(n),
            "advantage": advantage.reshape(n),
            "ret": returns.reshape(n),
        }
        diag = ppo_update(self.policy, self.value, self.optimizer, data, self.cfg, self.generator)
        self.update_index += 1
        row = {
            "update_index": self.update_index,
            "env_steps": self.env_steps,
            "mean_reward": stats["mean_reward"],
            "mean_episode_time_s": stats["mean_episode_time_s"],
            "crash_fraction": stats["crash_fraction"],
            "policy_loss": diag["policy_loss"],
            "value_loss": diag["value_loss"],
            "kl": diag["kl"],
            "clip_fraction": diag["clip_fraction"],
        }
        return row

    def run(self, log_writer=None, checkpoint_fn=None) -> list[dict]:
        """Train until total_env_steps; returns all log rows."""
        rows = []
        while self.env_steps < self.cfg.total_env_steps:
            row = self.run_update()
            rows.append(row)
            if log_writer is not None:
                log_writer(row)
            if checkpoint_fn is not None and (
                self.update_index % self.cfg.checkpoint_interval == 0
                or self.env_steps >= self.cfg.total_env_steps
            ):
                checkpoint_fn(self)
        return rows

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "obs_dim": self.env.observation_dim,
            "policy": self.policy.state_dict(),
            "value": self.value.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "normalizer": self.normalizer.state_dict(),
            "torch_generator": self.generator.get_state(),
            "env_state": self.env.get_state(),
            "update_index": self.update_index,
            "env_steps": self.env_steps,
            "last_obs": None if self._last_obs is None else self._last_obs.copy(),
        }

    def load_state_dict(self, d: dict):
        if d.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format: {d.get('format_version')}")
        self.policy.load_state_dict(d["policy"])
        self.value.load_state_dict(d["value"])
        self.optimizer.load_state_dict(d["optimizer"])
        self.normalizer.load_state_dict(d["normalizer"])
        self.generator.set_state(d["torch_generator"])
        self.env.set_state(d["env_state"])
        self.update_index = d["update_index"]
        self.env_steps = d["env_steps"]
        self._last_obs = None if d["last_obs"] is None else d["last_obs"].copy()


def save_checkpoint(trainer: Trainer, path, extra: dict | None = None):
    payload = trainer.state_dict()
    if extra:
        payload["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    return torch.load(path, weights_only=False)
