"""Policy and value networks plus the tanh-squashed Gaussian action head.

The policy is a two-hidden-layer tanh MLP emitting a pre-squash action mean
and a state-independent log standard deviation per action component. Actions
are Gaussian samples squashed through tanh with the matching log-density
correction, so reported log-probabilities integrate to one over the squashed
action space.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _orthogonal(layer: nn.Linear, gain: float):
    nn.init.orthogonal_(layer.weight, gain=gain)
    nn.init.zeros_(layer.bias)
    return layer


class PolicyNet(nn.Module):
    """tanh MLP -> action mean in [-1, 1]^4 plus learned per-axis log-std."""

    def __init__(self, obs_dim: int, hidden_dim: int = 128, action_dim: int = 4, log_std_init: float = -0.5):
        super().__init__()
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.fc1 = _orthogonal(nn.Linear(obs_dim, hidden_dim), math.sqrt(2.0))
        self.fc2 = _orthogonal(nn.Linear(hidden_dim, hidden_dim), math.sqrt(2.0))
        self.mean_head = _orthogonal(nn.Linear(hidden_dim, action_dim), 0.01)
        self.log_std = nn.Parameter(torch.full((action_dim,), float(log_std_init)))

    def pre_squash(self, obs: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.fc1(obs))
        h = torch.tanh(self.fc2(h))
        return self.mean_head(h)

    def clamped_log_std(self) -> torch.Tensor:
        return torch.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def forward(self, obs: torch.Tensor):
        """Deterministic forward pass: squashed mean and log-std."""
        mean = torch.tanh(self.pre_squash(obs))
        return mean, self.clamped_log_std().expand_as(mean)


class ValueNet(nn.Module):
    """Same trunk shape as the policy with a scalar value output."""

    def __init__(self, obs_dim: int, hidden_dim: int = 128):
        super().__init__()
        self.fc1 = _orthogonal(nn.Linear(obs_dim, hidden_dim), math.sqrt(2.0))
        self.fc2 = _orthogonal(nn.Linear(hidden_dim, hidden_dim), math.sqrt(2.0))
        self.head = _orthogonal(nn.Linear(hidden_dim, 1), 1.0)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.fc1(obs))
        h = torch.tanh(self.fc2(h))
        return self.head(h).squeeze(-1)


def squashed_log_prob(policy: PolicyNet, obs: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Joint log-density of action tanh(z) under the policy at obs.

    z is the pre-squash Gaussian sample. The tanh correction uses the stable
    identity log(1 - tanh(z)^2) = 2 (log 2 - z - softplus(-2z)).
    """
    mean = policy.pre_squash(obs)
    log_std = policy.clamped_log_std()
    std = torch.exp(log_std)
    gauss = -0.5 * ((z - mean) / std) ** 2 - log_std - _LOG_SQRT_2PI
    correction = 2.0 * (math.log(2.0) - z - torch.nn.functional.softplus(-2.0 * z))
    return (gauss - correction).sum(-1)


def sample_action(policy: PolicyNet, obs: torch.Tensor, generator: torch.Generator | None = None,
                  deterministic: bool = False):
    """Draw an action; returns (action, pre-squash sample, log-probability).

    Deterministic mode returns the squashed mean with the log-probability of
    that point.
    """
    mean = policy.pre_squash(obs)
    if deterministic:
        z = mean
    else:
        std = torch.exp(policy.clamped_log_std())
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
        z = mean + std * eps
    action = torch.clamp(torch.tanh(z), -1.0, 1.0)
    log_prob = squashed_log_prob(policy, obs, z)
    return action, z, log_prob


def policy_forward(obs: np.ndarray, policy: PolicyNet):
    """numpy convenience wrapper for the deterministic forward pass."""
    o = torch.as_tensor(np.asarray(obs, dtype=np.float32))
    if o.shape[-1] != policy.obs_dim:
        raise ValueError(f"observation dim {o.shape[-1]} does not match policy input {policy.obs_dim}")
    with torch.no_grad():
        mean, log_std = policy(o)
    return mean.numpy(), log_std.numpy()
