import math

import numpy as np
import pytest
import torch

from quadrace.dynamics import QuadrotorParams
from quadrace.env import EnvConfig, Scenario, VectorEnv
from quadrace.networks import PolicyNet, ValueNet, policy_forward, sample_action, squashed_log_prob
from quadrace.ppo import (
    PPOConfig,
    RolloutBuffer,
    RunningNormalizer,
    Trainer,
    compute_gae,
    gae_scan,
    load_checkpoint,
    ppo_loss,
    ppo_update,
    save_checkpoint,
)
from quadrace.world import RandomizationSpec, Waypoint, WorldSpec


def tiny_scenario():
    world = WorldSpec(
        track=(Waypoint(np.array([4.0, 0.0, 1.5])),),
        bounds_min=np.array([-8.0, -8.0, 0.0]),
        bounds_max=np.array([10.0, 8.0, 4.0]),
    )
    rand = RandomizationSpec(
        position_delta=0.3, velocity_delta=0.2, orientation_delta=0.1,
        param_jitter=0.0, waypoint_jitter=0.0,
    )
    cfg = EnvConfig(max_episode_time=2.0)
    return Scenario(params=QuadrotorParams(), env_config=cfg, randomization=rand,
                    world=world, start_position=np.array([0.0, 0.0, 1.5]))


def direct_gae(rewards, values, dones, last_values, gamma, lam):
    """Term-by-term truncated-sum definition of GAE."""
    t_len, k = rewards.shape
    adv = np.zeros((t_len, k))
    for env in range(k):
        for t in range(t_len):
            acc = 0.0
            for l in range(t, t_len):
                if dones[l, env]:
                    next_v = 0.0
                else:
                    next_v = values[l + 1, env] if l + 1 < t_len else last_values[env]
                delta = rewards[l, env] + gamma * next_v - values[l, env]
                acc += (gamma * lam) ** (l - t) * delta
                if dones[l, env]:
                    break
            adv[t, env] = acc
    return adv


class TestPolicyNet:
    def test_zero_weights_zero_mean(self):
        p = PolicyNet(6, hidden_dim=8)
        with torch.no_grad():
            for m in (p.fc1, p.fc2, p.mean_head):
                m.weight.zero_()
                m.bias.zero_()
        mean, log_std = p(torch.randn(10, 6))
        assert torch.all(mean == 0.0)

    def test_mean_in_range(self):
        torch.manual_seed(0)
        p = PolicyNet(6, hidden_dim=16)
        mean, _ = p(torch.randn(10000, 6) * 5)
        assert torch.all(mean >= -1.0) and torch.all(mean <= 1.0)

    def test_reproducible_init(self):
        torch.manual_seed(42)
        a = PolicyNet(6)
        torch.manual_seed(42)
        b = PolicyNet(6)
        obs = torch.randn(3, 6)
        assert torch.equal(a(obs)[0], b(obs)[0])

    def test_log_std_clamped(self):
        p = PolicyNet(6)
        with torch.no_grad():
            p.log_std.fill_(-20.0)
        _, log_std = p(torch.randn(2, 6))
        assert torch.all(log_std == -5.0)

    def test_dimension_mismatch(self):
        p = PolicyNet(6)
        with pytest.raises(ValueError):
            policy_forward(np.zeros(5), p)


class TestSampleAction:
    def test_small_std_near_mean(self):
        torch.manual_seed(1)
        p = PolicyNet(4, hidden_dim=8)
        with torch.no_grad():
            p.log_std.fill_(-5.0)
        obs = torch.randn(10000, 4)
        gen = torch.Generator().manual_seed(0)
        action, _, _ = sample_action(p, obs, gen)
        mean, _ = p(obs)
        close = (action - mean).abs().max(dim=1).values < 0.05
        assert close.double().mean() > 0.99

    def test_deterministic_mode(self):
        torch.manual_seed(2)
        p = PolicyNet(4, hidden_dim=8)
        obs = torch.randn(5, 4)
        action, z, _ = sample_action(p, obs, deterministic=True)
        mean, _ = p(obs)
        assert torch.equal(action, mean)

    def test_log_prob_matches_monte_carlo_density(self):
        # Histogram density of one action component against the analytic
        # tanh-Gaussian marginal computed from scratch.
        torch.manual_seed(3)
        p = PolicyNet(3, hidden_dim=8)
        with torch.no_grad():
            p.log_std.fill_(-0.3)
        obs = torch.zeros(1_000_000, 3)
        gen = torch.Generator().manual_seed(7)
        with torch.no_grad():
            action, _, _ = sample_action(p, obs, gen)
            mu = float(p.pre_squash(obs[:1])[0, 0])
        samples = action[:, 0].numpy()
        sigma = math.exp(-0.3)
        for a in (-0.4, 0.0, 0.35):
            delta = 0.01
            phat = np.mean(np.abs(samples - a) < delta) / (2 * delta)
            zz = math.atanh(a)
            density = math.exp(-0.5 * ((zz - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
            density /= 1.0 - a * a
            assert phat == pytest.approx(density, rel=0.05)

    def test_log_prob_consistent_with_density_fn(self):
        torch.manual_seed(4)
        p = PolicyNet(3, hidden_dim=8)
        obs = torch.randn(64, 3)
        gen = torch.Generator().manual_seed(1)
        _, z, log_prob = sample_action(p, obs, gen)
        again = squashed_log_prob(p, obs, z)
        assert torch.allclose(log_prob, again)


class TestGAE:
    def test_gamma_one_lambda_one_telescopes(self):
        rng = np.random.default_rng(0)
        t_len = 6
        r = rng.normal(size=(t_len, 1))
        v = rng.normal(size=(t_len, 1))
        dones = np.zeros((t_len, 1), dtype=bool)
        dones[-1] = True  # single full episode
        adv = gae_scan(r, v, dones, np.zeros(1), 1.0, 1.0)
        for t in range(t_len):
            assert adv[t, 0] == pytest.approx(r[t:, 0].sum() - v[t, 0], abs=1e-12)

    def test_lambda_zero_is_one_step_td(self):
        rng = np.random.default_rng(1)
        t_len = 5
        r = rng.normal(size=(t_len, 1))
        v = rng.normal(size=(t_len, 1))
        dones = np.zeros((t_len, 1), dtype=bool)
        last = rng.normal(size=1)
        adv = gae_scan(r, v, dones, last, 0.9, 0.0)
        for t in range(t_len):
            next_v = v[t + 1, 0] if t + 1 < t_len else last[0]
            assert adv[t, 0] == pytest.approx(r[t, 0] + 0.9 * next_v - v[t, 0], abs=1e-12)

    def test_matches_direct_definition_exhaustive(self):
        rng = np.random.default_rng(2)
        for t_len in range(1, 9):
            for pattern in range(2 ** t_len):
                dones = np.array([[(pattern >> i) & 1 == 1] for i in range(t_len)], dtype=bool)
                r = rng.normal(size=(t_len, 1))
                v = rng.normal(size=(t_len, 1))
                last = rng.normal(size=1)
                got = gae_scan(r, v, dones, last, 0.97, 0.9)
                want = direct_gae(r, v, dones, last, 0.97, 0.9)
                np.testing.assert_allclose(got, want, atol=1e-10)

    def test_normalization(self):
        rng = np.random.default_rng(3)
        buf = RolloutBuffer(32, 4, 3)
        buf.reward = rng.normal(size=(32, 4))
        buf.value = rng.normal(size=(32, 4))
        buf.done = rng.random((32, 4)) < 0.1
        last = rng.normal(size=4)
        adv, ret = compute_gae(buf, last, 0.99, 0.95)
        assert abs(adv.mean()) < 1e-8
        assert abs(adv.std() - 1.0) < 1e-6
        raw = gae_scan(buf.reward, buf.value, buf.done, last, 0.99, 0.95)
        # returns are advantages + values before normalization
        np.testing.assert_allclose(ret, raw + buf.value, atol=1e-12)


class TestClipSemantics:
    def _grad_of_sample(self, adv_value, ratio_offset):
        torch.manual_seed(5)
        policy = PolicyNet(3, hidden_dim=4, action_dim=2)
        value_net = ValueNet(3, hidden_dim=4)
        cfg = PPOConfig(clip_epsilon=0.2)
        obs = torch.randn(1, 3)
        z = torch.randn(1, 2)
        with torch.no_grad():
            logp_now = squashed_log_prob(policy, obs, z)
        batch = {
            "obs": obs,
            "z": z,
            "old_log_prob": logp_now - math.log(ratio_offset),
            "advantage": torch.tensor([adv_value]),
            "ret": torch.zeros(1),
        }
        loss, _ = ppo_loss(policy, value_net, batch, cfg)
        loss.backward()
        return [p.grad for p in policy.parameters()]

    def test_positive_advantage_high_ratio_zero_grad(self):
        grads = self._grad_of_sample(adv_value=1.0, ratio_offset=1.4)
        assert all(torch.all(g == 0) for g in grads)

    def test_negative_advantage_low_ratio_zero_grad(self):
        grads = self._grad_of_sample(adv_value=-1.0, ratio_offset=0.6)
        assert all(torch.all(g == 0) for g in grads)

    def test_unclipped_grad_nonzero(self):
        grads = self._grad_of_sample(adv_value=1.0, ratio_offset=1.0)
        assert any(torch.any(g != 0) for g in grads)


class TestGradientCheck:
    def test_analytic_matches_finite_differences(self):
        torch.manual_seed(6)
        policy = PolicyNet(3, hidden_dim=4, action_dim=2).double()
        value_net = ValueNet(3, hidden_dim=4).double()
        cfg = PPOConfig(clip_epsilon=0.2, entropy_coef=0.01, value_coef=0.5)
        rng = np.random.default_rng(0)
        batch = {
            "obs": torch.tensor(rng.normal(size=(8, 3))),
            "z": torch.tensor(rng.normal(size=(8, 2))),
            "advantage": torch.tensor(rng.normal(size=8)),
            "ret": torch.tensor(rng.normal(size=8)),
        }
        with torch.no_grad():
            batch["old_log_prob"] = squashed_log_prob(policy, batch["obs"], batch["z"]) \
                + torch.tensor(rng.normal(scale=0.1, size=8))

        params = list(policy.parameters()) + list(value_net.parameters())
        loss, _ = ppo_loss(policy, value_net, batch, cfg)
        loss.backward()
        analytic = [p.grad.clone() for p in params]

        h = 1e-5
        for p, g in zip(params, analytic):
            flat = p.data.view(-1)
            g_flat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                lp, _ = ppo_loss(policy, value_net, batch, cfg)
                flat[i] = orig - h
                lm, _ = ppo_loss(policy, value_net, batch, cfg)
                flat[i] = orig
                fd = (lp.item() - lm.item()) / (2 * h)
                rel = abs(g_flat[i].item() - fd) / max(abs(fd), 1e-6)
                assert rel < 1e-4, f"param grad mismatch: analytic={g_flat[i].item()} fd={fd}"


class TestPPOUpdate:
    def _make_data(self, n=64, obs_dim=4):
        rng = np.random.default_rng(4)
        torch.manual_seed(7)
        policy = PolicyNet(obs_dim, hidden_dim=8)
        value_net = ValueNet(obs_dim, hidden_dim=8)
        obs = rng.normal(size=(n, obs_dim)).astype(np.float32)
        z = rng.normal(size=(n, 4)).astype(np.float32)
        with torch.no_grad():
            logp = squashed_log_prob(policy, torch.as_tensor(obs), torch.as_tensor(z)).numpy()
        data = {
            "obs": obs,
            "z": z,
            "log_prob": logp.astype(np.float64),
            "advantage": rng.normal(size=n),
            "ret": rng.normal(size=n),
        }
        return policy, value_net, data

    def test_update_runs_and_is_deterministic(self):
        results = []
        for _ in range(2):
            policy, value_net, data = self._make_data()
            opt = torch.optim.Adam(list(policy.parameters()) + list(value_net.parameters()), lr=1e-3)
            gen = torch.Generator().manual_seed(9)
            diag = ppo_update(policy, value_net, opt, data, PPOConfig(minibatch_size=16, epochs_per_update=3), gen)
            results.append((diag, [p.detach().clone() for p in policy.parameters()]))
        assert results[0][0] == results[1][0]
        for a, b in zip(results[0][1], results[1][1]):
            assert torch.equal(a, b)


class TestNormalizer:
    def test_matches_full_batch_statistics(self):
        rng = np.random.default_rng(5)
        data = rng.normal(loc=3.0, scale=2.0, size=(1000, 4))
        norm = RunningNormalizer(4)
        for chunk in np.array_split(data, 13):
            norm.update(chunk)
        np.testing.assert_allclose(norm.mean, data.mean(axis=0), atol=1e-8)
        np.testing.assert_allclose(norm.var, data.var(axis=0), rtol=1e-4)

    def test_normalize_clips(self):
        norm = RunningNormalizer(2, clip=5.0)
        out = norm.normalize(np.array([[1000.0, -1000.0]]))
        np.testing.assert_array_equal(out, [[5.0, -5.0]])


class TestTrainerDeterminism:
    def _run(self, updates=3, resume_at=None, tmp_path=None):
        cfg = PPOConfig(
            rollout_horizon=16, minibatch_size=32, epochs_per_update=2,
            total_env_steps=16 * 4 * updates, learning_rate=1e-3, checkpoint_interval=100,
        )
        env = VectorEnv(tiny_scenario(), 4, seed=11)
        trainer = Trainer(env, cfg, seed=21, hidden_dim=16)
        for i in range(updates):
            trainer.run_update()
            if resume_at is not None and i + 1 == resume_at:
                path = save_checkpoint(trainer, tmp_path / "ck.pt")
                env2 = VectorEnv(tiny_scenario(), 4, seed=999)
                trainer = Trainer(env2, cfg, seed=31, hidden_dim=16)
                trainer.load_state_dict(load_checkpoint(path))
        return trainer

    def test_two_runs_identical(self):
        a = self._run()
        b = self._run()
        for pa, pb in zip(a.policy.parameters(), b.policy.parameters()):
            assert torch.equal(pa, pb)
        for pa, pb in zip(a.value.parameters(), b.value.parameters()):
            assert torch.equal(pa, pb)

    def test_resume_equivalence(self, tmp_path):
        straight = self._run(updates=4)
        resumed = self._run(updates=4, resume_at=2, tmp_path=tmp_path)
        for pa, pb in zip(straight.policy.parameters(), resumed.policy.parameters()):
            assert torch.equal(pa, pb)
        for pa, pb in zip(straight.value.parameters(), resumed.value.parameters()):
            assert torch.equal(pa, pb)
        np.testing.assert_array_equal(straight.normalizer.mean, resumed.normalizer.mean)


class TestPPOConfigValidation:
    def test_gamma_range(self):
        with pytest.raises(ValueError):
            PPOConfig(gamma=0.0)

    def test_lambda_range(self):
        with pytest.raises(ValueError):
            PPOConfig(gae_lambda=1.5)

    def test_epsilon_positive(self):
        with pytest.raises(ValueError):
            PPOConfig(clip_epsilon=0.0)
