import numpy as np
import pytest

from flowtrpo.envs import (BimodalBandit, CorrelatedBandit, PointMass,
                           ValueFunction, collect, fit_value, gae_advantages,
                           make_env, mean_episode_return,
                           proportional_controller)
from flowtrpo.errors import ConfigError
from flowtrpo.policies import PolicyArch, make_policy

SMALL = PolicyArch(hidden=(8,), state_hidden=(8,), flow_layers=2)


class TestBanditRewards:
    def test_corr_bandit_at_origin(self):
        env = CorrelatedBandit(sigma=np.eye(2))
        _, r, done = env.step(env.reset(np.random.default_rng(0)),
                              np.zeros(2), np.random.default_rng(0))
        assert r == 0.0 and done

    def test_corr_bandit_unit_action(self):
        env = CorrelatedBandit(sigma=np.eye(2))
        _, r, _ = env.step(np.zeros(2), np.array([1.0, 0.0]), np.random.default_rng(0))
        assert r == pytest.approx(-1.0, abs=1e-14)

    def test_corr_bandit_thousand_random_actions(self, rng):
        sigma = np.array([[1.0, 0.8], [0.8, 1.0]])
        env = CorrelatedBandit(sigma=sigma)
        actions = rng.uniform(-5, 5, (1000, 2))
        got = env.reward_batch(actions)
        inv = np.linalg.inv(sigma)
        want = np.array([-a @ inv @ a for a in actions])
        assert np.allclose(got, want, atol=1e-12)

    def test_bimodal_peak_is_zero(self):
        env = BimodalBandit()
        for mu in env.centers:
            assert env.reward_batch(mu[None, :])[0] == pytest.approx(0.0, abs=1e-14)

    def test_bimodal_formula_thousand_actions(self, rng):
        env = BimodalBandit(centers=((-0.7, 0.0), (0.7, 0.0)), mode_scale=0.05)
        actions = rng.uniform(-2, 2, (1000, 2))
        got = env.reward_batch(actions)
        want = np.maximum(
            -np.sum((actions - [-0.7, 0]) ** 2, 1) / 0.05,
            -np.sum((actions - [0.7, 0]) ** 2, 1) / 0.05,
        )
        assert np.allclose(got, want, atol=1e-12)

    def test_mode_index_nearest(self):
        env = BimodalBandit()
        idx = env.mode_index(np.array([[-1.0, 0.0], [0.5, 0.3]]))
        assert list(idx) == [0, 1]

    def test_unknown_env_kind(self):
        with pytest.raises(ConfigError):
            make_env("gridworld")


class TestCollect:
    def test_bandit_batch_is_one_step_episodes(self, rng):
        env = CorrelatedBandit()
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = collect(env, pol, 512, np.random.default_rng(1))
        assert len(batch) == 512
        assert batch.n_episodes == 512
        assert np.all(batch.dones)
        assert np.all(batch.t_index == 0)

    def test_deterministic_given_seed(self, rng):
        env = PointMass()
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        b1 = collect(env, pol, 300, np.random.default_rng(5))
        b2 = collect(env, pol, 300, np.random.default_rng(5))
        assert np.array_equal(b1.states, b2.states)
        assert np.array_equal(b1.actions, b2.actions)
        assert np.array_equal(b1.rewards, b2.rewards)
        assert np.array_equal(b1.logps, b2.logps)

    def test_point_mass_tight_policy_full_episodes(self, rng):
        env = PointMass()
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        pol.params.vector[:] = 0.0
        pol.params.view("logstd")[:] = -3.0  # tight zero-mean gaussian
        batch = collect(env, pol, 400, np.random.default_rng(2))
        lengths = np.diff(np.concatenate([[-1], np.flatnonzero(batch.dones)]))
        assert np.all(lengths == env.horizon)

    def test_whole_episodes_and_cached_logps(self, rng):
        env = PointMass()
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = collect(env, pol, 250, np.random.default_rng(3))
        assert len(batch) >= 250
        assert batch.dones[-1]
        again = pol.log_prob(batch.states, batch.actions)
        assert np.allclose(again, batch.logps, atol=1e-12)

    def test_clip_flagging(self, rng):
        env = CorrelatedBandit(box_halfwidth=0.01)
        pol = make_policy("gaussian", 2, 2, SMALL, rng)  # sigma=1 >> box
        batch = collect(env, pol, 100, np.random.default_rng(4))
        assert batch.n_clipped > 90


class TestGae:
    def _random_batch(self, rng, episodes=(3, 5, 4)):
        states, rewards, dones = [], [], []
        for ln in episodes:
            for t in range(ln):
                states.append(rng.standard_normal(2))
                rewards.append(float(rng.standard_normal()))
                dones.append(t == ln - 1)
        from flowtrpo.envs import TrajectoryBatch
        n = len(states)
        return TrajectoryBatch(
            states=np.asarray(states), actions=np.zeros((n, 2)),
            rewards=np.asarray(rewards), dones=np.asarray(dones),
            logps=np.zeros(n), episode=np.zeros(n, int), t_index=np.zeros(n, int))

    def test_lambda_zero_gives_td_residuals(self, rng):
        batch = self._random_batch(rng)
        vf = ValueFunction(2, hidden=(4,), rng=np.random.default_rng(1))
        gae_advantages(batch, vf, gamma=0.9, lam=0.0, normalize=False)
        v = batch.values
        for i in range(len(batch)):
            nxt = 0.0 if batch.dones[i] else v[i + 1]
            delta = batch.rewards[i] + 0.9 * nxt - v[i]
            assert batch.advantages[i] == pytest.approx(delta, abs=1e-12)

    def test_gamma_lambda_one_zero_vf_gives_reward_to_go(self, rng):
        batch = self._random_batch(rng)
        vf = ValueFunction(2, hidden=(4,), rng=np.random.default_rng(1))
        vf.params.vector[:] = 0.0
        gae_advantages(batch, vf, gamma=1.0, lam=1.0, normalize=False)
        # reward-to-go within each episode
        i = 0
        for ln in (3, 5, 4):
            rtg = np.cumsum(batch.rewards[i:i + ln][::-1])[::-1]
            assert np.allclose(batch.advantages[i:i + ln], rtg, atol=1e-12)
            i += ln

    def test_matches_quadratic_oracle(self, rng):
        batch = self._random_batch(rng, episodes=(7, 2, 9, 1))
        vf = ValueFunction(2, hidden=(4,), rng=np.random.default_rng(2))
        gamma, lam = 0.97, 0.93
        gae_advantages(batch, vf, gamma, lam, normalize=False)
        v = batch.values

        # brute-force O(T^2) within-episode double loop
        starts = np.concatenate([[0], np.flatnonzero(batch.dones)[:-1] + 1])
        ends = np.flatnonzero(batch.dones)
        for s, e in zip(starts, ends):
            for t in range(s, e + 1):
                acc = 0.0
                for k in range(t, e + 1):
                    nxt = 0.0 if k == e else v[k + 1]
                    delta = batch.rewards[k] + gamma * nxt - v[k]
                    acc += (gamma * lam) ** (k - t) * delta
                assert batch.advantages[t] == pytest.approx(acc, abs=1e-12)
        assert np.allclose(batch.returns, batch.advantages + v, atol=1e-12)

    def test_episode_isolation(self, rng):
        batch = self._random_batch(rng, episodes=(4, 4))
        vf = ValueFunction(2, hidden=(4,), rng=np.random.default_rng(3))
        gae_advantages(batch, vf, 0.99, 0.95, normalize=False)
        first = batch.advantages[:4].copy()
        # perturbing the second episode's rewards must not touch the first
        batch.rewards[5] += 100.0
        gae_advantages(batch, vf, 0.99, 0.95, normalize=False)
        assert np.array_equal(batch.advantages[:4], first)

    def test_normalization_preserves_rank_order(self, rng):
        batch = self._random_batch(rng, episodes=(6, 6))
        vf = ValueFunction(2, hidden=(4,), rng=np.random.default_rng(4))
        gae_advantages(batch, vf, 0.99, 0.95, normalize=False)
        raw_order = np.argsort(batch.advantages)
        gae_advantages(batch, vf, 0.99, 0.95, normalize=True)
        assert np.array_equal(np.argsort(batch.advantages), raw_order)
        assert abs(batch.advantages.mean()) < 1e-9
        assert batch.advantages.std() == pytest.approx(1.0, abs=1e-6)


class TestValueFunction:
    def test_constant_targets_converge(self, rng):
        vf = ValueFunction(2, hidden=(16,), rng=rng)
        states = np.random.default_rng(1).standard_normal((128, 2))
        c = 3.0
        targets = np.full(128, c)
        vf.fit(states, targets, epochs=3000, step_size=1e-2)
        pred = vf.predict(states)
        assert np.max(np.abs(pred - c)) < abs(c) * 1e-2

    def test_zero_epochs_unchanged(self, rng):
        vf = ValueFunction(2, rng=rng)
        before = vf.params.vector.copy()
        stats = vf.fit(np.zeros((4, 2)), np.ones(4), epochs=0)
        assert np.array_equal(vf.params.vector, before)
        assert stats.final_loss == stats.initial_loss

    def test_loss_decreases_on_first_epoch(self, rng):
        vf = ValueFunction(2, rng=rng)
        states = np.random.default_rng(2).standard_normal((64, 2))
        targets = np.random.default_rng(3).standard_normal(64)
        stats = vf.fit(states, targets, epochs=1, step_size=1e-3)
        assert stats.final_loss <= stats.initial_loss

    def test_never_worse_after_fit(self, rng):
        vf = ValueFunction(2, rng=rng)
        states = np.random.default_rng(4).standard_normal((64, 2))
        targets = 10 * np.random.default_rng(5).standard_normal(64)
        stats = vf.fit(states, targets, epochs=5, step_size=0.5)  # silly step
        assert stats.final_loss <= stats.initial_loss


class TestBaselines:
    def test_controller_beats_random(self):
        env = PointMass()
        ctrl = proportional_controller(env)
        r_ctrl = mean_episode_return(env, ctrl, 50, np.random.default_rng(1))
        urng = np.random.default_rng(2)
        r_rand = mean_episode_return(env, lambda s: urng.uniform(-1, 1, 2), 50,
                                     np.random.default_rng(3))
        assert r_ctrl > r_rand + 20
