import numpy as np
import pytest

from flowtrpo import autodiff as ad
from flowtrpo.envs import (CorrelatedBandit, PointMass, TrajectoryBatch,
                           ValueFunction, collect, gae_advantages)
from flowtrpo.errors import NumericError
from flowtrpo.policies import PolicyArch, make_policy
from flowtrpo.trpo import (TrpoConfig, conjugate_gradient,
                           fisher_vector_product, kl_grad, sample_kl,
                           scale_to_trust_region, surrogate_grad, surrogate_t,
                           surrogate_value, trpo_update)

from conftest import assert_grad_matches

SMALL = PolicyArch(hidden=(8,), state_hidden=(8,), flow_layers=2)


def bandit_batch(policy, n=64, seed=0):
    env = CorrelatedBandit()
    batch = collect(env, policy, n, np.random.default_rng(seed))
    vf = ValueFunction(env.obs_dim, hidden=(4,), rng=np.random.default_rng(1))
    gae_advantages(batch, vf, 0.99, 0.97)
    return batch


class TestSurrogate:
    def test_at_old_params_equals_mean_advantage(self, rng):
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = bandit_batch(pol)
        val = surrogate_value(pol, None, batch)
        assert val == pytest.approx(float(batch.advantages.mean()), abs=1e-12)
        # normalized advantages have mean ~ 0
        assert abs(val) < 1e-9

    def test_unit_advantages_give_one(self, rng):
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = bandit_batch(pol)
        batch.advantages = np.ones(len(batch))
        assert surrogate_value(pol, None, batch) == pytest.approx(1.0, abs=1e-12)

    def test_gradient_matches_fd(self, rng):
        pol = make_policy("flow", 2, 2, SMALL, rng)
        batch = bandit_batch(pol, n=32)

        def f(vec):
            return surrogate_value(pol, vec, batch)

        _, g = surrogate_grad(pol, batch)
        idx = np.random.default_rng(3).choice(pol.params.size, 50, replace=False)
        assert_grad_matches(f, pol.params.vector.copy(), g, rel_tol=1e-5, indices=idx)

    def test_ratio_overflow_is_numeric_error(self, rng):
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = bandit_batch(pol)
        batch.logps = batch.logps + 100.0  # fake a collapsed ratio
        with pytest.raises(NumericError, match="collapse"):
            surrogate_t(pol, None, batch)


class TestFisherVectorProduct:
    def _bias_gaussian(self):
        """1-D gaussian whose mean is just the output bias (state = 0)."""
        pol = make_policy("gaussian", 1, 1, PolicyArch(hidden=()),
                          np.random.default_rng(0))
        pol.params.vector[:] = 0.0
        pol.params.view("logstd")[:] = 0.3
        return pol

    def _crafted_batch(self, pol, m=64):
        """Actions mu +/- sigma in balanced pairs: the sample KL Hessian is
        exactly the analytic diagonal-gaussian Fisher diag(0, 1/s^2, 2) in
        (W, b, logstd) coordinates."""
        sigma = float(np.exp(pol.params.view("logstd")[0]))
        mu = float(pol.params.view("mean/b0")[0])
        z = np.tile([1.0, -1.0], m // 2)
        actions = (mu + sigma * z)[:, None]
        states = np.zeros((m, 1))
        logps = pol.log_prob(states, actions)
        return TrajectoryBatch(
            states=states, actions=actions, rewards=np.zeros(m),
            dones=np.ones(m, bool), logps=logps, episode=np.arange(m),
            t_index=np.zeros(m, int), advantages=np.zeros(m),
            returns=np.zeros(m), values=np.zeros(m))

    def test_zero_vector_maps_to_zero(self, rng):
        pol = self._bias_gaussian()
        batch = self._crafted_batch(pol)
        cfg = TrpoConfig()
        out = fisher_vector_product(pol, batch, np.zeros(pol.params.size), cfg)
        assert np.array_equal(out, np.zeros(pol.params.size))

    def test_matches_analytic_diagonal_gaussian_fisher(self):
        pol = self._bias_gaussian()
        batch = self._crafted_batch(pol)
        cfg = TrpoConfig(cg_damping=0.0)
        sigma2 = float(np.exp(2 * pol.params.view("logstd")[0]))
        fisher = np.diag([0.0, 1.0 / sigma2, 2.0])  # (W, b, logstd)
        rng = np.random.default_rng(5)
        for _ in range(5):
            v = rng.standard_normal(3)
            hv = fisher_vector_product(pol, batch, v, cfg)
            want = fisher @ v
            assert np.allclose(hv, want, rtol=1e-3, atol=1e-6)

    def test_symmetry(self, rng):
        pol = make_policy("flow", 2, 2, SMALL, rng)
        batch = bandit_batch(pol, n=48)
        cfg = TrpoConfig(cg_damping=0.0)
        r = np.random.default_rng(7)
        for _ in range(5):
            v = r.standard_normal(pol.params.size)
            w = r.standard_normal(pol.params.size)
            a = float(v @ fisher_vector_product(pol, batch, w, cfg))
            b = float(w @ fisher_vector_product(pol, batch, v, cfg))
            assert abs(a - b) / max(abs(a), abs(b), 1e-12) < 1e-4


class TestConjugateGradient:
    def test_identity_system_one_iteration(self, rng):
        g = rng.standard_normal(6)
        x, res = conjugate_gradient(lambda v: v, g, iters=1)
        assert np.allclose(x, g, atol=1e-14)
        assert res < 1e-14

    def test_random_spd_matches_direct_solve(self, rng):
        A = rng.standard_normal((8, 8))
        A = A @ A.T + 0.5 * np.eye(8)
        b = rng.standard_normal(8)
        x, res = conjugate_gradient(lambda v: A @ v, b, iters=8, tol=0.0)
        assert np.allclose(x, np.linalg.solve(A, b), atol=1e-8)

    def test_zero_rhs(self):
        x, res = conjugate_gradient(lambda v: v, np.zeros(5), iters=10)
        assert np.array_equal(x, np.zeros(5))
        assert res == 0.0

    def test_damped_policy_system_residual(self, rng):
        # run CG to convergence on a real (damped) Fisher system; the batch
        # must be large enough that sampling noise stays under the damping
        pol = make_policy("gaussian", 2, 2, PolicyArch(hidden=(4,)), rng)
        batch = bandit_batch(pol, n=1024)
        cfg = TrpoConfig(cg_damping=0.1, fvp_subsample=0)
        matvec = lambda v: fisher_vector_product(pol, batch, v, cfg)
        _, g = surrogate_grad(pol, batch)
        x, res = conjugate_gradient(matvec, g, iters=pol.params.size, tol=1e-12)
        assert res < 1e-6

    def test_negative_curvature_bails(self):
        A = np.diag([1.0, -1.0])
        b = np.array([1.0, 1.0])
        x, _ = conjugate_gradient(lambda v: A @ v, b, iters=10)
        assert np.all(np.isfinite(x))


class TestStepScaling:
    def test_quadratic_form_equals_two_epsilon(self, rng):
        H = rng.standard_normal((6, 6))
        H = H @ H.T + np.eye(6)
        x = rng.standard_normal(6)
        eps = 0.01
        step = scale_to_trust_region(x, lambda v: H @ v, eps)
        assert float(step @ H @ step) == pytest.approx(2 * eps, abs=1e-10)

    def test_rejects_nonpositive_curvature(self):
        with pytest.raises(NumericError):
            scale_to_trust_region(np.ones(2), lambda v: -v, 0.01)


class TestUpdate:
    def test_zero_advantages_null_step(self, rng):
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = bandit_batch(pol)
        batch.advantages = np.zeros(len(batch))
        before = pol.params.vector.copy()
        report = trpo_update(pol, batch, TrpoConfig())
        assert not report.accepted
        assert np.array_equal(pol.params.vector, before)

    def test_rejected_update_bitwise_unchanged(self, rng):
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = bandit_batch(pol)
        before = pol.params.vector.copy()
        # no line-search budget: every update is rejected
        cfg = TrpoConfig(max_backtracks=0)
        report = trpo_update(pol, batch, cfg)
        assert not report.accepted
        assert np.array_equal(pol.params.vector, before)

    def test_accepted_update_contract(self, rng):
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = bandit_batch(pol, n=256)
        cfg = TrpoConfig()
        report = trpo_update(pol, batch, cfg)
        assert report.accepted
        assert report.kl_after <= cfg.epsilon
        assert report.surrogate_after >= report.surrogate_before
        # reported KL matches an independent recomputation at the new params
        assert sample_kl(pol, None, batch) == pytest.approx(report.kl_after, abs=1e-12)

    def test_kl_grad_zero_at_old_params(self, rng):
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = bandit_batch(pol)
        kl0 = sample_kl(pol, pol.params.vector, batch)
        assert kl0 == 0.0
        g = kl_grad(pol, pol.params.vector, batch.states, batch.actions, batch.logps)
        # score-function mean: small but not zero; the Hessian is what matters
        assert np.all(np.isfinite(g))

    def test_entropy_requires_rng(self, rng):
        pol = make_policy("gaussian", 2, 2, SMALL, rng)
        batch = bandit_batch(pol)
        from flowtrpo.errors import ShapeError
        with pytest.raises(ShapeError):
            trpo_update(pol, batch, TrpoConfig(entropy_coef=1.0))
