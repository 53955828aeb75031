"""Stochastic policies with a uniform interface: sample, exact log_prob,
Monte-Carlo entropy and KL.

Five parameterizations share the contract: factorized Gaussian, Gaussian with
a tanh-bounded mean, a uniform-weight Gaussian mixture, a Beta policy mapped
affinely onto the action box, and the normalizing-flow policy. The trust
region machinery only ever touches log_prob and its gradient, so the kinds
are interchangeable.

Entropy is estimated by reparameterization: push N fixed noise draws through
the sampling path and average -log_prob, so the gradient flows through both
the sample path and the density. The Beta policy is the exception (its
sampler is not reparameterizable here): its estimator evaluates -log_prob at
fixed pre-drawn actions, so only the density term carries gradient.
"""

from __future__ import annotations

import base64
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, ShapeError
from .flows import LOG_2PI, FlowStack
from .nets import MlpSpec, build_params, mlp_forward
from .params import FlatParams, ParamViews

log = logging.getLogger(__name__)

POLICY_KINDS = ("gaussian", "gaussian-tanh", "gmm", "beta", "flow")

BETA_EDGE = 1e-6  # actions are clamped this far inside the box before log_prob


@dataclass(frozen=True)
class PolicyArch:
    """Architecture hyper-parameters; defaults match the desk-scale setup."""

    hidden: tuple = (64, 64)        # mean / shape networks
    gmm_k: int = 2
    flow_layers: int = 4            # number of coupling transformations K
    flow_hidden: int = 3            # conditioner hidden width l1
    state_hidden: tuple = (64, 64)  # flow state-embedding network
    scale_clamp: float | None = 5.0
    inject_after: int = 1

    def replace(self, **kw) -> "PolicyArch":
        d = asdict(self)
        d.update(kw)
        for key in ("hidden", "state_hidden"):
            d[key] = tuple(d[key])
        return PolicyArch(**d)


class Policy:
    """Base policy: owns a FlatParams and the per-kind math."""

    kind = "abstract"

    def __init__(self, obs_dim, act_dim, arch, rng,
                 action_low=None, action_high=None):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.arch = arch
        self.action_low = None if action_low is None else np.asarray(action_low, float)
        self.action_high = None if action_high is None else np.asarray(action_high, float)
        self.params = build_params(self._specs(), self._extras(), rng)
        self.layout = self.params.layout

    # subclasses declare their networks / free blocks
    def _specs(self) -> dict:
        raise NotImplementedError

    def _extras(self) -> dict:
        raise NotImplementedError

    def _log_prob_core(self, views, states_t, actions_t) -> ad.Tensor:
        raise NotImplementedError

    # -- parameter plumbing -------------------------------------------------
    def views(self, theta=None) -> ParamViews:
        """ParamViews over ``theta`` (Tensor, vector, or current params)."""
        if theta is None:
            t = ad.constant(self.params.vector)
        elif isinstance(theta, ad.Tensor):
            t = theta
        else:
            t = ad.constant(np.asarray(theta, dtype=np.float64))
        return ParamViews(t, self.layout)

    def set_vector(self, vector: np.ndarray) -> None:
        self.params = self.params.replace(vector)

    def _states_t(self, states) -> ad.Tensor:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != self.obs_dim:
            raise ShapeError(
                f"{self.kind} policy expects (n, {self.obs_dim}) states, got {states.shape}"
            )
        return ad.constant(states)

    # -- public surface ------------------------------------------------------
    def log_prob_t(self, theta, states, actions) -> ad.Tensor:
        """(n, 1) log-density tensor, differentiable w.r.t. ``theta``."""
        views = self.views(theta)
        try:
            return self._log_prob_core(views, self._states_t(states), actions)
        except NumericError as e:
            raise NumericError(f"{self.kind} policy log_prob: {e}") from None

    def log_prob(self, states, actions, vector=None) -> np.ndarray:
        """(n,) log-density values at ``vector`` (default: current params)."""
        return self.log_prob_t(vector, states, actions).data[:, 0]

    def sample(self, states, rng, vector=None):
        """Draw one action per state; returns (actions (n, m), logps (n,))."""
        views = self.views(vector)
        try:
            return self._sample_core(views, np.asarray(states, float), rng)
        except NumericError as e:
            raise NumericError(f"{self.kind} policy sample: {e}") from None

    def entropy_noise(self, states, n_draws, rng):
        """Pre-draw the randomness for ``entropy_mc_t`` (kept fixed across
        line-search evaluations: common random numbers)."""
        raise NotImplementedError

    def entropy_mc_t(self, theta, states, noise) -> ad.Tensor:
        """Scalar entropy estimate, differentiable w.r.t. ``theta``."""
        raise NotImplementedError

    def entropy_mc(self, states, n_draws, rng, vector=None) -> float:
        noise = self.entropy_noise(states, n_draws, rng)
        return float(self.entropy_mc_t(vector, states, noise).data)

    # -- persistence ----------------------------------------------------------
    def to_checkpoint(self, seed=None) -> dict:
        return {
            "format": "flowtrpo-policy-v1",
            "kind": self.kind,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "arch": asdict(self.arch),
            "action_low": None if self.action_low is None else self.action_low.tolist(),
            "action_high": None if self.action_high is None else self.action_high.tolist(),
            "layout": [[name, list(shape), offset] for name, shape, offset in self.layout],
            "params_b64": base64.b64encode(
                np.ascontiguousarray(self.params.vector, dtype="<f8").tobytes()
            ).decode("ascii"),
            "seed": seed,
        }


def _repeat_states(states, n_draws):
    return np.repeat(np.asarray(states, float), n_draws, axis=0)


class GaussianPolicy(Policy):
    """N(mu(s), diag(sigma^2)); sigma is one free parameter per dimension,
    shared across states. ``bounded_mean`` adds a tanh on the mean output."""

    def __init__(self, obs_dim, act_dim, arch, rng, bounded_mean=False, **kw):
        self.bounded_mean = bounded_mean
        self.kind = "gaussian-tanh" if bounded_mean else "gaussian"
        final = "tanh" if bounded_mean else "none"
        self._mean_spec = MlpSpec(obs_dim, act_dim, tuple(arch.hidden), final)
        super().__init__(obs_dim, act_dim, arch, rng, **kw)

    def _specs(self):
        return {"mean": self._mean_spec}

    def _extras(self):
        return {"logstd": np.zeros(self.act_dim)}

    def _log_prob_core(self, views, states_t, actions_t):
        mu = mlp_forward(self._mean_spec, views, "mean", states_t)
        return _diag_gauss_logpdf(ad.as_tensor(actions_t), mu, views["logstd"])

    def _sample_core(self, views, states, rng):
        mu = mlp_forward(self._mean_spec, views, "mean", ad.constant(states)).data
        std = np.exp(views["logstd"].data)
        z = rng.standard_normal(mu.shape)
        actions = mu + std * z
        logps = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(std)) \
            - 0.5 * self.act_dim * LOG_2PI
        return actions, logps

    def entropy_noise(self, states, n_draws, rng):
        n = np.asarray(states).shape[0]
        return {"z": rng.standard_normal((n * n_draws, self.act_dim)), "n_draws": n_draws}

    def entropy_mc_t(self, theta, states, noise):
        views = self.views(theta)
        mu_one = mlp_forward(self._mean_spec, views, "mean", self._states_t(states))
        mu = ad.repeat_rows(mu_one, noise["n_draws"])
        std = ad.exp(views["logstd"])
        actions = ad.add(mu, ad.mul(ad.constant(noise["z"]), std))
        lp = _diag_gauss_logpdf(actions, mu, views["logstd"])
        return ad.neg(ad.tmean(lp))


def _diag_gauss_logpdf(actions_t, mu_t, logstd_t) -> ad.Tensor:
    """(n, 1) log N(a; mu, diag(exp(2 logstd)))."""
    m = mu_t.data.shape[1]
    z = ad.mul(ad.sub(actions_t, mu_t), ad.exp(ad.neg(logstd_t)))
    quad = ad.scale(ad.tsum(ad.square(z), axis=1), -0.5)
    return ad.add(quad, ad.sub(ad.constant(-0.5 * m * LOG_2PI), ad.tsum(logstd_t)))


class GmmPolicy(Policy):
    """Uniform mixture of K factorized Gaussians; weights 1/K are fixed and
    never trained, each component has its own mean net and logstd."""

    kind = "gmm"

    def __init__(self, obs_dim, act_dim, arch, rng, **kw):
        self._mean_spec = MlpSpec(obs_dim, act_dim, tuple(arch.hidden), "none")
        super().__init__(obs_dim, act_dim, arch, rng, **kw)

    def _specs(self):
        return {f"mean{k}": self._mean_spec for k in range(self.arch.gmm_k)}

    def _extras(self):
        return {f"logstd{k}": np.zeros(self.act_dim) for k in range(self.arch.gmm_k)}

    def _component_lps(self, views, states_t, actions_t):
        lps = []
        for k in range(self.arch.gmm_k):
            mu = mlp_forward(self._mean_spec, views, f"mean{k}", states_t)
            lps.append(_diag_gauss_logpdf(actions_t, mu, views[f"logstd{k}"]))
        return lps

    def _log_prob_core(self, views, states_t, actions_t):
        lps = self._component_lps(views, states_t, ad.as_tensor(actions_t))
        stacked = ad.concat(lps, axis=1)  # (n, K)
        return ad.add(ad.logsumexp(stacked, axis=1),
                      ad.constant(-math.log(self.arch.gmm_k)))

    def _sample_core(self, views, states, rng):
        n = states.shape[0]
        k_count = self.arch.gmm_k
        comps = rng.integers(0, k_count, size=n)
        z = rng.standard_normal((n, self.act_dim))
        states_t = ad.constant(states)
        mus = np.stack(
            [mlp_forward(self._mean_spec, views, f"mean{k}", states_t).data
             for k in range(k_count)]
        )  # (K, n, m)
        stds = np.stack([np.exp(views[f"logstd{k}"].data) for k in range(k_count)])
        mu_sel = mus[comps, np.arange(n), :]
        std_sel = stds[comps]
        actions = mu_sel + std_sel * z
        logps = self.log_prob(states, actions)
        return actions, logps

    def entropy_noise(self, states, n_draws, rng):
        n = np.asarray(states).shape[0]
        total = n * n_draws
        return {
            "z": rng.standard_normal((total, self.act_dim)),
            "comp": rng.integers(0, self.arch.gmm_k, size=total),
            "n_draws": n_draws,
        }

    def entropy_mc_t(self, theta, states, noise):
        views = self.views(theta)
        states_t = self._states_t(states)
        n_draws = noise["n_draws"]
        z = ad.constant(noise["z"])
        mus = [ad.repeat_rows(mlp_forward(self._mean_spec, views, f"mean{k}", states_t),
                              n_draws)
               for k in range(self.arch.gmm_k)]
        actions = None
        for k in range(self.arch.gmm_k):
            mask = ad.constant((noise["comp"] == k).astype(float)[:, None])
            a_k = ad.add(mus[k], ad.mul(z, ad.exp(views[f"logstd{k}"])))
            term = ad.mul(mask, a_k)
            actions = term if actions is None else ad.add(actions, term)
        lps = [_diag_gauss_logpdf(actions, mus[k], views[f"logstd{k}"])
               for k in range(self.arch.gmm_k)]
        lp = ad.add(ad.logsumexp(ad.concat(lps, axis=1), axis=1),
                    ad.constant(-math.log(self.arch.gmm_k)))
        return ad.neg(ad.tmean(lp))


class BetaPolicy(Policy):
    """Per-dimension Beta(alpha(s), beta(s)) on (0, 1), mapped affinely onto
    the action box; the constant Jacobian of the map is folded into
    log_prob. alpha, beta = softplus(f) + 1 > 1 keeps the density unimodal,
    but drives the nets toward infinity for actions at the boundary, the
    known instability of this parameterization."""

    kind = "beta"

    def __init__(self, obs_dim, act_dim, arch, rng, action_low=None, action_high=None):
        if action_low is None or action_high is None:
            raise ConfigError("beta policy requires an action box")
        super().__init__(obs_dim, act_dim, arch, rng,
                         action_low=action_low, action_high=action_high)
        self._range = self.action_high - self.action_low
        if np.any(self._range <= 0):
            raise ConfigError("beta policy action box must have positive extent")

    def _specs(self):
        return {"shape": MlpSpec(self.obs_dim, 2 * self.act_dim, self.arch.hidden,
                                 "softplus1")}

    def _extras(self):
        return {}

    def _alpha_beta(self, views, states_t):
        ab = mlp_forward(self._specs()["shape"], views, "shape", states_t)
        alpha = ad.narrow(ab, 1, 0, self.act_dim)
        beta = ad.narrow(ab, 1, self.act_dim, self.act_dim)
        return alpha, beta

    def _unit_coords(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        rng_ = self._range
        u = (actions - self.action_low) / rng_
        clipped = np.clip(u, BETA_EDGE, 1.0 - BETA_EDGE)
        n_clamped = int(np.sum(clipped != u))
        if n_clamped:
            log.warning("beta log_prob: clamped %d boundary action(s) inward by %g",
                        n_clamped, BETA_EDGE)
        return clipped

    def _beta_lp(self, alpha, beta, u: ad.Tensor) -> ad.Tensor:
        log_u = ad.log(u)
        log_1mu = ad.log(ad.sub(ad.constant(1.0), u))
        log_norm = ad.sub(ad.add(ad.lgamma(alpha), ad.lgamma(beta)),
                          ad.lgamma(ad.add(alpha, beta)))
        terms = ad.sub(
            ad.add(ad.mul(ad.sub(alpha, ad.constant(1.0)), log_u),
                   ad.mul(ad.sub(beta, ad.constant(1.0)), log_1mu)),
            log_norm,
        )
        jac = float(np.sum(np.log(self._range)))  # da = range * du
        return ad.add(ad.tsum(terms, axis=1), ad.constant(-jac))

    def _log_prob_core(self, views, states_t, actions):
        if isinstance(actions, ad.Tensor):
            actions = actions.data
        u = ad.constant(self._unit_coords(actions))
        alpha, beta = self._alpha_beta(views, states_t)
        return self._beta_lp(alpha, beta, u)

    def _sample_core(self, views, states, rng):
        alpha, beta = self._alpha_beta(views, ad.constant(states))
        u = rng.beta(alpha.data, beta.data)
        actions = self.action_low + self._range * u
        return actions, self.log_prob(states, actions)

    def entropy_noise(self, states, n_draws, rng):
        # no pathwise reparameterization for Beta: fix the actions up front
        srep = _repeat_states(states, n_draws)
        actions, _ = self.sample(srep, rng)
        return {"actions": actions, "n_draws": n_draws}

    def entropy_mc_t(self, theta, states, noise):
        views = self.views(theta)
        alpha, beta = self._alpha_beta(views, self._states_t(states))
        alpha = ad.repeat_rows(alpha, noise["n_draws"])
        beta = ad.repeat_rows(beta, noise["n_draws"])
        u = ad.constant(self._unit_coords(noise["actions"]))
        lp = self._beta_lp(alpha, beta, u)
        return ad.neg(ad.tmean(lp))


class FlowPolicy(Policy):
    """Normalizing-flow policy: source noise of the action's dimension pushed
    through K coupling transformations, conditioned on the state by adding a
    learned embedding after the first transformation."""

    kind = "flow"

    def __init__(self, obs_dim, act_dim, arch, rng, **kw):
        self.stack = FlowStack(
            dim=act_dim,
            n_layers=arch.flow_layers,
            cond_hidden=arch.flow_hidden,
            state_spec=MlpSpec(obs_dim, act_dim, tuple(arch.state_hidden), "none"),
            inject_after=arch.inject_after,
            scale_clamp=arch.scale_clamp,
        )
        super().__init__(obs_dim, act_dim, arch, rng, **kw)

    def _specs(self):
        return self.stack.specs()

    def _extras(self):
        return self.stack.extras()

    def _log_prob_core(self, views, states_t, actions_t):
        return self.stack.logprob_t(views, states_t, ad.as_tensor(actions_t))

    def _sample_core(self, views, states, rng):
        eps = rng.standard_normal((states.shape[0], self.act_dim))
        action, lp = self.stack.sample_t(views, ad.constant(states), ad.constant(eps))
        return action.data, lp.data[:, 0]

    def entropy_noise(self, states, n_draws, rng):
        n = np.asarray(states).shape[0]
        return {"eps": rng.standard_normal((n * n_draws, self.act_dim)),
                "n_draws": n_draws}

    def entropy_mc_t(self, theta, states, noise):
        views = self.views(theta)
        embed_one = self.stack._embed(views, self._states_t(states))
        embed = ad.repeat_rows(embed_one, noise["n_draws"])
        _, lp = self.stack.sample_t(views, None, ad.constant(noise["eps"]), embed=embed)
        return ad.neg(ad.tmean(lp))


def make_policy(kind, obs_dim, act_dim, arch=None, rng=None,
                action_low=None, action_high=None) -> Policy:
    arch = arch or PolicyArch()
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == "gaussian":
        return GaussianPolicy(obs_dim, act_dim, arch, rng,
                              action_low=action_low, action_high=action_high)
    if kind == "gaussian-tanh":
        return GaussianPolicy(obs_dim, act_dim, arch, rng, bounded_mean=True,
                              action_low=action_low, action_high=action_high)
    if kind == "gmm":
        return GmmPolicy(obs_dim, act_dim, arch, rng,
                         action_low=action_low, action_high=action_high)
    if kind == "beta":
        return BetaPolicy(obs_dim, act_dim, arch, rng,
                          action_low=action_low, action_high=action_high)
    if kind == "flow":
        return FlowPolicy(obs_dim, act_dim, arch, rng,
                          action_low=action_low, action_high=action_high)
    raise ConfigError(f"unknown policy kind '{kind}' (choose from {POLICY_KINDS})")


def policy_from_checkpoint(ckpt: dict) -> Policy:
    """Bit-exact reconstruction from ``Policy.to_checkpoint`` output."""
    if ckpt.get("format") != "flowtrpo-policy-v1":
        raise ConfigError("not a flowtrpo policy checkpoint")
    arch_d = dict(ckpt["arch"])
    arch_d["hidden"] = tuple(arch_d["hidden"])
    arch_d["state_hidden"] = tuple(arch_d["state_hidden"])
    arch = PolicyArch(**arch_d)
    policy = make_policy(
        ckpt["kind"], ckpt["obs_dim"], ckpt["act_dim"], arch,
        rng=np.random.default_rng(0),
        action_low=ckpt.get("action_low"), action_high=ckpt.get("action_high"),
    )
    vector = np.frombuffer(base64.b64decode(ckpt["params_b64"]), dtype="<f8").copy()
    if vector.size != policy.params.size:
        raise ConfigError(
            f"checkpoint has {vector.size} parameters, architecture wants "
            f"{policy.params.size}"
        )
    stored = [(name, tuple(shape), offset) for name, shape, offset in ckpt["layout"]]
    if stored != list(policy.layout):
        raise ConfigError("checkpoint layout does not match the architecture")
    policy.set_vector(vector)
    return policy


# -- Monte-Carlo KL -----------------------------------------------------------

def kl_mc_t(new_policy: Policy, theta, states, actions, old_logps) -> ad.Tensor:
    """Sample-based KL(old || new) at fixed (state, action) draws from old.

    ``old_logps`` are cached values from collection time; the result is
    differentiable w.r.t. ``theta`` only, and is exactly zero when the new
    parameters equal the old ones and the samples are shared.
    """
    lp_new = new_policy.log_prob_t(theta, states, actions)
    old = ad.constant(np.asarray(old_logps, float).reshape(-1, 1))
    return ad.tmean(ad.sub(old, lp_new))


def kl_mc(old_policy: Policy, new_policy: Policy, states, n_draws, rng,
          new_vector=None) -> float:
    """KL(old || new) estimated with ``n_draws`` fresh actions per state.

    Both densities are evaluated through log_prob, so when old and new are
    the same policy at the same parameters the estimate is exactly zero.
    """
    srep = _repeat_states(states, n_draws)
    actions, _ = old_policy.sample(srep, rng)
    old_lps = old_policy.log_prob(srep, actions)
    t = kl_mc_t(new_policy, new_vector, srep, actions, old_lps)
    return float(t.data)
