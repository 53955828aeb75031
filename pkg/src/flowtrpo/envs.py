"""Desk-scale environments, trajectory collection and advantage estimation.

Three environments: a correlated-reward bandit (r = -a' Sigma^-1 a), a
bimodal bandit whose reward is the max over per-mode negative quadratics,
and a 2-D point-mass with additive control and small process noise. The
bandits have horizon 1 and a constant zero observation; they exist to make
the maximum-entropy optimum analytically known.

Environments are stateless objects: ``reset``/``step`` take the rng and the
current state explicitly, so rollouts parallelize trivially and determinism
reduces to rng discipline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .nets import MlpSpec, build_params, mlp_forward
from .optim import Adam
from .params import ParamViews

log = logging.getLogger(__name__)

ENV_KINDS = ("corr-bandit", "bimodal-bandit", "point-mass")


class Env:
    obs_dim: int
    act_dim: int
    horizon: int
    action_low: np.ndarray
    action_high: np.ndarray

    def reset(self, rng) -> np.ndarray:
        raise NotImplementedError

    def step(self, state, action, rng, t: int = 0):
        raise NotImplementedError

    def clip_action(self, action) -> np.ndarray:
        return np.clip(action, self.action_low, self.action_high)


class _Bandit(Env):
    """One-step episodes with a constant zero observation."""

    horizon = 1

    def __init__(self, act_dim: int, box_halfwidth: float):
        self.obs_dim = act_dim
        self.act_dim = act_dim
        self.action_low = np.full(act_dim, -box_halfwidth)
        self.action_high = np.full(act_dim, box_halfwidth)

    def reset(self, rng) -> np.ndarray:
        return np.zeros(self.obs_dim)

    def reward_batch(self, actions: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, state, action, rng, t: int = 0):
        reward = float(self.reward_batch(self.clip_action(action)[None, :])[0])
        return np.zeros(self.obs_dim), reward, True


class CorrelatedBandit(_Bandit):
    """r(a) = -a' Sigma^-1 a; the maximum-entropy optimum at temperature c
    is the Gaussian N(0, Sigma / c)."""

    kind = "corr-bandit"

    def __init__(self, sigma=((1.0, 0.8), (0.8, 1.0)), box_halfwidth=5.0):
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ConfigError("corr-bandit covariance must be square")
        self.sigma = sigma
        self.sigma_inv = np.linalg.inv(sigma)
        super().__init__(sigma.shape[0], box_halfwidth)

    def reward_batch(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        return -np.einsum("ni,ij,nj->n", actions, self.sigma_inv, actions)


class BimodalBandit(_Bandit):
    """r(a) = max_i -(a - mu_i)' Lambda_i^-1 (a - mu_i): each mode is a
    quadratic peak of height 0 at its center."""

    kind = "bimodal-bandit"

    def __init__(self, centers=((-0.7, 0.0), (0.7, 0.0)), mode_scale=0.05,
                 box_halfwidth=5.0):
        self.centers = np.asarray(centers, dtype=np.float64)
        if self.centers.ndim != 2:
            raise ConfigError("bimodal-bandit centers must be a list of points")
        self.mode_scale = float(mode_scale)
        super().__init__(self.centers.shape[1], box_halfwidth)

    def reward_batch(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        # Lambda_i = mode_scale * I
        sq = ((actions[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return -(sq / self.mode_scale).min(axis=1)

    def mode_index(self, actions) -> np.ndarray:
        """Basin assignment: nearest mode center."""
        actions = np.asarray(actions, dtype=np.float64)
        sq = ((actions[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return sq.argmin(axis=1)


class PointMass(Env):
    """s' = s + 0.1 a + 0.01 noise, r = -|s'| - 0.01 |a|^2.

    Constants are invented for desk scale; the env exists to exercise
    multi-step credit assignment, not to model physics.
    """

    kind = "point-mass"
    obs_dim = 2
    act_dim = 2
    horizon = 100
    GAIN = 0.1
    NOISE = 0.01
    FAIL_RADIUS = 10.0

    def __init__(self):
        self.action_low = np.full(2, -1.0)
        self.action_high = np.full(2, 1.0)

    def reset(self, rng) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=2)

    def step(self, state, action, rng, t: int = 0):
        a = self.clip_action(np.asarray(action, float))
        nxt = state + self.GAIN * a + self.NOISE * rng.standard_normal(2)
        reward = -float(np.linalg.norm(nxt)) - 0.01 * float(a @ a)
        done = (t + 1 >= self.horizon) or (np.linalg.norm(nxt) > self.FAIL_RADIUS)
        return nxt, reward, done


def make_env(kind: str, **kwargs) -> Env:
    if kind == "corr-bandit":
        return CorrelatedBandit(**kwargs)
    if kind == "bimodal-bandit":
        return BimodalBandit(**kwargs)
    if kind == "point-mass":
        if kwargs:
            raise ConfigError(f"point-mass takes no parameters, got {sorted(kwargs)}")
        return PointMass()
    raise ConfigError(f"unknown env kind '{kind}' (choose from {ENV_KINDS})")


@dataclass
class TrajectoryBatch:
    """One iteration's worth of whole episodes."""

    states: np.ndarray        # (T, obs_dim)
    actions: np.ndarray       # (T, act_dim) raw policy outputs, pre-clip
    rewards: np.ndarray       # (T,)
    dones: np.ndarray         # (T,) True at each episode's last step
    logps: np.ndarray         # (T,) log_prob under the collecting policy
    episode: np.ndarray       # (T,) episode index
    t_index: np.ndarray       # (T,) step index within episode
    n_clipped: int = 0
    values: np.ndarray = field(default=None)
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)

    def __len__(self):
        return self.states.shape[0]

    @property
    def n_episodes(self) -> int:
        return int(self.dones.sum())

    def episode_returns(self) -> np.ndarray:
        """Undiscounted sum of rewards per episode."""
        out = []
        acc = 0.0
        for r, d in zip(self.rewards, self.dones):
            acc += r
            if d:
                out.append(acc)
                acc = 0.0
        return np.asarray(out)

    def mean_return(self) -> float:
        return float(self.episode_returns().mean())


def collect(env: Env, policy, n_steps: int, rng, n_envs: int = 8) -> TrajectoryBatch:
    """Gather at least ``n_steps`` timesteps of whole episodes.

    Episodes run in synchronized waves of ``n_envs`` so the policy samples
    in batches; assembly order (wave, then env index) is deterministic.
    Bandits collapse to a single batched draw.
    """
    if n_steps < 1:
        raise ShapeError("n_steps must be >= 1")

    if env.horizon == 1:
        states = np.tile(env.reset(rng), (n_steps, 1))
        actions, logps = policy.sample(states, rng)
        clipped = env.clip_action(actions)
        rewards = env.reward_batch(clipped)
        n_clipped = int(np.sum(np.any(clipped != actions, axis=1)))
        idx = np.arange(n_steps)
        return TrajectoryBatch(
            states=states, actions=actions, rewards=rewards,
            dones=np.ones(n_steps, bool), logps=logps,
            episode=idx, t_index=np.zeros(n_steps, int), n_clipped=n_clipped,
        )

    episodes = []  # list of per-episode dicts, in deterministic order
    total = 0
    n_clipped = 0
    episode_id = 0
    while total < n_steps:
        wave = [
            {"state": env.reset(rng), "t": 0, "done": False,
             "states": [], "actions": [], "rewards": [], "logps": []}
            for _ in range(n_envs)
        ]
        while not all(w["done"] for w in wave):
            active = [w for w in wave if not w["done"]]
            obs = np.stack([w["state"] for w in active])
            acts, lps = policy.sample(obs, rng)
            for w, a, lp in zip(active, acts, lps):
                clipped = env.clip_action(a)
                if np.any(clipped != a):
                    n_clipped += 1
                nxt, r, done = env.step(w["state"], a, rng, t=w["t"])
                w["states"].append(w["state"])
                w["actions"].append(a)
                w["rewards"].append(r)
                w["logps"].append(lp)
                w["state"] = nxt
                w["t"] += 1
                w["done"] = done
        for w in wave:
            episodes.append(w)
            total += w["t"]

    states, actions, rewards, logps, episode, t_index, dones = [], [], [], [], [], [], []
    for w in episodes:
        n = len(w["states"])
        states.extend(w["states"])
        actions.extend(w["actions"])
        rewards.extend(w["rewards"])
        logps.extend(w["logps"])
        episode.extend([episode_id] * n)
        t_index.extend(range(n))
        dones.extend([False] * (n - 1) + [True])
        episode_id += 1
    return TrajectoryBatch(
        states=np.asarray(states), actions=np.asarray(actions),
        rewards=np.asarray(rewards, float), dones=np.asarray(dones, bool),
        logps=np.asarray(logps, float), episode=np.asarray(episode, int),
        t_index=np.asarray(t_index, int), n_clipped=n_clipped,
    )


def gae_advantages(batch: TrajectoryBatch, vf, gamma: float, lam: float,
                   normalize: bool = True) -> TrajectoryBatch:
    """Fill values/advantages/returns with the exponentially weighted TD
    estimator; episodes all end at a terminal, so the bootstrap value past
    each boundary is zero. Returns stay unnormalized (value targets)."""
    values = vf.predict(batch.states)
    T = len(batch)
    adv = np.zeros(T)
    running = 0.0
    for i in range(T - 1, -1, -1):
        if batch.dones[i]:
            running = 0.0
            next_value = 0.0
        else:
            next_value = values[i + 1]
        delta = batch.rewards[i] + gamma * next_value - values[i]
        running = delta + gamma * lam * running
        adv[i] = running
    batch.values = values
    batch.returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    batch.advantages = adv
    return batch


@dataclass
class ValueFitStats:
    initial_loss: float
    final_loss: float
    reverted: bool = False


class ValueFunction:
    """Two-hidden-layer tanh MLP regressor on states."""

    def __init__(self, obs_dim: int, hidden=(64, 64), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.spec = MlpSpec(obs_dim, 1, tuple(hidden), "none")
        self.params = build_params({"vf": self.spec}, {}, rng)

    def predict(self, states, vector=None) -> np.ndarray:
        views = ParamViews(ad.constant(vector if vector is not None
                                       else self.params.vector), self.params.layout)
        return mlp_forward(self.spec, views, "vf", ad.constant(states)).data[:, 0]

    def _loss_and_grad(self, states, targets):
        with ad.Tape() as tape:
            theta = tape.leaf(self.params.vector)
            views = ParamViews(theta, self.params.layout)
            pred = mlp_forward(self.spec, views, "vf", ad.constant(states))
            err = ad.sub(pred, ad.constant(targets.reshape(-1, 1)))
            loss = ad.tmean(ad.square(err))
            return float(loss.data), tape.gradient(loss, theta)

    def _loss(self, states, targets, vector) -> float:
        pred = self.predict(states, vector)
        return float(np.mean((pred - targets) ** 2))

    def fit(self, states, targets, epochs: int = 5, step_size: float = 1e-3) -> ValueFitStats:
        """Full-batch Adam on the squared error; keeps the best-seen params
        so the loss never increases over a fit, and reverts wholesale if the
        loss ever blows past 10x the initial value."""
        targets = np.asarray(targets, float)
        start = self.params.vector.copy()
        initial = self._loss(states, targets, start)
        if epochs <= 0:
            return ValueFitStats(initial, initial)
        adam = Adam(self.params.size, step_size=step_size)
        best_vec, best_loss = start, initial
        vec = start.copy()
        for _ in range(epochs):
            self.params = self.params.replace(vec)
            _, grad = self._loss_and_grad(states, targets)
            vec = vec + adam.update(grad)
            loss = self._loss(states, targets, vec)
            if loss > 10.0 * max(initial, 1e-12):
                log.warning("value fit diverged (loss %.3g > 10x initial %.3g); reverting",
                            loss, initial)
                self.params = self.params.replace(start)
                return ValueFitStats(initial, initial, reverted=True)
            if loss < best_loss:
                best_loss, best_vec = loss, vec.copy()
        self.params = self.params.replace(best_vec)
        return ValueFitStats(initial, best_loss)


def fit_value(vf: ValueFunction, batch: TrajectoryBatch, epochs: int = 5,
              step_size: float = 1e-3) -> ValueFitStats:
    if batch.returns is None:
        raise ShapeError("batch has no returns; run gae_advantages first")
    return vf.fit(batch.states, batch.returns, epochs=epochs, step_size=step_size)


def mean_episode_return(env: Env, action_fn, episodes: int, rng) -> float:
    """Average undiscounted return of ``action_fn(state) -> action``."""
    totals = []
    for _ in range(episodes):
        state = env.reset(rng)
        total, t, done = 0.0, 0, False
        while not done:
            state, r, done = env.step(state, action_fn(state), rng, t=t)
            total += r
            t += 1
        totals.append(total)
    return float(np.mean(totals))


def proportional_controller(env: PointMass, gain: float = 5.0):
    """Hand-coded baseline for the point-mass: a = clip(-gain * s)."""
    return lambda state: env.clip_action(-gain * np.asarray(state))
