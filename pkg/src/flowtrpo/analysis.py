"""Desk-scale studies: KL-ball geometry and maximum-entropy bandit fits.

KL ball: fix an empirical reference distribution (draws from N(0, sigma^2 I))
and fit a candidate distribution onto the boundary {pi : KL(ref || pi) = eps}.
KL against the empirical set is computed as the mean over reference points of
log q(a) - log pi(a) with q the generating Gaussian density (the empirical
measure itself has no density). Because a pure residual descent would stop at
whatever spread the initializer had, the objective adds a capped
variance-maximization pressure, so candidates land on the *outward* boundary;
a final full-batch polish drives |KL - eps| within tolerance.

Max-ent bandit fits run TRPO with an entropy bonus c and compare the fitted
policy against the analytic optimum pi* ~ exp(r(a)/c). For the correlated
bandit r(a) = -a' Sigma^-1 a, that density is the Gaussian N(0, c Sigma / 2)
(note the factor: exp(-a' Sigma^-1 a / c) has covariance c Sigma / 2).
Advantage normalization is disabled for these fits: rescaling the advantages
would silently change the effective temperature.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .envs import BimodalBandit, CorrelatedBandit, collect, gae_advantages
from .errors import ConfigError, NumericError
from .flows import FlowStack
from .nets import build_params
from .optim import Adam
from .params import FlatParams, LayoutBuilder, ParamViews

log = logging.getLogger(__name__)


# -- unconditional candidate distributions -------------------------------------

class GaussianCandidate:
    """Diagonal Gaussian with free mean and log-std."""

    kind = "gaussian"

    def __init__(self, dim: int, rng, init_scale: float = 0.5):
        b = LayoutBuilder()
        b.add("mu", (dim,))
        b.add("logstd", (dim,))
        vec = np.concatenate([rng.normal(0.0, init_scale, dim),
                              rng.normal(0.0, init_scale, dim)])
        self.dim = dim
        self.params = FlatParams(vec, b.build())

    def _views(self, theta):
        if theta is None:
            theta = ad.constant(self.params.vector)
        elif not isinstance(theta, ad.Tensor):
            theta = ad.constant(np.asarray(theta, float))
        return ParamViews(theta, self.params.layout)

    def logprob_t(self, theta, actions) -> ad.Tensor:
        views = self._views(theta)
        mu, logstd = views["mu"], views["logstd"]
        z = ad.mul(ad.sub(ad.as_tensor(actions), mu), ad.exp(ad.neg(logstd)))
        quad = ad.scale(ad.tsum(ad.square(z), axis=1), -0.5)
        return ad.add(quad, ad.sub(
            ad.constant(-0.5 * self.dim * math.log(2.0 * math.pi)),
            ad.tsum(logstd)))

    def sample_t(self, theta, eps) -> ad.Tensor:
        views = self._views(theta)
        return ad.add(ad.mul(ad.as_tensor(eps), ad.exp(views["logstd"])), views["mu"])

    def sample(self, n: int, rng, vector=None) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        return self.sample_t(vector, ad.constant(eps)).data

    def log_density(self, points, vector=None) -> np.ndarray:
        return self.logprob_t(vector, ad.constant(np.asarray(points, float))).data[:, 0]


class FlowCandidate:
    """Unconditional coupling-layer flow (state embedding replaced by a free
    bias vector)."""

    kind = "flow"

    def __init__(self, dim: int, rng, n_layers: int = 4, cond_hidden: int = 3):
        self.dim = dim
        self.stack = FlowStack(dim, n_layers=n_layers, cond_hidden=cond_hidden,
                               state_spec=None)
        self.params = build_params(self.stack.specs(), self.stack.extras(), rng)

    def _views(self, theta):
        if theta is None:
            theta = ad.constant(self.params.vector)
        elif not isinstance(theta, ad.Tensor):
            theta = ad.constant(np.asarray(theta, float))
        return ParamViews(theta, self.params.layout)

    def logprob_t(self, theta, actions) -> ad.Tensor:
        return self.stack.logprob_t(self._views(theta), None, ad.as_tensor(actions))

    def sample_t(self, theta, eps) -> ad.Tensor:
        action, _ = self.stack.sample_t(self._views(theta), None, ad.as_tensor(eps))
        return action

    def sample(self, n: int, rng, vector=None) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        return self.sample_t(vector, ad.constant(eps)).data

    def log_density(self, points, vector=None) -> np.ndarray:
        return self.logprob_t(vector, ad.constant(np.asarray(points, float))).data[:, 0]


def make_candidate(kind: str, dim: int, rng, flow_layers=4, flow_hidden=3):
    if kind == "gaussian":
        return GaussianCandidate(dim, rng)
    if kind == "flow":
        return FlowCandidate(dim, rng, n_layers=flow_layers, cond_hidden=flow_hidden)
    raise ConfigError(f"unknown candidate kind '{kind}'")


# -- KL-ball boundary fitting ---------------------------------------------------

@dataclass
class KlBallSpec:
    candidate: str = "flow"        # gaussian | flow
    dim: int = 2
    ref_sigma: float = 0.1
    n_ref: int = 10_000
    epsilon: float = 0.01
    kl_tol: float = 1e-3           # |KL - epsilon| at convergence
    var_pressure: float = 0.1      # weight of the -log(var) term
    var_cap: float = 1.0           # pressure switches off above this variance
    burnin_steps: int = 1500
    max_steps: int = 10_000
    polish_steps: int = 1500
    step_size: float = 5e-3
    polish_step_size: float = 1e-3
    minibatch: int = 2048
    var_draws: int = 512
    flow_layers: int = 4
    flow_hidden: int = 3


@dataclass
class FitReport:
    final_kl: float | None = None
    variance_per_dim: list = field(default_factory=list)
    support_radius_95: float = float("nan")
    n_samples: int = 0
    converged: bool = True
    steps: int = 0
    covariance: list | None = None
    correlation: float | None = None
    mode_masses: list | None = None
    mean_return_last10: float | None = None
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def _report_stats(dist, rng, n_samples=100_000) -> tuple:
    samples = dist.sample(n_samples, rng)
    radius = float(np.quantile(np.linalg.norm(samples, axis=1), 0.95))
    return samples, samples.var(axis=0), radius


def fit_to_kl_boundary(spec: KlBallSpec, rng: np.random.Generator):
    """Fit a candidate onto the KL-ball boundary; returns (dist, FitReport).

    Phase 1 descends (KL - eps)^2 - beta log(var) on reference minibatches;
    phase 2 sets beta = 0 and polishes the full-batch KL residual until
    |KL - eps| < kl_tol. Non-convergence within max_steps is reported (with
    the KL trace), not raised.
    """
    ref = spec.ref_sigma * rng.standard_normal((spec.n_ref, spec.dim))
    log_q = (-0.5 * np.sum(ref * ref, axis=1) / spec.ref_sigma ** 2
             - spec.dim * math.log(spec.ref_sigma)
             - 0.5 * spec.dim * math.log(2.0 * math.pi))
    dist = make_candidate(spec.candidate, spec.dim, rng,
                          flow_layers=spec.flow_layers, flow_hidden=spec.flow_hidden)

    def full_kl(vec) -> float:
        lp = dist.log_density(ref, vector=vec)
        return float(np.mean(log_q - lp))

    def loss_grad(vec, idx, beta, step_rng):
        with ad.Tape() as tape:
            theta = tape.leaf(vec)
            lp = dist.logprob_t(theta, ad.constant(ref[idx]))
            kl = ad.tmean(ad.sub(ad.constant(log_q[idx].reshape(-1, 1)), lp))
            loss = ad.square(ad.sub(kl, ad.constant(spec.epsilon)))
            if beta:
                eps_draw = ad.constant(step_rng.standard_normal((spec.var_draws, spec.dim)))
                samples = dist.sample_t(theta, eps_draw)
                centered = ad.sub(samples, ad.tmean(samples, axis=0))
                var = ad.tmean(ad.square(centered))
                if float(var.data) < spec.var_cap:
                    loss = ad.sub(loss, ad.scale(ad.log(var), beta))
            return tape.gradient(loss, theta)

    vec = dist.params.vector.copy()
    adam = Adam(vec.size, step_size=spec.step_size)
    trace = []
    steps_used = spec.max_steps
    converged = False
    for step in range(spec.max_steps):
        beta = spec.var_pressure if step < spec.burnin_steps else 0.0
        idx = rng.integers(0, spec.n_ref, spec.minibatch)
        vec = vec + adam.update(loss_grad(vec, idx, beta, rng))
        if step >= spec.burnin_steps and step % 25 == 0:
            kl = full_kl(vec)
            trace.append((step, kl))
            if abs(kl - spec.epsilon) < 0.5 * spec.kl_tol:
                steps_used = step
                converged = True
                break

    if not converged:
        # deterministic full-batch polish of the residual alone
        polish = Adam(vec.size, step_size=spec.polish_step_size)
        all_idx = np.arange(spec.n_ref)
        for extra in range(spec.polish_steps):
            kl = full_kl(vec)
            trace.append((spec.max_steps + extra, kl))
            if abs(kl - spec.epsilon) < 0.5 * spec.kl_tol:
                converged = True
                steps_used = spec.max_steps + extra
                break
            vec = vec + polish.update(loss_grad(vec, all_idx, 0.0, rng))

    dist.params = dist.params.replace(vec)
    final = full_kl(vec)
    samples, var, radius = _report_stats(dist, rng)
    report = FitReport(
        final_kl=final, variance_per_dim=var.tolist(), support_radius_95=radius,
        n_samples=samples.shape[0], converged=abs(final - spec.epsilon) < spec.kl_tol,
        steps=steps_used, trace=trace[-50:],
    )
    if not report.converged:
        log.warning("KL boundary fit did not converge: |KL - eps| = %.3g",
                    abs(final - spec.epsilon))
    return dist, report


# -- maximum-entropy bandit fits -------------------------------------------------

def maxent_target_covariance(sigma: np.ndarray, c: float) -> np.ndarray:
    """Covariance of the density ~ exp(-a' Sigma^-1 a / c): c Sigma / 2."""
    return 0.5 * c * np.asarray(sigma, float)


def maxent_bandit_fit(cfg: RunConfig, iterations: int | None = None):
    """Train with entropy bonus c = trpo.entropy_coef on a bandit, then report
    the statistics the bandit experiments compare: sample covariance and
    correlation (correlated bandit) or per-mode sample masses (bimodal).

    Returns (policy, FitReport). Advantages are left unnormalized regardless
    of the config: normalization would rescale the reward term against the
    entropy bonus and move the max-ent optimum.
    """
    from .runner import build_run, training_loop  # local import; no cycle at module load

    if cfg["trpo.entropy_coef"] <= 0:
        raise ConfigError("max-ent fit requires trpo.entropy_coef > 0")
    cfg = cfg.updated({"train.normalize_advantages": False})
    env, policy, vf, trpo_cfg, streams = build_run(cfg)
    if env.horizon != 1:
        raise ConfigError("max-ent fits are defined for one-step bandits")
    rows = training_loop(cfg, env, policy, vf, trpo_cfg, streams)

    sample_rng = streams["kl-mc"]
    states = np.zeros((100_000, env.obs_dim))
    actions, _ = policy.sample(states, sample_rng)
    var = actions.var(axis=0)
    radius = float(np.quantile(np.linalg.norm(actions, axis=1), 0.95))
    returns = [r.mean_return for r in rows[-10:]]
    report = FitReport(
        variance_per_dim=var.tolist(), support_radius_95=radius,
        n_samples=actions.shape[0], steps=len(rows),
        mean_return_last10=float(np.mean(returns)) if returns else None,
    )
    if isinstance(env, CorrelatedBandit):
        cov = np.cov(actions.T)
        report.covariance = cov.tolist()
        report.correlation = float(cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1]))
    elif isinstance(env, BimodalBandit):
        idx = env.mode_index(actions)
        masses = [float(np.mean(idx == k)) for k in range(env.centers.shape[0])]
        report.mode_masses = masses
    return policy, report


# -- density grids ---------------------------------------------------------------

def density_grid(log_density_fn, bounds, resolution: int):
    """Row-major grid of log-densities over a square box.

    ``bounds`` is (lo, hi); returns (xs, ys, grid) with grid[i, j] the
    log-density at (xs[j], ys[i]).
    """
    lo, hi = bounds
    xs = np.linspace(lo, hi, resolution)
    ys = np.linspace(lo, hi, resolution)
    xx, yy = np.meshgrid(xs, ys)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    grid = np.asarray(log_density_fn(pts), float).reshape(resolution, resolution)
    return xs, ys, grid


def grid_integral(xs, ys, log_grid) -> float:
    """Trapezoid integral of exp(log density) over the grid."""
    return float(np.trapezoid(np.trapezoid(np.exp(log_grid), xs, axis=1), ys))


def policy_log_density(policy, state=None):
    """Adapter: a 2-D policy at one fixed state as a plain density over
    actions (bandit observations are constant)."""
    def fn(points):
        points = np.asarray(points, float)
        s = np.zeros((points.shape[0], policy.obs_dim)) if state is None \
            else np.tile(np.asarray(state, float), (points.shape[0], 1))
        return policy.log_prob(s, points)
    return fn


def export_samples_csv(path: str, samples: np.ndarray) -> None:
    from .runner import write_text_atomic
    cols = ",".join(f"x{i}" for i in range(samples.shape[1]))
    lines = [cols] + [",".join(repr(float(v)) for v in row) for row in samples]
    write_text_atomic(path, "\n".join(lines) + "\n")


def export_grid_csv(path: str, xs, ys, grid) -> None:
    from .runner import write_text_atomic
    lines = ["x,y,logp"]
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            lines.append(f"{x!r},{y!r},{grid[i, j]!r}")
    write_text_atomic(path, "\n".join(lines) + "\n")
