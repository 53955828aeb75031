"""Trust-region policy updates.

One update: estimate the surrogate gradient g, solve H x = g by conjugate
gradient where H is the Fisher metric (Hessian of the sample mean KL between
the old policy and a perturbed one), scale x so the quadratic KL model equals
the trust-region radius, then backtrack until the *sampled* KL constraint
holds and the surrogate improves. Rejected updates leave parameters bitwise
unchanged.

Hessian-vector products never build a second-order tape: they central
finite-difference the KL gradient along the query direction, which is exact
enough for CG and keeps the differentiation engine first-order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .envs import TrajectoryBatch
from .errors import NumericError, ShapeError
from .policies import Policy

log = logging.getLogger(__name__)

# log-prob gap beyond which importance ratios are meaningless
RATIO_GAP_LIMIT = 30.0


@dataclass
class TrpoConfig:
    epsilon: float = 0.01          # KL radius
    cg_iters: int = 10
    cg_damping: float = 0.1
    hvp_fd_step: float = 1e-5
    backtrack_ratio: float = 0.5
    max_backtracks: int = 10
    entropy_coef: float = 0.0      # adds c * H to the surrogate (max-ent mode)
    entropy_samples: int = 64      # draws per state for the entropy estimate
    fvp_subsample: int = 256       # rows used for curvature estimation (0 = all)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ShapeError("trust region size epsilon must be > 0")
        if self.cg_damping < 0:
            raise ShapeError("cg damping must be >= 0")


@dataclass
class UpdateReport:
    surrogate_before: float
    surrogate_after: float
    kl_after: float
    step_scale: float
    cg_residual: float
    accepted: bool
    entropy: float = float("nan")


def surrogate_t(policy: Policy, theta, batch: TrajectoryBatch,
                entropy_coef: float = 0.0, entropy_noise=None) -> ad.Tensor:
    """Importance-weighted advantage mean (plus optional entropy bonus).

    Raises NumericError when the new/old log-prob gap exceeds
    ``RATIO_GAP_LIMIT``: the ratio estimate has collapsed.
    """
    lp_new = policy.log_prob_t(theta, batch.states, batch.actions)
    gap = lp_new.data[:, 0] - batch.logps
    worst = float(np.max(np.abs(gap))) if gap.size else 0.0
    if worst > RATIO_GAP_LIMIT:
        raise NumericError(
            f"surrogate log-ratio gap {worst:.1f} exceeds {RATIO_GAP_LIMIT}; "
            "policy collapsed"
        )
    ratio = ad.exp(ad.sub(lp_new, ad.constant(batch.logps.reshape(-1, 1))))
    surr = ad.tmean(ad.mul(ratio, ad.constant(batch.advantages.reshape(-1, 1))))
    if entropy_coef:
        ent = policy.entropy_mc_t(theta, batch.states, entropy_noise)
        surr = ad.add(surr, ad.scale(ent, entropy_coef))
    return surr


def surrogate_value(policy, vector, batch, entropy_coef=0.0, entropy_noise=None) -> float:
    return float(surrogate_t(policy, vector, batch, entropy_coef, entropy_noise).data)


def surrogate_grad(policy, batch, entropy_coef=0.0, entropy_noise=None):
    """(value, gradient) of the surrogate at the policy's current params."""
    with ad.Tape() as tape:
        theta = tape.leaf(policy.params.vector)
        surr = surrogate_t(policy, theta, batch, entropy_coef, entropy_noise)
        return float(surr.data), tape.gradient(surr, theta)


def sample_kl(policy, vector, batch) -> float:
    """Mean KL(old || new) over the batch's cached (state, action, logp)
    draws; exactly zero at the collecting parameters."""
    lp_new = policy.log_prob(batch.states, batch.actions, vector=vector)
    return float(np.mean(batch.logps - lp_new))


def kl_grad(policy, vector, states, actions, logps) -> np.ndarray:
    with ad.Tape() as tape:
        theta = tape.leaf(np.asarray(vector, float))
        lp_new = policy.log_prob_t(theta, states, actions)
        kl = ad.tmean(ad.sub(ad.constant(logps.reshape(-1, 1)), lp_new))
        return tape.gradient(kl, theta)


def _fvp_rows(batch: TrajectoryBatch, k: int):
    """Deterministic strided subset of the batch for curvature estimation."""
    T = len(batch)
    if k <= 0 or k >= T:
        return batch.states, batch.actions, batch.logps
    idx = np.unique(np.linspace(0, T - 1, k).round().astype(int))
    return batch.states[idx], batch.actions[idx], batch.logps[idx]


def fisher_vector_product(policy, batch, v: np.ndarray, cfg: TrpoConfig) -> np.ndarray:
    """(H + damping I) v with H the Hessian of the sample mean KL, by central
    differences of the KL gradient along v.

    Curvature is estimated on a strided subset of the batch
    (``cfg.fvp_subsample`` rows); the line-search KL check stays full-batch.
    """
    v = np.asarray(v, float)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        if not np.isfinite(norm):
            raise NumericError("fisher_vector_product got a non-finite vector")
        return np.zeros_like(v)
    states, actions, logps = _fvp_rows(batch, cfg.fvp_subsample)
    delta = cfg.hvp_fd_step / norm
    base = policy.params.vector
    g_plus = kl_grad(policy, base + delta * v, states, actions, logps)
    g_minus = kl_grad(policy, base - delta * v, states, actions, logps)
    hv = (g_plus - g_minus) / (2.0 * delta)
    if not np.all(np.isfinite(hv)):
        raise NumericError("fisher_vector_product produced non-finite values")
    return hv + cfg.cg_damping * v


def conjugate_gradient(matvec, b: np.ndarray, iters: int = 10, tol: float = 1e-10):
    """Solve A x = b for SPD A; returns (x, relative residual |Ax-b|/|b|).

    The sample-based Fisher is only PSD in expectation, so a finite batch can
    expose negative-curvature directions; CG stops before taking such a step
    (Steihaug-style) and returns the progress so far.
    """
    b = np.asarray(b, float)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), 0.0
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rdotr = float(r @ r)
    for _ in range(iters):
        if np.sqrt(rdotr) / b_norm < tol:
            break
        Ap = matvec(p)
        if not np.all(np.isfinite(Ap)):
            raise NumericError("conjugate gradient saw a non-finite matvec")
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            log.debug("cg: negative curvature (p'Ap=%.3g), stopping early", pAp)
            break
        alpha = rdotr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        new_rdotr = float(r @ r)
        p = r + (new_rdotr / rdotr) * p
        rdotr = new_rdotr
    residual = float(np.linalg.norm(matvec(x) - b) / b_norm)
    return x, residual


def scale_to_trust_region(x: np.ndarray, matvec, epsilon: float) -> np.ndarray:
    """Scale x so the quadratic KL model 1/2 d' H d equals epsilon,
    i.e. d = sqrt(2 eps / (x' H x)) x."""
    quad = float(x @ matvec(x))
    if quad <= 0 or not np.isfinite(quad):
        raise NumericError(f"trust-region quadratic form is {quad}")
    return np.sqrt(2.0 * epsilon / quad) * x


def trpo_update(policy: Policy, batch: TrajectoryBatch, cfg: TrpoConfig,
                entropy_rng=None) -> UpdateReport:
    """One trust-region step; mutates the policy's parameters only on accept."""
    if len(batch) == 0:
        raise ShapeError("empty batch")
    if batch.advantages is None:
        raise ShapeError("batch has no advantages; run gae_advantages first")

    noise = None
    if cfg.entropy_coef:
        if entropy_rng is None:
            raise ShapeError("entropy_coef > 0 requires an entropy rng")
        # one draw per update, reused across the line search (common random
        # numbers keep the accept comparison consistent)
        noise = policy.entropy_noise(batch.states, cfg.entropy_samples, entropy_rng)

    theta_old = policy.params.vector.copy()
    surr_before, g = surrogate_grad(policy, batch, cfg.entropy_coef, noise)

    if float(np.max(np.abs(g))) < 1e-12:
        return UpdateReport(surr_before, surr_before, 0.0, 0.0, 0.0, accepted=False)

    matvec = lambda u: fisher_vector_product(policy, batch, u, cfg)
    x, residual = conjugate_gradient(matvec, g, iters=cfg.cg_iters)
    if not np.any(x):
        x = g  # CG bailed immediately on negative curvature
    try:
        full_step = scale_to_trust_region(x, matvec, cfg.epsilon)
    except NumericError:
        # negative curvature along the solve direction; the raw gradient
        # with damping is the last resort before giving up the iteration
        full_step = scale_to_trust_region(g, matvec, cfg.epsilon)

    scale = 1.0
    for _ in range(cfg.max_backtracks):
        candidate = theta_old + scale * full_step
        try:
            kl = sample_kl(policy, candidate, batch)
            surr = surrogate_value(policy, candidate, batch, cfg.entropy_coef, noise)
        except NumericError:
            kl, surr = np.inf, -np.inf
        if kl <= cfg.epsilon and surr >= surr_before:
            policy.set_vector(candidate)
            return UpdateReport(surr_before, surr, kl, scale, residual, accepted=True)
        scale *= cfg.backtrack_ratio
    log.debug("line search exhausted %d backtracks; update rejected",
              cfg.max_backtracks)
    return UpdateReport(surr_before, surr_before, 0.0, 0.0, residual, accepted=False)
