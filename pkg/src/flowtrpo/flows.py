"""Coupling-layer normalizing flows with exact log-densities.

A stack of K invertible transformations pushes source noise from a standard
normal onto the action space. Each transformation reverses the coordinate
order (so different components get coupled across layers) and then applies
an affine coupling: the first d coordinates pass through untouched and
parameterize an elementwise scale/shift of the rest, giving a triangular
Jacobian whose log-determinant is just the sum of the scale outputs.

Conditioning on the state happens additively: a learned state embedding is
added to the running vector after the first transformation, which keeps the
map between noise and action bijective for any embedding network.

Log-density bookkeeping follows the sampling direction noise -> action: each
layer's forward Jacobian contributes +sum(s), so

    log p(action) = log rho0(noise) - sum_layers sum_j s_j.

Inverting action -> noise visits the same s values (the pass-through block
equals the input block), so sampling and density evaluation agree exactly.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ShapeError
from .nets import MlpSpec, mlp_forward
from .params import ParamViews

LOG_2PI = math.log(2.0 * math.pi)


def std_normal_logpdf_t(x: ad.Tensor) -> ad.Tensor:
    """Row-wise standard-normal log-density, (n, m) -> (n, 1)."""
    x = ad.as_tensor(x)
    m = x.data.shape[1]
    quad = ad.scale(ad.tsum(ad.square(x), axis=1), -0.5)
    return ad.add(quad, ad.constant(-0.5 * m * LOG_2PI))


def reverse_columns(x: ad.Tensor) -> ad.Tensor:
    """Fixed coordinate-reversal permutation (its own inverse, |det| = 1)."""
    x = ad.as_tensor(x)
    m = x.data.shape[1]
    if m == 1:
        return x
    return ad.concat([ad.narrow(x, 1, m - 1 - j, 1) for j in range(m)], axis=1)


class FlowStack:
    """K coupling transformations plus a state-injection point.

    For 1-D actions a coupling layer has no coordinates to condition on, so
    each layer degenerates to a learned affine map with two free parameters
    (log-scale and shift); everything else is unchanged.

    ``state_spec=None`` builds an unconditional flow: the injection becomes a
    free bias vector (used by the KL-ball analysis, where the fitted objects
    are plain distributions rather than policies).
    """

    def __init__(
        self,
        dim: int,
        n_layers: int = 4,
        cond_hidden: int = 3,
        state_spec: MlpSpec | None = None,
        inject_after: int = 1,
        scale_clamp: float | None = 5.0,
        prefix: str = "flow",
    ):
        if dim < 1:
            raise ShapeError("flow dimension must be >= 1")
        if not (1 <= inject_after <= n_layers):
            raise ShapeError("state injection point must lie in [1, n_layers]")
        if state_spec is not None and state_spec.out_dim != dim:
            raise ShapeError("state embedding must match the flow dimension")
        self.dim = dim
        self.n_layers = n_layers
        self.split = dim // 2
        self.state_spec = state_spec
        self.inject_after = inject_after
        self.scale_clamp = scale_clamp
        self.prefix = prefix
        if dim >= 2:
            # s and t map the pass-through block to the transformed block;
            # 3 hidden layers of cond_hidden units plus a linear output
            # (cond_hidden=0 degenerates to a bare linear conditioner).
            self.cond_spec = MlpSpec(
                in_dim=self.split,
                out_dim=dim - self.split,
                hidden=(cond_hidden,) * 3 if cond_hidden > 0 else (),
            )
        else:
            self.cond_spec = None

    # -- parameter registration ------------------------------------------
    def specs(self) -> dict:
        out = {}
        for i in range(self.n_layers):
            if self.cond_spec is not None:
                out[f"{self.prefix}/layer{i}/s"] = self.cond_spec
                out[f"{self.prefix}/layer{i}/t"] = self.cond_spec
        if self.state_spec is not None:
            out[f"{self.prefix}/state"] = self.state_spec
        return out

    def extras(self) -> dict:
        out = {}
        if self.cond_spec is None:
            for i in range(self.n_layers):
                out[f"{self.prefix}/layer{i}/s"] = np.zeros(1)
                out[f"{self.prefix}/layer{i}/t"] = np.zeros(1)
        if self.state_spec is None:
            out[f"{self.prefix}/state_bias"] = np.zeros(self.dim)
        return out

    # -- pieces ------------------------------------------------------------
    def _clamp(self, s_raw: ad.Tensor) -> ad.Tensor:
        c = self.scale_clamp
        if c is None:
            return s_raw
        # c * tanh(raw / c): near-identity for small raw, |s| < c always
        return ad.scale(ad.tanh(ad.scale(s_raw, 1.0 / c)), c)

    def _scale_shift(self, views: ParamViews, i: int, x1: ad.Tensor | None):
        if self.cond_spec is not None:
            s_raw = mlp_forward(self.cond_spec, views, f"{self.prefix}/layer{i}/s", x1)
            t = mlp_forward(self.cond_spec, views, f"{self.prefix}/layer{i}/t", x1)
        else:
            s_raw = ad.reshape(views[f"{self.prefix}/layer{i}/s"], (1, 1))
            t = ad.reshape(views[f"{self.prefix}/layer{i}/t"], (1, 1))
        return self._clamp(s_raw), t

    def coupling_forward_t(self, views: ParamViews, i: int, x: ad.Tensor):
        """One coupling transform; returns (y, logdet) with logdet (n, 1)."""
        x = ad.as_tensor(x)
        self._check_width(x)
        n = x.data.shape[0]
        if self.cond_spec is None:
            s, t = self._scale_shift(views, i, None)
            y = ad.add(ad.mul(x, ad.exp(s)), t)
            logdet = ad.add(ad.constant(np.zeros((n, 1))), s)
            return y, logdet
        d = self.split
        x1 = ad.narrow(x, 1, 0, d)
        x2 = ad.narrow(x, 1, d, self.dim - d)
        s, t = self._scale_shift(views, i, x1)
        y2 = ad.add(ad.mul(x2, ad.exp(s)), t)
        y = ad.concat([x1, y2], axis=1)
        return y, ad.tsum(s, axis=1)

    def coupling_inverse_t(self, views: ParamViews, i: int, y: ad.Tensor):
        """Inverse of ``coupling_forward_t``; same logdet values."""
        y = ad.as_tensor(y)
        self._check_width(y)
        n = y.data.shape[0]
        if self.cond_spec is None:
            s, t = self._scale_shift(views, i, None)
            x = ad.mul(ad.sub(y, t), ad.exp(ad.neg(s)))
            logdet = ad.add(ad.constant(np.zeros((n, 1))), s)
            return x, logdet
        d = self.split
        y1 = ad.narrow(y, 1, 0, d)
        y2 = ad.narrow(y, 1, d, self.dim - d)
        s, t = self._scale_shift(views, i, y1)
        x2 = ad.mul(ad.sub(y2, t), ad.exp(ad.neg(s)))
        x = ad.concat([y1, x2], axis=1)
        return x, ad.tsum(s, axis=1)

    def _embed(self, views: ParamViews, states) -> ad.Tensor:
        if self.state_spec is not None:
            if states is None:
                raise ShapeError("flow has a state network but no states were given")
            return mlp_forward(self.state_spec, views, f"{self.prefix}/state", states)
        return views[f"{self.prefix}/state_bias"]

    def _check_width(self, x):
        if x.data.ndim != 2 or x.data.shape[1] != self.dim:
            raise ShapeError(f"expected (n, {self.dim}) input, got {x.shape}")

    # -- full maps ----------------------------------------------------------
    def push_t(self, views: ParamViews, states, eps: ad.Tensor, embed=None):
        """Noise -> action; returns (action, total_logdet).

        ``embed`` overrides the state embedding (used to share one embedding
        across many noise draws per state)."""
        eps = ad.as_tensor(eps)
        self._check_width(eps)
        if embed is None:
            embed = self._embed(views, states)
        h = eps
        total = None
        for i in range(self.n_layers):
            h, ld = self.coupling_forward_t(views, i, reverse_columns(h))
            total = ld if total is None else ad.add(total, ld)
            if i + 1 == self.inject_after:
                h = ad.add(h, embed)
        return h, total

    def invert_t(self, views: ParamViews, states, actions: ad.Tensor, embed=None):
        """Action -> noise; returns (eps, total_logdet)."""
        actions = ad.as_tensor(actions)
        self._check_width(actions)
        if embed is None:
            embed = self._embed(views, states)
        h = actions
        total = None
        for i in reversed(range(self.n_layers)):
            if i + 1 == self.inject_after:
                h = ad.sub(h, embed)
            try:
                h, ld = self.coupling_inverse_t(views, i, h)
            except NumericError as e:
                raise NumericError(f"flow inversion failed at layer {i}: {e}") from None
            h = reverse_columns(h)
            total = ld if total is None else ad.add(total, ld)
        return h, total

    def sample_t(self, views: ParamViews, states, eps: ad.Tensor, embed=None):
        """(action, logprob) for given source noise; logprob is (n, 1)."""
        action, total = self.push_t(views, states, eps, embed=embed)
        logprob = ad.sub(std_normal_logpdf_t(eps), total)
        return action, logprob

    def logprob_t(self, views: ParamViews, states, actions: ad.Tensor, embed=None) -> ad.Tensor:
        """Exact log-density of ``actions`` via full inversion, (n, 1)."""
        eps, total = self.invert_t(views, states, actions, embed=embed)
        return ad.sub(std_normal_logpdf_t(eps), total)
