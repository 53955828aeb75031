"""Fixed-topology multilayer perceptrons over flat parameter vectors.

All networks here are tanh MLPs differing only in depth, width and the final
activation; policies and flow conditioners compose them by registering their
blocks in a shared layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .params import FlatParams, LayoutBuilder, ParamViews

FINAL_ACTIVATIONS = ("none", "tanh", "softplus1")


@dataclass(frozen=True)
class MlpSpec:
    """Shape of one MLP: tanh hidden layers, selectable final activation.

    ``hidden = ()`` degenerates to a bare linear map. ``softplus1`` maps the
    pre-activation f to log(exp(f)+1)+1, the Beta shape parameterization.
    """

    in_dim: int
    out_dim: int
    hidden: tuple = ()
    final: str = "none"

    def __post_init__(self):
        if self.final not in FINAL_ACTIVATIONS:
            raise ShapeError(f"unknown final activation '{self.final}'")

    def layer_dims(self):
        dims = (self.in_dim,) + tuple(self.hidden) + (self.out_dim,)
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims())

    def register(self, builder: LayoutBuilder, prefix: str) -> None:
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            builder.add(f"{prefix}/W{i}", (fan_in, fan_out))
            builder.add(f"{prefix}/b{i}", (fan_out,))

    def init_blocks(self, prefix: str, rng: np.random.Generator) -> dict:
        """Scaled-uniform weights (fan-in/fan-out rule), zero biases."""
        blocks = {}
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            blocks[f"{prefix}/W{i}"] = rng.uniform(-limit, limit, (fan_in, fan_out))
            blocks[f"{prefix}/b{i}"] = np.zeros(fan_out)
        return blocks


def mlp_forward(spec: MlpSpec, views: ParamViews, prefix: str, x: ad.Tensor) -> ad.Tensor:
    """Run the MLP on a (n, in_dim) batch; returns (n, out_dim)."""
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != spec.in_dim:
        raise ShapeError(
            f"mlp '{prefix}' expects (n, {spec.in_dim}) input, got {x.shape}"
        )
    h = x
    n_layers = len(spec.layer_dims())
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, views[f"{prefix}/W{i}"]), views[f"{prefix}/b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    if spec.final == "tanh":
        h = ad.tanh(h)
    elif spec.final == "softplus1":
        h = ad.add(ad.softplus(h), ad.constant(1.0))
    return h


def build_params(specs: dict, extra: dict, rng: np.random.Generator) -> FlatParams:
    """Assemble a FlatParams from named MLPs plus free (name -> init array)
    parameter blocks, in insertion order."""
    builder = LayoutBuilder()
    blocks = {}
    for prefix, spec in specs.items():
        spec.register(builder, prefix)
        blocks.update(spec.init_blocks(prefix, rng))
    for name, init in extra.items():
        init = np.asarray(init, dtype=np.float64)
        builder.add(name, init.shape)
        blocks[name] = init
    return FlatParams.from_blocks(builder.build(), blocks)
