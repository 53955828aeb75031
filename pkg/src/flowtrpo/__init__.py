"""Trust-region policy optimization over pluggable action distributions.

The package couples a small float64 tape-autodiff engine with coupling-layer
normalizing flows, so the trust-region update (conjugate-gradient solve of
the Fisher system, KL-constrained step, backtracking line search) works over
any policy that exposes an exact, differentiable log-density.
"""

from .analysis import (FitReport, KlBallSpec, fit_to_kl_boundary,
                       maxent_bandit_fit, maxent_target_covariance)
from .config import RunConfig, load_config, parse_config
from .envs import (TrajectoryBatch, ValueFunction, collect, fit_value,
                   gae_advantages, make_env)
from .errors import (ConfigError, ContractError, DomainError, FlowTrpoError,
                     NumericError, ShapeError)
from .flows import FlowStack
from .nets import MlpSpec
from .params import FlatParams
from .policies import (Policy, PolicyArch, kl_mc, kl_mc_t, make_policy,
                       policy_from_checkpoint)
from .trpo import (TrpoConfig, UpdateReport, conjugate_gradient,
                   fisher_vector_product, trpo_update)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DomainError", "FitReport", "FlatParams",
    "FlowStack", "FlowTrpoError", "KlBallSpec", "MlpSpec", "NumericError",
    "Policy", "PolicyArch", "RunConfig", "ShapeError", "TrajectoryBatch",
    "TrpoConfig", "UpdateReport", "ValueFunction", "collect",
    "conjugate_gradient", "fisher_vector_product", "fit_to_kl_boundary",
    "fit_value", "gae_advantages", "kl_mc", "kl_mc_t", "load_config",
    "make_env", "make_policy", "maxent_bandit_fit",
    "maxent_target_covariance", "parse_config", "policy_from_checkpoint",
    "trpo_update",
]
