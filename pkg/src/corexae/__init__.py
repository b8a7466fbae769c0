"""Total correlation explanation as a variational auto-encoding objective, on a small numpy autodiff core."""

from .infotheory import DiscreteJoint, GaussianJoint, discrete_corex_objective, discrete_tc, gaussian_tc
from .models import build_model, encode, generate
from .objectives import ObjectiveConfig, anchor_bound, corex_bound, elbo, layer_gain_report, stacked_bound
from .rng import Rng
from .tensor import GradTape, Tensor, backward, grad_check
from .training import resolve_config, train

__version__ = "0.1.0"

__all__ = [
    "DiscreteJoint",
    "GaussianJoint",
    "GradTape",
    "ObjectiveConfig",
    "Rng",
    "Tensor",
    "anchor_bound",
    "backward",
    "build_model",
    "corex_bound",
    "discrete_corex_objective",
    "discrete_tc",
    "elbo",
    "encode",
    "gaussian_tc",
    "generate",
    "grad_check",
    "layer_gain_report",
    "resolve_config",
    "stacked_bound",
    "train",
]
