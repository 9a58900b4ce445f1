"""Neural Monge maps learned by alternating max-min training.

Modules: :mod:`nn` (networks and gradients), :mod:`costs`, :mod:`solver`
(training loop), :mod:`duality` (gap certificates), :mod:`oracles` (exact
and closed-form OT), :mod:`geo` (sphere and land data) and the harness in
:mod:`experiments` / :mod:`cli`.
"""

from .costs import CostDomainError, CostSpec, quadratic
from .duality import CTransformConfig, DualityReport, duality_report
from .nn import NetworkSpec
from .oracles import discrete_ot_exact, gaussian_w2, monotone_map_1d, sinkhorn
from .solver import TrainConfig, TrainedMap, TrainHistory, train

__version__ = "0.1.0"

__all__ = [
    "CTransformConfig",
    "CostDomainError",
    "CostSpec",
    "DualityReport",
    "NetworkSpec",
    "TrainConfig",
    "TrainHistory",
    "TrainedMap",
    "discrete_ot_exact",
    "duality_report",
    "gaussian_w2",
    "monotone_map_1d",
    "quadratic",
    "sinkhorn",
    "train",
]
