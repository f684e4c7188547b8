"""Marginal-treatment-effect estimation with efficient influence functions.

Submodules:
    numerics    linear solves, normal CDF, seeded random streams
    basis       the outcome-mean regression basis and target weight vectors
    propensity  nonparametric kernel propensity scores with CV bandwidths
    estimators  conventional and efficient coefficient estimation
    targets     ATE/ATT/ATU/ASG/IV estimates and the treatment-effect curve
    simulation  seeded data-generating process and replication harness
    cli         command-line front door (simulate / estimate / curve / bandwidth-sweep)
"""

__version__ = "0.1.0"

from .basis import MteModelSpec
from .estimators import Dataset, GammaEstimate, conventional_gamma, efficient_gamma
from .numerics import SeededRng
from .propensity import KernelConfig, PropensityFit, fit_propensity
from .simulation import DgpConfig, dgp_generate, run_experiment, true_targets
from .targets import MteCurve, TargetEstimate, estimate_iv, estimate_target, mte_curve

__all__ = [
    "__version__",
    "MteModelSpec",
    "Dataset",
    "GammaEstimate",
    "conventional_gamma",
    "efficient_gamma",
    "SeededRng",
    "KernelConfig",
    "PropensityFit",
    "fit_propensity",
    "DgpConfig",
    "dgp_generate",
    "run_experiment",
    "true_targets",
    "MteCurve",
    "TargetEstimate",
    "estimate_iv",
    "estimate_target",
    "mte_curve",
]
