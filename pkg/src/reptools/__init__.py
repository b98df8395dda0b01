"""Rerandomization based on covariate-balance p-values.

Modules:
    numerics    linear algebra and reference distributions
    regression  least squares and multinomial-logit fits
    balance     balance statistics and acceptance rules
    design      complete randomization and rejection rerandomization
    estimate    regression estimators and plug-in intervals
    asymlaw     truncated-normal limit laws
    simharness  Monte Carlo harness and file output
"""

from .balance import BalanceReport, BalanceScheme, ExperimentFrame, evaluate
from .design import DesignResult, RngStream, complete_randomization, rerandomize
from .estimate import Contrast, EffectEstimate, estimate_multi_arm, estimate_two_arm, plugin_inference

__version__ = "0.1.0"

__all__ = [
    "BalanceReport",
    "BalanceScheme",
    "Contrast",
    "DesignResult",
    "EffectEstimate",
    "ExperimentFrame",
    "RngStream",
    "complete_randomization",
    "estimate_multi_arm",
    "estimate_two_arm",
    "evaluate",
    "plugin_inference",
    "rerandomize",
]
