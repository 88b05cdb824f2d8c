"""brwlab: branching random walks off the boundary case.

Simulation of the forward process, spinal (size-biased) samplers, importance
sampling for the global minimum, renewal quantities of the associated random
walks, and tail/limit-law diagnostics.
"""

from .brw import BrwRun, Prune, global_min, grow, martingale_limits, simulate
from .model import (BUILTIN, BinaryGaussian, FixedCountIid, Gaussian, PoissonCountIid,
                    Shifted, TwoPoint, find_kappa, model_from_dict, psi,
                    validate_conditions)
from .rwalk import extract_ladders, renewal_limits, walk_law
from .spine import (MinBelow, WLimitAbove, conditional_sample, direct_min_tail,
                    estimate_min_tail)

__version__ = "0.1.0"

__all__ = [
    "BUILTIN", "BinaryGaussian", "FixedCountIid", "Gaussian", "PoissonCountIid",
    "Shifted", "TwoPoint", "find_kappa", "model_from_dict", "psi",
    "validate_conditions", "BrwRun", "Prune", "global_min", "grow", "martingale_limits",
    "simulate", "extract_ladders", "renewal_limits", "walk_law", "MinBelow", "WLimitAbove",
    "conditional_sample", "direct_min_tail", "estimate_min_tail", "__version__",
]
