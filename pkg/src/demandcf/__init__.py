"""Bias-corrected demand counterfactuals with proxied product attributes.

Subpackages follow the pipeline: ``params`` (composite reparameterization),
``mixedlogit`` (individual-choice engine), ``blp`` (market-level engine),
``correct`` (naive and bias-corrected counterfactual estimates), ``diagnose``
(score diagnostics), ``simlab`` (Monte Carlo laboratory), and ``cli``.
"""

from . import draws, dual, mixedlogit, params
from .errors import (
    ConvergenceError,
    DecompositionError,
    DemandCFError,
    DimensionError,
    RankError,
    ValidationError,
)

__all__ = [
    "draws",
    "dual",
    "mixedlogit",
    "params",
    "ConvergenceError",
    "DecompositionError",
    "DemandCFError",
    "DimensionError",
    "RankError",
    "ValidationError",
]

__version__ = "0.1.0"
