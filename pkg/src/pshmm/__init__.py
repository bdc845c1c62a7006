"""Markov-switching regression with penalized-spline transition effects.

Hidden Markov models whose transition probabilities depend smoothly on
covariates through penalized splines, including tensor-product interactions,
with automatic multiple-smoothing-parameter selection by an approximate
restricted-likelihood criterion.
"""

from .bases import (
    DesignBlock,
    anova_decomposition,
    build_bspline,
    build_cyclic,
    build_radial_2d,
    build_random_effect,
    center_columns,
    evaluate_basis,
    tensor_design,
)
from .config import ConfigError, ModelConfig, build_model, load_config, parse_formula
from .families import FAMILIES, get_family
from .io import ingest_csv, load_result, write_result
from .kernels import BACKEND
from .model import HmmModel, ObservationTable, periodic_stationary
from .penalty import InnerNonConvergenceError, PenaltyBlock, PenaltyModel, inner_fit
from .qreml import (
    FitResult,
    LambdaMap,
    default_lambda_init,
    qreml,
    sdreport_outer,
)

__all__ = [
    "BACKEND",
    "FAMILIES",
    "ConfigError",
    "DesignBlock",
    "FitResult",
    "HmmModel",
    "InnerNonConvergenceError",
    "LambdaMap",
    "ModelConfig",
    "ObservationTable",
    "PenaltyBlock",
    "PenaltyModel",
    "anova_decomposition",
    "build_bspline",
    "build_cyclic",
    "build_model",
    "build_radial_2d",
    "build_random_effect",
    "center_columns",
    "default_lambda_init",
    "evaluate_basis",
    "get_family",
    "ingest_csv",
    "inner_fit",
    "load_config",
    "load_result",
    "parse_formula",
    "periodic_stationary",
    "qreml",
    "sdreport_outer",
    "tensor_design",
    "write_result",
]

__version__ = "0.1.0"
