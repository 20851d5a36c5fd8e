"""Estimation and empirical-likelihood inference under covariate shift.

Modules: ``data`` (datasets and simulation designs), ``divergence`` (loss pairs),
``funclass`` (polynomial sieve and MLP fitting), ``density_ratio``,
``cond_density`` (conditional density and imputation), ``moments``, ``el``,
``harness`` (Monte-Carlo runs) and ``cli``.
"""

__version__ = "0.1.0"

from .data import Dataset, ScenarioConfig, generate_dataset, load_csv  # noqa: E402
from .divergence import DivergenceSpec  # noqa: E402
from .errors import (ConfigurationError, ContractError, ConvexHullViolation, DomainError,  # noqa: E402
                     EstimationError, InferenceError, NumericError, ParseError, ShapeError, UserError)
