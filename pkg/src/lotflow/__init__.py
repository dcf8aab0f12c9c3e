"""Forecasting toolkit for lot-ownership dynamics in master-planned communities."""

from lotflow.core import (
    FREE_PARAMS,
    OwnerCategory,
    StateVector,
    TransitionMatrix,
    ValidationError,
    annual_permits,
    buildout_pct,
    from_free_parameters,
    step,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "FREE_PARAMS",
    "OwnerCategory",
    "StateVector",
    "TransitionMatrix",
    "ValidationError",
    "annual_permits",
    "buildout_pct",
    "from_free_parameters",
    "step",
    "validate",
    "__version__",
]
