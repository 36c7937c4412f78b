"""Stochastic and dynamic iteratively regularized Gauss-Newton methods for a Darcy inverse problem."""

from .core import (CapacityError, ConditioningError, DivergenceError, Grid2D, GridField, ObservationStream,
                   SolverConfig, StepSchedule, ValidationError)
from .covariance import CovarianceOperator, MaternParams, assemble_covariance
from .darcy import DarcyModel, ObservationOperator, ground_truth
from .solver import run, step_primal, step_woodbury

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConditioningError", "DivergenceError", "ValidationError",
    "Grid2D", "GridField", "ObservationStream", "SolverConfig", "StepSchedule",
    "CovarianceOperator", "MaternParams", "assemble_covariance",
    "DarcyModel", "ObservationOperator", "ground_truth",
    "run", "step_primal", "step_woodbury",
]
