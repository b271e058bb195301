"""Burgers' equation benchmark for the parallel adjoint machinery."""

from .adjoint import AdjointResult, record_and_reverse
from .check import finite_difference_gradient
from .solver import AdjointConfig, SolverConfig, StabilityError

__all__ = ["AdjointConfig", "AdjointResult", "SolverConfig", "StabilityError",
           "finite_difference_gradient", "record_and_reverse"]
