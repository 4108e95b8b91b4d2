"""Solver and simulator for linear-quadratic partially observed mean-field leader-follower games."""

from .errors import BlowUpError, IOFailure, MFStackError, NonSolvableError, ValidationError
from .model import ModelSpec, TimeGrid, build_model, validate_model
from .strategy import Equilibrium, solve_equilibrium
from .filtersim import simulate_population, limiting_costs

__all__ = [
    "BlowUpError", "IOFailure", "MFStackError", "NonSolvableError", "ValidationError",
    "ModelSpec", "TimeGrid", "build_model", "validate_model",
    "Equilibrium", "solve_equilibrium", "simulate_population", "limiting_costs",
]
