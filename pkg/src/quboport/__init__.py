"""Mean-variance portfolio selection as QUBO, solved by simulated annealing."""

from .annealer import AnnealSchedule, SolveResult, default_schedule, solve
from .encoding import EncodingParams, PortfolioSolution, build_fractional_qubo, build_selection_qubo, decode
from .frontier import frontier_error, min_variance_at_return, trace_frontier
from .market_data import MomentEstimates, estimate_moments, load_prices
from .penalty import estimate_markowitz_penalty, estimate_penalty
from .qubo import PrecisionBudget, QuboModel, brute_force_solve, evaluate, validate_precision

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "EncodingParams",
    "MomentEstimates",
    "PortfolioSolution",
    "PrecisionBudget",
    "QuboModel",
    "SolveResult",
    "brute_force_solve",
    "build_fractional_qubo",
    "build_selection_qubo",
    "decode",
    "default_schedule",
    "estimate_markowitz_penalty",
    "estimate_moments",
    "estimate_penalty",
    "evaluate",
    "frontier_error",
    "load_prices",
    "min_variance_at_return",
    "solve",
    "trace_frontier",
    "validate_precision",
]
