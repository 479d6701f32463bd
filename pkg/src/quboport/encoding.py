"""Markowitz mean-variance objectives encoded as QUBO models.

Both builders minimise::

    theta * w' Cov w + sign * M * (r' w - R)**2

where ``w`` is either the binary selection vector itself or, for the
fractional form, the binary expansion ``w_i = sum_k 2**(k-1-K) x_{i,k}``.
The constant ``sign * M * R**2`` of the expanded square is dropped from the
model; :func:`dropped_constant` returns it for exact energy accounting.

Variable ``(i, k)`` (asset ``i``, bit ``k`` in 1..K) sits at index
``i * K + (k - 1)``, so bit ``K`` is the most significant one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .market_data import MomentEstimates
from .qubo import DimensionError, QuboModel, as_assignment

DEFAULT_VARIABLE_BUDGET = 4096


class EncodingSizeError(ValueError):
    pass


@dataclass(frozen=True)
class EncodingParams:
    K: int
    theta: float
    M: float
    R: float
    penalty_sign: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        # M == 0 is accepted so the penalty can be switched off in experiments
        if not self.M >= 0:
            raise ValueError("M must be non-negative")
        if self.penalty_sign not in (1, -1):
            raise ValueError("penalty_sign must be +1 or -1")

    def replace(self, **changes) -> "EncodingParams":
        return EncodingParams(**{**self.__dict__, **changes})

    def to_dict(self) -> dict:
        return {"k": self.K, "theta": self.theta, "m": self.M,
                "target_return": self.R, "penalty_sign": self.penalty_sign}

    @classmethod
    def from_dict(cls, data: dict) -> "EncodingParams":
        return cls(K=int(data["k"]), theta=float(data["theta"]), M=float(data["m"]),
                   R=float(data["target_return"]), penalty_sign=int(data.get("penalty_sign", 1)))


def bit_weights(K: int) -> np.ndarray:
    """Weight contributed by each bit of an asset: ``2**(k-1-K)`` for k = 1..K."""
    return 2.0 ** (np.arange(1, K + 1) - 1 - K)


def expansion_matrix(n: int, K: int) -> np.ndarray:
    """(n, n*K) matrix mapping bits to raw asset weights."""
    return np.kron(np.eye(n), bit_weights(K)[None, :])


def _penalized_model(moments: MomentEstimates, params: EncodingParams, E: np.ndarray) -> QuboModel:
    cov = moments.covariance
    v = E.T @ moments.expected_returns
    sm = params.penalty_sign * params.M
    quad = params.theta * (E.T @ cov @ E) + sm * np.outer(v, v)
    lin = -2.0 * sm * params.R * v
    return QuboModel(lin, quad)


def build_selection_qubo(moments: MomentEstimates, params: EncodingParams) -> QuboModel:
    """Binary asset-selection model over ``n`` variables (``params.K`` is ignored)."""
    return _penalized_model(moments, params, np.eye(moments.n))


def build_fractional_qubo(moments: MomentEstimates, params: EncodingParams,
                          variable_budget: int = DEFAULT_VARIABLE_BUDGET) -> QuboModel:
    """Binary-expansion model over ``n * K`` variables."""
    size = moments.n * params.K
    if size > variable_budget:
        raise EncodingSizeError(f"{size} variables exceeds the budget of {variable_budget}")
    return _penalized_model(moments, params, expansion_matrix(moments.n, params.K))


def dropped_constant(params: EncodingParams) -> float:
    return params.penalty_sign * params.M * params.R**2


def markowitz_objective(weights, moments: MomentEstimates, params: EncodingParams) -> float:
    """The penalised objective evaluated directly on a weight vector, constant included."""
    w = np.asarray(weights, dtype=float)
    ret = float(w @ moments.expected_returns)
    return params.theta * float(w @ moments.covariance @ w) + params.penalty_sign * params.M * (ret - params.R) ** 2


def raw_weights(assignment, n: int, K: int) -> np.ndarray:
    bits = as_assignment(assignment, n * K).astype(float)
    return bits.reshape(n, K) @ bit_weights(K)


def portfolio_metrics(weights, moments: MomentEstimates) -> tuple[float, float]:
    """(expected return, variance) of a weight vector."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (moments.n,):
        raise DimensionError(f"expected {moments.n} weights, got shape {w.shape}")
    return float(w @ moments.expected_returns), float(w @ moments.covariance @ w)


@dataclass
class PortfolioSolution:
    """A decoded assignment.

    Reported return and variance use the normalised weights; an all-zero
    assignment sets ``all_zero`` and reports both as 0.
    """

    raw_weights: np.ndarray
    normalized_weights: np.ndarray
    expected_return: float
    variance: float
    energy: float
    assignment: np.ndarray = field(repr=False)
    all_zero: bool = False

    def to_dict(self) -> dict:
        return {
            "raw_weights": self.raw_weights.tolist(),
            "normalized_weights": self.normalized_weights.tolist(),
            "expected_return": self.expected_return,
            "variance": self.variance,
            "energy": self.energy,
            "all_zero": self.all_zero,
            "weights_basis": "normalized",
        }


def decode(assignment, moments: MomentEstimates, params: EncodingParams,
           energy: float = float("nan")) -> PortfolioSolution:
    n, K = moments.n, params.K
    bits = as_assignment(assignment, n * K)
    raw = raw_weights(bits, n, K)
    total = raw.sum()
    if total == 0:
        return PortfolioSolution(raw, np.zeros(n), 0.0, 0.0, energy, bits, all_zero=True)
    norm = raw / total
    ret, var = portfolio_metrics(norm, moments)
    return PortfolioSolution(raw, norm, ret, max(var, 0.0), energy, bits)
