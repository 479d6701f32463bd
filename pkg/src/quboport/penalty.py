"""Monte-Carlo lower bound on the penalty coefficient of a constrained QUBO.

Given an objective ``H`` and a constraint ``A x = b``, uniform random samples
are ranked by constraint residual ``||A x - b||^2``. The least-violating
sample ``x_from`` is compared against every sample with strictly lower
objective; each such ``x_to`` that is strictly more violating yields::

    M > (E(x_from) - E(x_to)) / (res(x_to) - res(x_from))

and the largest of these is the estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoding import EncodingParams, build_fractional_qubo, expansion_matrix
from .market_data import MomentEstimates
from .qubo import DimensionError, QuboModel, as_assignment

log = logging.getLogger(__name__)

MAX_DEFAULT_SAMPLES = 100_000


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape[0] != b.shape[0]:
            raise DimensionError("A and b have different row counts")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def num_vars(self) -> int:
        return self.A.shape[1]

    def residuals(self, X: np.ndarray) -> np.ndarray:
        """Squared residual ``||A x - b||^2`` for each row of ``X``."""
        diff = np.atleast_2d(X) @ self.A.T - self.b[None, :]
        return np.einsum("ij,ij->i", diff, diff)


@dataclass
class PenaltyEstimate:
    m_lower: float | None
    x_from: np.ndarray
    num_candidates: int
    samples_drawn: int
    seed: int
    x_to: np.ndarray = field(repr=False, default=None)
    candidates: np.ndarray = field(repr=False, default=None)

    @property
    def status(self) -> str:
        return "ok" if self.m_lower is not None else "no bound derived"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "m_lower": self.m_lower,
            "x_from": [int(v) for v in self.x_from],
            "num_candidates": self.num_candidates,
            "x_to_set_size": 0 if self.x_to is None else int(self.x_to.shape[0]),
            "samples_drawn": self.samples_drawn,
            "seed": self.seed,
        }


def default_sample_count(num_vars: int) -> int:
    return min(10 * 2 ** min(num_vars, 14), MAX_DEFAULT_SAMPLES)


def sample_assignments(num_vars: int, N: int, seed: int) -> np.ndarray:
    """``N`` uniform random bit strings (rows), reproducible per seed."""
    if num_vars < 1 or N < 1:
        raise ValueError("num_vars and N must be positive")
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(N, num_vars), dtype=np.int8)


def _energies(H: QuboModel, X: np.ndarray) -> np.ndarray:
    Xf = X.astype(float)
    return Xf @ H.linear + np.einsum("ij,ij->i", Xf @ H.quadratic, Xf)


def least_violating(X: np.ndarray, residuals: np.ndarray) -> int:
    """Row index of the minimum residual; ties go to the lexicographically smallest row."""
    tied = np.flatnonzero(residuals == residuals.min())
    if tied.size == 1:
        return int(tied[0])
    rows = X[tied]
    order = np.lexsort(rows.T[::-1])
    return int(tied[order[0]])


def candidate_bounds(H: QuboModel, c: ConstraintSpec, x_from, X: np.ndarray):
    """Samples that beat ``x_from`` on the objective and their candidate bounds.

    Returns ``(x_to, values)``; ``values`` is NaN where the residual gap is
    not strictly positive (no bound derivable from that pair).
    """
    x_from = as_assignment(x_from, H.num_vars)
    # one batch for both sides so rounding cannot split copies of x_from
    energies = _energies(H, np.vstack([x_from[None, :], X]))
    e_from, energies = energies[0], energies[1:]
    r_from = c.residuals(x_from[None, :].astype(float))[0]
    beats = (energies < e_from) & np.any(X != x_from, axis=1)
    x_to = X[beats]
    gap = c.residuals(x_to.astype(float)) - r_from
    values = np.full(x_to.shape[0], np.nan)
    ok = gap > 0
    values[ok] = (e_from - energies[beats][ok]) / gap[ok]
    return x_to, values


def estimate_penalty(H: QuboModel, c: ConstraintSpec, N: int | None = None, seed: int = 0,
                     samples=None) -> PenaltyEstimate:
    """Largest candidate bound over ``N`` uniform samples.

    ``samples`` replaces the random draw with an explicit (rows = assignments)
    sample set, e.g. a full enumeration.
    """
    if c.num_vars != H.num_vars:
        raise DimensionError(f"constraint has {c.num_vars} columns, model has {H.num_vars} variables")
    if samples is not None:
        X = np.atleast_2d(np.asarray(samples)).astype(np.int8)
        if X.shape[1] != H.num_vars:
            raise DimensionError("sample width does not match the model")
        N = X.shape[0]
    else:
        if N is None:
            N = default_sample_count(H.num_vars)
        if N < 2:
            raise ValueError("need at least 2 samples")
        X = sample_assignments(H.num_vars, N, seed)
    x_from = X[least_violating(X, c.residuals(X.astype(float)))].copy()
    x_to, values = candidate_bounds(H, c, x_from, X)
    kept = values[~np.isnan(values)]
    m_lower = float(kept.max()) if kept.size else None
    return PenaltyEstimate(m_lower, x_from, int(kept.size), N, seed, x_to, values)


def penalized_energy(H: QuboModel, c: ConstraintSpec, x, M: float) -> float:
    xf = as_assignment(x, H.num_vars).astype(float)
    return float(H.linear @ xf + xf @ H.quadratic @ xf + M * c.residuals(xf[None, :])[0])


def markowitz_problem(moments: MomentEstimates, params: EncodingParams) -> tuple[QuboModel, ConstraintSpec]:
    """Risk-only objective and return constraint of the fractional encoding."""
    H = build_fractional_qubo(moments, params.replace(M=0.0))
    v = expansion_matrix(moments.n, params.K).T @ moments.expected_returns
    return H, ConstraintSpec(v[None, :], [params.R])


def estimate_markowitz_penalty(moments: MomentEstimates, params: EncodingParams,
                               N: int | None = None, seed: int = 0) -> PenaltyEstimate:
    H, c = markowitz_problem(moments, params)
    return estimate_penalty(H, c, N, seed)


# M used when no sample pair yields a bound, in units of theta
FALLBACK_M_PER_THETA = 100.0


def resolve_penalty(moments: MomentEstimates, params: EncodingParams, N: int | None = None, seed: int = 0,
                    attempts: int = 3, margin: float = 1e-6) -> tuple[float, str]:
    """Penalty coefficient from the estimator, retried on fresh seeds.

    Returns ``(M, source)`` where ``source`` is ``"estimate"`` or
    ``"fallback"``; the fallback is ``FALLBACK_M_PER_THETA * theta``.
    """
    for a in range(attempts):
        est = estimate_markowitz_penalty(moments, params, N, seed + a)
        if est.m_lower is not None:
            return est.m_lower * (1.0 + margin), "estimate"
    M = FALLBACK_M_PER_THETA * params.theta
    log.warning("no penalty bound after %d attempts; falling back to M=%g", attempts, M)
    return M, "fallback"
