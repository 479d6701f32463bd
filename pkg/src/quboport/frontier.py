"""Long-only efficient frontier and the QUBO-versus-frontier error metric.

The frontier point at target return ``R`` solves::

    minimise w' Cov w   s.t.  sum(w) = 1,  r' w >= R,  w >= 0

with SLSQP, followed by an exact solve of the KKT system on the detected
active set. Every point carries its KKT residual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import lsq_linear, minimize

from .annealer import AnnealSchedule, default_schedule, solve
from .encoding import EncodingParams, PortfolioSolution, build_fractional_qubo, decode
from .market_data import MomentEstimates
from .penalty import estimate_markowitz_penalty

log = logging.getLogger(__name__)

ERROR_DEFINITION = "relative variance excess at matched return: (var - var_frontier(R)) / var_frontier(R)"


class InfeasibleReturnError(ValueError):
    pass


@dataclass
class FrontierPoint:
    target_return: float
    weights: np.ndarray
    variance: float
    kkt_residual: float = 0.0


@dataclass
class FrontierTrace:
    points: list
    r_min: float
    r_max: float

    @property
    def returns(self) -> np.ndarray:
        return np.array([p.target_return for p in self.points])

    @property
    def variances(self) -> np.ndarray:
        return np.array([p.variance for p in self.points])

    def is_convex(self, tol: float = 1e-8) -> bool:
        """Discrete convexity of variance in target return."""
        x, y = self.returns, self.variances
        for i in range(1, len(x) - 1):
            span = x[i + 1] - x[i - 1]
            if span <= 0:
                continue
            chord = y[i - 1] + (y[i + 1] - y[i - 1]) * (x[i] - x[i - 1]) / span
            if y[i] > chord + tol:
                return False
        return True

    def interpolate(self, R: float) -> float:
        return float(np.interp(R, self.returns, self.variances))

    def to_rows(self) -> list[list[float]]:
        return [[p.target_return, p.variance, *p.weights.tolist()] for p in self.points]


def kkt_residual(cov: np.ndarray, r: np.ndarray, R: float | None, w: np.ndarray) -> float:
    """Largest violation of the KKT conditions at ``w``.

    Multipliers (budget free, return >= 0, bounds >= 0 off the support) are
    fitted by bounded least squares. ``R=None`` drops the return constraint.
    """
    n = w.shape[0]
    grad = 2.0 * cov @ w
    off = np.flatnonzero(w <= 1e-10)
    ret_active = R is not None and r @ w - R <= 1e-10
    cols = [np.ones(n)] + ([r] if ret_active else [])
    lower = [-np.inf] + ([0.0] if ret_active else [])
    for j in off:
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(e)
        lower.append(0.0)
    G = np.column_stack(cols)
    fit = lsq_linear(G, grad, bounds=(lower, [np.inf] * len(lower)), method="bvls", tol=1e-15)
    stationarity = np.max(np.abs(G @ fit.x - grad)) if n else 0.0
    viol = [
        stationarity,
        abs(w.sum() - 1.0),
        max(0.0, -w.min()),
        max(0.0, R - r @ w) if R is not None else 0.0,
    ]
    return float(max(viol))


def _polish(cov, r, R, w):
    """Exact equality-constrained solve on the active set of ``w``; None if it is not better."""
    n = w.shape[0]
    support = np.flatnonzero(w > 1e-9)
    ret_active = R is not None and r @ w - R <= 1e-9
    m = support.size
    rows = [np.ones(m)] + ([r[support]] if ret_active else [])
    G = np.vstack(rows)
    k = G.shape[0]
    kkt = np.zeros((m + k, m + k))
    kkt[:m, :m] = 2.0 * cov[np.ix_(support, support)]
    kkt[:m, m:] = -G.T
    kkt[m:, :m] = G
    rhs = np.concatenate([np.zeros(m), [1.0], [R] if ret_active else []])
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    cand = np.zeros(n)
    cand[support] = sol[:m]
    if cand.min() < -1e-12 or (R is not None and r @ cand < R - 1e-12) or abs(cand.sum() - 1) > 1e-10:
        return None
    cand = np.clip(cand, 0.0, None)
    cand /= cand.sum()
    return cand


def _min_variance(cov: np.ndarray, r: np.ndarray, R: float | None, tol: float) -> np.ndarray:
    n = cov.shape[0]
    if n == 1:
        return np.ones(1)
    cons = [{"type": "eq", "fun": lambda w: w.sum() - 1.0, "jac": lambda w: np.ones(n)}]
    if R is not None:
        cons.append({"type": "ineq", "fun": lambda w: r @ w - R, "jac": lambda w: r})
    x0 = np.full(n, 1.0 / n)
    if R is not None and r @ x0 < R:
        x0 = np.zeros(n)
        x0[np.argmax(r)] = 1.0
    res = minimize(
        lambda w: w @ cov @ w,
        x0,
        jac=lambda w: 2.0 * cov @ w,
        bounds=[(0.0, 1.0)] * n,
        constraints=cons,
        method="SLSQP",
        options={"ftol": 1e-16, "maxiter": 2000},
    )
    w = np.clip(res.x, 0.0, None)
    w /= w.sum()
    best, best_res = w, kkt_residual(cov, r, R, w)
    polished = _polish(cov, r, R, w)
    if polished is not None:
        p_res = kkt_residual(cov, r, R, polished)
        if p_res < best_res:
            best, best_res = polished, p_res
    if best_res > tol:
        log.warning("frontier point at R=%s has KKT residual %.3g > tol %.3g", R, best_res, tol)
    return best


def min_variance_at_return(moments: MomentEstimates, R: float, tol: float = 1e-8) -> FrontierPoint:
    """Minimum long-only variance among fully invested portfolios with return >= R."""
    r, cov = moments.expected_returns, moments.covariance
    r_max = float(r.max())
    if R > r_max + 1e-12:
        raise InfeasibleReturnError(f"target return {R} above the largest asset return {r_max}")
    R_eff = min(R, r_max)
    w = _min_variance(cov, r, R_eff, tol)
    return FrontierPoint(float(R), w, max(float(w @ cov @ w), 0.0), kkt_residual(cov, r, R_eff, w))


def global_min_variance(moments: MomentEstimates, tol: float = 1e-8) -> FrontierPoint:
    """Long-only minimum-variance portfolio with no return constraint."""
    r, cov = moments.expected_returns, moments.covariance
    w = _min_variance(cov, r, None, tol)
    return FrontierPoint(float(r @ w), w, max(float(w @ cov @ w), 0.0), kkt_residual(cov, r, None, w))


def trace_frontier(moments: MomentEstimates, num_points: int = 100, tol: float = 1e-8) -> FrontierTrace:
    """Frontier points at evenly spaced returns from the minimum-variance return to max(r)."""
    if num_points < 2:
        raise ValueError("num_points must be >= 2")
    gmv = global_min_variance(moments, tol)
    r_lo = gmv.target_return
    r_hi = float(moments.expected_returns.max())
    r_lo = min(r_lo, r_hi)
    points = []
    for R in np.linspace(r_lo, r_hi, num_points):
        if R <= r_lo:
            points.append(FrontierPoint(float(R), gmv.weights.copy(), gmv.variance, gmv.kkt_residual))
        else:
            points.append(min_variance_at_return(moments, float(R), tol))
    return FrontierTrace(points, r_lo, r_hi)


@dataclass
class FrontierError:
    value: float
    in_range: bool
    frontier_variance: float
    note: str = ""


def frontier_error(solution: PortfolioSolution, trace: FrontierTrace,
                   moments: MomentEstimates | None = None, tol: float = 1e-8) -> FrontierError:
    """Relative variance excess of ``solution`` over the frontier at its own return.

    With ``moments`` the frontier variance is solved exactly at the
    solution's return; otherwise it is linearly interpolated on ``trace``.
    Returns below the minimum-variance return compare against the global
    minimum variance (the constraint ``r'w >= R`` is slack there) and are
    flagged as out of range, as are returns above ``trace.r_max``.
    """
    if solution.all_zero:
        return FrontierError(float("nan"), False, float("nan"), "all-zero portfolio")
    R = solution.expected_return
    in_range = trace.r_min - 1e-12 <= R <= trace.r_max + 1e-12
    if R > trace.r_max + 1e-12:
        return FrontierError(float("nan"), False, float("nan"), "return above frontier range")
    if R <= trace.r_min:
        f = trace.points[0].variance
    elif moments is not None:
        f = min_variance_at_return(moments, R, tol).variance
    else:
        f = trace.interpolate(R)
    if f <= 0:
        return FrontierError(float("nan"), in_range, f, "zero frontier variance")
    return FrontierError((solution.variance - f) / f, in_range, f)


@dataclass
class SliceDot:
    b: float
    M: float | None
    expected_return: float
    variance: float
    error: float
    status: str = "ok"
    solution: PortfolioSolution | None = field(default=None, repr=False)


Solver = Callable[[object], np.ndarray]


def annealing_solver(schedule: AnnealSchedule | None, seed: int) -> Solver:
    def run(model):
        sched = schedule if schedule is not None else default_schedule(model, seed)
        return solve(model, sched).best
    return run


def slicing_range_experiment(moments: MomentEstimates, b_low: float, b_high: float, num_samples: int,
                             params: EncodingParams, schedule: AnnealSchedule | None = None, seed: int = 0,
                             solver: Solver | None = None, penalty_samples: int | None = None,
                             trace: FrontierTrace | None = None) -> list[SliceDot]:
    """Solve the fractional QUBO at evenly spaced targets in ``[b_low, b_high]``.

    For each target the penalty coefficient comes from the Monte-Carlo
    estimate (times ``1 + 1e-6``); ``params.M`` is the fallback when no bound
    is derived. ``solver`` maps a model to bits and defaults to annealing.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    if trace is None:
        trace = trace_frontier(moments, 100)
    solver = solver or annealing_solver(schedule, seed)
    targets = np.linspace(b_low, b_high, num_samples) if num_samples > 1 else np.array([b_low])
    dots = []
    for k, b in enumerate(targets):
        p = params.replace(R=float(b))
        try:
            est = estimate_markowitz_penalty(moments, p, penalty_samples, seed + k)
            M = est.m_lower * (1 + 1e-6) if est.m_lower is not None else params.M
            p = p.replace(M=M)
            model = build_fractional_qubo(moments, p)
            bits = solver(model)
            sol = decode(bits, moments, p)
            err = frontier_error(sol, trace, moments)
            status = "ok" if not sol.all_zero else "all-zero"
            dots.append(SliceDot(float(b), M, sol.expected_return, sol.variance, err.value, status, sol))
        except Exception as exc:  # recorded per sample; the sweep carries on
            log.warning("slice sample b=%s failed: %s", b, exc)
            dots.append(SliceDot(float(b), None, float("nan"), float("nan"), float("nan"), f"error: {exc}"))
    return dots
