"""Two-stage search: binary asset selection, then a biased fractional solve.

Stage one solves the selection QUBO (one bit per asset). Each selected
asset ``e`` then contributes the penalty::

    P_e = 1 - sum_k x_{e,k} + sum_{k<k'} x_{e,k} x_{e,k'}

scaled by ``c_e * M`` with ``c_e`` uniform in (0, 0.5]. ``P_e`` is 1 when
none of the asset's bits is set and 0 when one or two are, so the second
stage is pushed to keep holding the selected assets.

Both second-stage models are annealed with the same kind of schedule; the
"with" wall time includes stage one. Optionally the "with" chains are
warm-started from the stage-one selection.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .annealer import AnnealSchedule, default_schedule, solve, warm_up
from .encoding import (
    EncodingParams,
    PortfolioSolution,
    build_fractional_qubo,
    build_selection_qubo,
    decode,
)
from .frontier import FrontierTrace, frontier_error
from .market_data import MomentEstimates
from .qubo import QuboModel, evaluate


@dataclass
class QuadraticExpression:
    """A QUBO model plus a constant offset."""

    model: QuboModel
    constant: float = 0.0

    def value(self, x) -> float:
        return evaluate(self.model, x) + self.constant

    def __add__(self, other: "QuadraticExpression") -> "QuadraticExpression":
        return QuadraticExpression(self.model + other.model, self.constant + other.constant)

    def scaled(self, alpha: float) -> "QuadraticExpression":
        return QuadraticExpression(alpha * self.model, alpha * self.constant)


@dataclass
class StageOneResult:
    selected_assets: tuple
    assignment: np.ndarray
    energy: float
    wall_time: float = 0.0

    @property
    def empty(self) -> bool:
        return not self.selected_assets


@dataclass
class PipelineResult:
    solution: PortfolioSolution
    wall_time: float
    sweeps_run: int = 0


@dataclass
class TwoStageComparison:
    with_result: PipelineResult
    without_result: PipelineResult
    stage_one: StageOneResult
    factors: list = field(default_factory=list)

    @property
    def improvement_ratio(self) -> float:
        return improvement_ratio(self.without_result.wall_time, self.with_result.wall_time)


def improvement_ratio(t_without: float, t_with: float) -> float:
    return t_without / t_with


def _anneal(model, schedule, seed, initial=None):
    sched = schedule if schedule is not None else default_schedule(model, seed)
    return solve(model, sched, initial=initial)


def stage_one(moments: MomentEstimates, params: EncodingParams,
              schedule: AnnealSchedule | None = None, seed: int = 0) -> StageOneResult:
    """Solve the binary selection QUBO and collect the assets set to 1."""
    start = time.perf_counter()
    model = build_selection_qubo(moments, params)
    res = _anneal(model, schedule, seed)
    selected = tuple(int(i) for i in np.flatnonzero(res.best))
    return StageOneResult(selected, res.best, res.energy, time.perf_counter() - start)


def inequality_penalty_term(asset: int, K: int, num_assets: int | None = None) -> QuadraticExpression:
    """``P_e`` on the bit block of ``asset``, over ``num_assets * K`` variables."""
    if K < 1:
        raise ValueError("K must be >= 1")
    num_assets = asset + 1 if num_assets is None else num_assets
    N = num_assets * K
    lin = np.zeros(N)
    pair = np.zeros((N, N))
    base = asset * K
    for i in range(K):
        lin[base + i] -= 1.0
        for cross in range(i + 1, K):
            pair[base + i, base + cross] += 1.0
    # symmetric storage counts each pair twice
    quad = 0.5 * (pair + pair.T)
    return QuadraticExpression(QuboModel(lin, quad), 1.0)


def draw_factors(selected, seed: int) -> list[float]:
    """One factor in (0, 0.5] per selected asset, in the given order."""
    rng = np.random.default_rng(seed)
    return [0.5 * (1.0 - u) for u in rng.random(len(selected))]


def adjusted_penalty(selected, num_assets: int, K: int, M: float, seed: int,
                     factors=None, overwrite: bool = False) -> QuadraticExpression:
    """Sum of ``c_e * M * P_e`` over the selected assets.

    ``overwrite=True`` keeps only the last asset's term, reproducing the
    literal reassignment inside the selection loop.
    """
    selected = list(selected)
    total = QuadraticExpression(QuboModel.zeros(num_assets * K), 0.0)
    if not selected:
        return total
    if factors is None:
        factors = draw_factors(selected, seed)
    for e, c in zip(selected, factors):
        term = inequality_penalty_term(e, K, num_assets).scaled(c * M)
        total = term if overwrite else total + term
    return total


def warm_start(selected, num_assets: int, K: int) -> np.ndarray:
    """Bits with only the most significant bit of each selected asset set."""
    x = np.zeros(num_assets * K, dtype=np.int8)
    for e in selected:
        x[e * K + K - 1] = 1
    return x


def run_comparison(moments: MomentEstimates, params: EncodingParams, seed: int = 0,
                   schedule: AnnealSchedule | None = None, compat_overwrite: bool = False,
                   factors=None, warm: bool = False, refine_fraction: float = 1.0,
                   patience: int | None = None) -> TwoStageComparison:
    """Solve the fractional QUBO with and without the two-stage preprocessing.

    Both second-stage solves use ``schedule`` (default: :func:`default_schedule`
    of the model being solved) with ``patience`` as the freeze stop. With
    ``warm=True`` the "with" chains start from :func:`warm_start` and from
    ``refine_fraction * t_initial``.
    """
    n, K = moments.n, params.K
    h1 = build_fractional_qubo(moments, params)
    warm_up()

    s1 = stage_one(moments, params, seed=seed)
    t0 = time.perf_counter()
    adjust = adjusted_penalty(s1.selected_assets, n, K, params.M, seed, factors=factors, overwrite=compat_overwrite)
    h2 = h1 + adjust.model
    sched_with = schedule if schedule is not None else default_schedule(h2, seed)
    sched_without = schedule if schedule is not None else default_schedule(h1, seed)
    if patience is not None:
        sched_with = sched_with.replace(patience=patience)
        sched_without = sched_without.replace(patience=patience)
    initial = None
    if warm and s1.selected_assets:
        initial = warm_start(s1.selected_assets, n, K)
        t_start = max(sched_with.t_initial * refine_fraction, sched_with.t_final)
        sched_with = sched_with.replace(t_initial=t_start)
    res_with = solve(h2, sched_with, initial=initial)
    t_with = s1.wall_time + (time.perf_counter() - t0)

    t1 = time.perf_counter()
    res_without = solve(h1, sched_without)
    t_without = time.perf_counter() - t1

    with_sol = decode(res_with.best, moments, params, energy=res_with.energy)
    without_sol = decode(res_without.best, moments, params, energy=res_without.energy)
    used = factors if factors is not None else draw_factors(s1.selected_assets, seed)
    return TwoStageComparison(
        PipelineResult(with_sol, t_with, res_with.sweeps_run),
        PipelineResult(without_sol, t_without, res_without.sweeps_run),
        s1,
        list(used),
    )


def comparison_row(cmp: TwoStageComparison, trace: FrontierTrace, moments: MomentEstimates,
                   params: EncodingParams, seed: int) -> dict:
    """Flat record for the with/without box plots and ratio series."""
    e_with = frontier_error(cmp.with_result.solution, trace, moments)
    e_without = frontier_error(cmp.without_result.solution, trace, moments)
    return {
        "seed": seed,
        "k": params.K,
        "theta": params.theta,
        "m": params.M,
        "target_return": params.R,
        "selected_assets": " ".join(str(i) for i in cmp.stage_one.selected_assets),
        "with_return": cmp.with_result.solution.expected_return,
        "with_variance": cmp.with_result.solution.variance,
        "with_error": e_with.value,
        "with_time": cmp.with_result.wall_time,
        "without_return": cmp.without_result.solution.expected_return,
        "without_variance": cmp.without_result.solution.variance,
        "without_error": e_without.value,
        "without_time": cmp.without_result.wall_time,
        "improvement_ratio": cmp.improvement_ratio,
    }
