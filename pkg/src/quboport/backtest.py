"""Quarterly backtest of Sharpe-ranked QUBO portfolio configurations.

At the start of each quarter moments are estimated from all earlier
quarters, candidate configurations are generated by solving the fractional
QUBO over a grid of target returns, and one candidate is held for the
quarter according to the strategy:

* ``always_rebalance``: hold this quarter's rank-``task_rank`` candidate.
* ``sticky``: keep the held configuration unless this quarter's
  rank-``task_rank`` candidate has a strictly higher Sharpe ratio than the
  held one had when it was selected.

Quarterly realised returns are summed (not compounded) into the total
return; a compounded column is reported alongside for context.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .annealer import AnnealSchedule, default_schedule, derive_seed, solve
from .encoding import EncodingParams, PortfolioSolution, build_fractional_qubo, decode
from .frontier import global_min_variance
from .market_data import (
    InsufficientDataError,
    MomentEstimates,
    PriceSeries,
    QuarterWindow,
    estimate_moments,
    return_panel,
)

STRATEGIES = ("always_rebalance", "sticky")
DEFAULT_CANDIDATES = 20


class UndefinedSharpeError(ValueError):
    pass


class InsufficientCandidatesError(ValueError):
    pass


def sharpe_ratio(expected_return: float, variance: float, risk_free: float = 0.0) -> float:
    if not variance > 0:
        raise UndefinedSharpeError(f"Sharpe ratio undefined for variance {variance}")
    return (expected_return - risk_free) / math.sqrt(variance)


@dataclass(frozen=True)
class StrategySpec:
    kind: str = "always_rebalance"
    task_rank: int = 1

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.task_rank not in (1, 2, 3):
            raise ValueError("task_rank must be 1, 2 or 3")


@dataclass
class Candidate:
    solution: PortfolioSolution
    sharpe: float
    target_return: float = float("nan")

    @property
    def weights(self) -> np.ndarray:
        return self.solution.normalized_weights


def rank_configurations(solutions: Sequence[PortfolioSolution], risk_free: float = 0.0,
                        targets: Sequence[float] | None = None) -> list[Candidate]:
    """Deduplicate by weight vector, drop undefined Sharpe, sort best first.

    Ties on Sharpe go to the lower variance, then to the lexicographically
    smaller weight vector.
    """
    targets = [float("nan")] * len(solutions) if targets is None else list(targets)
    seen = set()
    out = []
    for sol, tgt in zip(solutions, targets):
        if sol.all_zero:
            continue
        key = tuple(np.round(sol.normalized_weights, 12))
        if key in seen:
            continue
        try:
            s = sharpe_ratio(sol.expected_return, sol.variance, risk_free)
        except UndefinedSharpeError:
            continue
        seen.add(key)
        out.append(Candidate(sol, s, tgt))
    out.sort(key=lambda c: (-c.sharpe, c.solution.variance, tuple(c.weights)))
    return out


Solver = Callable[[object, int], np.ndarray]


def _anneal_solver(schedule: AnnealSchedule | None) -> Solver:
    def run(model, seed):
        sched = default_schedule(model, seed) if schedule is None else schedule.replace(seed=seed)
        return solve(model, sched).best
    return run


def target_grid(moments: MomentEstimates, count: int) -> np.ndarray:
    lo = global_min_variance(moments).target_return
    hi = float(moments.expected_returns.max())
    return np.linspace(min(lo, hi), hi, count)


def candidate_configurations(moments: MomentEstimates, params: EncodingParams,
                             schedule: AnnealSchedule | None = None, seed: int = 0,
                             count: int = DEFAULT_CANDIDATES, risk_free: float = 0.0,
                             solver: Solver | None = None, penalty_fn=None) -> list[Candidate]:
    """Sharpe-ranked distinct configurations from a grid of ``count`` target returns.

    ``penalty_fn(moments, params, seed)`` may supply M per target; otherwise
    ``params.M`` is used throughout.
    """
    if count < 3:
        raise ValueError("count must be >= 3")
    solver = solver or _anneal_solver(schedule)
    targets = target_grid(moments, count)
    solutions = []
    for j, R in enumerate(targets):
        p = params.replace(R=float(R))
        if penalty_fn is not None:
            p = p.replace(M=float(penalty_fn(moments, p, derive_seed(seed, j, 1))))
        bits = solver(build_fractional_qubo(moments, p), derive_seed(seed, j))
        solutions.append(decode(bits, moments, p))
    ranked = rank_configurations(solutions, risk_free, targets)
    if len(ranked) < 3:
        raise InsufficientCandidatesError(f"only {len(ranked)} distinct valid configurations")
    return ranked


@dataclass
class BacktestRow:
    quarter: str
    weights: list
    sharpe: float
    realized_return: float
    cumulative_return: float
    compounded_return: float
    switched: bool
    status: str = "ok"


@dataclass
class BacktestReport:
    rows: list
    config: dict
    tickers: list = field(default_factory=list)

    @property
    def total_return(self) -> float:
        return self.rows[-1].cumulative_return if self.rows else 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "tickers": self.tickers,
            "total_return": self.total_return,
            "rows": [r.__dict__ for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        kind, rank = self.config.get("strategy", ""), self.config.get("task_rank", "")
        w.writerow(["strategy", "task_rank", "quarter", "sharpe", "realized_return", "cumulative_return",
                    "compounded_return", "switched", "status", *[f"w_{t}" for t in self.tickers]])
        for r in self.rows:
            w.writerow([kind, rank, r.quarter, repr(r.sharpe), repr(r.realized_return), repr(r.cumulative_return),
                        repr(r.compounded_return), int(r.switched), r.status, *[repr(x) for x in r.weights]])
        return buf.getvalue()


def choose(strategy: StrategySpec, ranked: Sequence[Candidate], held: Candidate | None) -> tuple[Candidate, bool]:
    """Return the configuration to hold and whether it differs from ``held``."""
    pick = ranked[strategy.task_rank - 1]
    if held is None:
        return pick, True
    if strategy.kind == "sticky" and not pick.sharpe > held.sharpe:
        return held, False
    return pick, not np.array_equal(pick.weights, held.weights)


def run_backtest(series: Sequence[PriceSeries], windows: Sequence[QuarterWindow], strategy: StrategySpec,
                 params: EncodingParams, schedule: AnnealSchedule | None = None, seed: int = 0,
                 count: int = DEFAULT_CANDIDATES, risk_free: float = 0.0, min_history: int = 4,
                 solver: Solver | None = None, candidate_fn=None, penalty_fn=None) -> BacktestReport:
    """Walk forward through ``windows`` from quarter ``min_history`` onward.

    ``candidate_fn(moments, quarter_index)`` may replace candidate generation
    (used to inject fixed candidate sets).
    """
    if len(windows) < 2:
        raise ValueError("need at least 2 quarters")
    panel = return_panel(series, windows)
    tickers = [s.ticker for s in series]
    rows, held = [], None
    cumulative, growth = 0.0, 1.0
    for t in range(min_history, len(windows)):
        status = "ok"
        switched = False
        try:
            moments = estimate_moments(panel[:t], tickers)
            if candidate_fn is not None:
                ranked = candidate_fn(moments, t)
            else:
                ranked = candidate_configurations(moments, params, schedule, derive_seed(seed, t), count,
                                                  risk_free, solver, penalty_fn)
            held, switched = choose(strategy, ranked, held)
        except (InsufficientDataError, InsufficientCandidatesError, ValueError) as exc:
            status = f"skipped: {exc}"
        weights = held.weights if held is not None else np.zeros(len(tickers))
        realized = float(weights @ panel[t])
        cumulative += realized
        growth *= 1.0 + realized
        rows.append(BacktestRow(
            quarter=windows[t].label,
            weights=[float(x) for x in weights],
            sharpe=held.sharpe if held is not None else float("nan"),
            realized_return=realized,
            cumulative_return=cumulative,
            compounded_return=growth - 1.0,
            switched=switched,
            status=status,
        ))
    config = {
        "k": params.K, "theta": params.theta, "penalty_sign": params.penalty_sign,
        "m": "estimated per target" if penalty_fn is not None else params.M,
        "strategy": strategy.kind, "task_rank": strategy.task_rank, "seed": seed,
        "candidates": count, "risk_free": risk_free, "min_history": min_history,
        "schedule": None if schedule is None else schedule.__dict__,
        "sticky_comparison": "incumbent selection-time Sharpe vs new candidate Sharpe",
        "total_return_aggregation": "additive",
    }
    return BacktestReport(rows, config, tickers)


def additive_total(returns: Sequence[float]) -> float:
    return float(sum(returns))
