"""Parameter sweep over (K, theta, M-order) and plot-data emission."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .annealer import AnnealSchedule, default_schedule, derive_seed, solve
from .encoding import EncodingParams, build_fractional_qubo, decode
from .frontier import FrontierTrace, frontier_error, trace_frontier
from .market_data import MomentEstimates
from .penalty import FALLBACK_M_PER_THETA, estimate_markowitz_penalty
from .qubo import DEFAULT_SCALE, PrecisionBudget, validate_precision

M_ORDERS = ("linear", "n_log_n", "quadratic")
# orders agree at theta = 2 because log2(2) == 1
ANCHOR_THETA = 2.0

SWEEP_FIELDS = ["k", "theta", "log2_theta", "m_order", "run", "target_return", "m", "m_source", "status",
                "error", "expected_return", "variance", "offending_terms"]
NULL_STATUSES = ("precision", "all-zero")


def order_value(order: str, theta: float) -> float:
    if order == "linear":
        return theta
    if order == "n_log_n":
        return theta * math.log2(theta)
    if order == "quadratic":
        return theta**2
    raise ValueError(f"unknown M order {order!r}")


def m_for_order(order: str, theta: float, anchor_m: float) -> float:
    """Scale an estimate made at ``ANCHOR_THETA`` to ``theta`` along the given order."""
    c = anchor_m / order_value(order, ANCHOR_THETA)
    return c * order_value(order, theta)


@dataclass
class SweepRow:
    k: int
    theta: float
    m_order: str
    run: int
    target_return: float
    m: float
    m_source: str
    status: str
    error: float = float("nan")
    expected_return: float = float("nan")
    variance: float = float("nan")
    offending_terms: int = 0

    @property
    def null(self) -> bool:
        return self.status in NULL_STATUSES

    def as_record(self) -> list:
        return [self.k, self.theta, math.log2(self.theta), self.m_order, self.run, self.target_return,
                self.m, self.m_source, self.status, self.error, self.expected_return, self.variance, self.offending_terms]


def run_targets(trace: FrontierTrace, runs: int, seed: int) -> list[float]:
    """Seeded target returns drawn uniformly over the frontier range, shared by all cells."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EE9]))
    return [float(x) for x in rng.uniform(trace.r_min, trace.r_max, runs)]


def sweep(moments: MomentEstimates, K_set: Sequence[int], theta_set: Sequence[float],
          m_orders: Sequence[str] = M_ORDERS, runs_per_cell: int = 5, seed: int = 0,
          budget: PrecisionBudget = PrecisionBudget(), scale: float = DEFAULT_SCALE,
          schedule: AnnealSchedule | None = None, penalty_samples: int | None = None,
          trace: FrontierTrace | None = None, fallback_m: float = FALLBACK_M_PER_THETA, jobs: int = 1) -> list[SweepRow]:
    """One row per (K, theta, M-order, run).

    A run's status is ``precision`` when the model fails the bit budget (it
    is not solved), ``all-zero`` when the decoded portfolio is empty, else
    ``ok``; both failures count as null results. When no penalty estimate
    exists at the anchor, ``fallback_m`` per unit theta is used and
    ``m_source`` says so. Targets and anchor
    estimates are shared across the theta and M-order axes so cells differ
    only in those parameters. ``jobs > 1`` runs solves in worker processes.
    """
    if not (K_set and theta_set and m_orders):
        raise ValueError("sweep grids must be non-empty")
    for order in m_orders:
        order_value(order, ANCHOR_THETA)
    if trace is None:
        trace = trace_frontier(moments, 100)
    targets = run_targets(trace, runs_per_cell, seed)
    tasks = []
    for K in K_set:
        anchors = []
        for j, R in enumerate(targets):
            est = estimate_markowitz_penalty(moments, EncodingParams(K, ANCHOR_THETA, 1.0, R),
                                             penalty_samples, derive_seed(seed, K, j))
            anchors.append(est.m_lower)
        for theta in theta_set:
            for order in m_orders:
                for j, R in enumerate(targets):
                    tasks.append((moments, trace, K, float(theta), order, j, R, anchors[j],
                                  budget, scale, schedule, derive_seed(seed, K, j, 1), fallback_m))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_task, tasks))
    return [_sweep_task(t) for t in tasks]


def _sweep_task(args) -> SweepRow:
    return _sweep_run(*args)


def _sweep_run(moments, trace, K, theta, order, run, R, anchor, budget, scale, schedule, seed, fallback_m):
    source = "estimate" if anchor is not None else "fallback"
    anchor = anchor if anchor is not None else fallback_m * ANCHOR_THETA
    M = m_for_order(order, theta, anchor)
    params = EncodingParams(K, theta, M, R)
    model = build_fractional_qubo(moments, params)
    report = validate_precision(model, budget, scale)
    if not report.ok:
        return SweepRow(K, theta, order, run, R, M, source, "precision", offending_terms=len(report.offending_terms))
    sched = default_schedule(model, seed) if schedule is None else schedule.replace(seed=seed)
    res = solve(model, sched)
    sol = decode(res.best, moments, params, res.energy)
    if sol.all_zero:
        return SweepRow(K, theta, order, run, R, M, source, "all-zero")
    err = frontier_error(sol, trace, moments)
    return SweepRow(K, theta, order, run, R, M, source, "ok", err.value, sol.expected_return, sol.variance)


def null_counts(rows: Iterable[SweepRow]) -> dict[tuple, tuple[int, int]]:
    """(null runs, total runs) per (K, theta, M-order) cell."""
    out: dict[tuple, list[int]] = {}
    for r in rows:
        cell = out.setdefault((r.k, r.theta, r.m_order), [0, 0])
        cell[0] += r.null
        cell[1] += 1
    return {k: (v[0], v[1]) for k, v in out.items()}


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    tmp.replace(path)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


FIGURE_FAMILIES = (
    "efficient_frontier",
    "sweep_error_by_theta",
    "sweep_error_by_m_order",
    "backtest_curves",
    "two_stage_frontier",
    "two_stage_error_boxes",
    "improvement_ratio",
)

# family -> result files it reads; the frontier family also overlays slice dots when present
_SOURCES = {
    "efficient_frontier": ("frontier.csv", "slice.csv"),
    "sweep_error_by_theta": ("sweep.csv",),
    "sweep_error_by_m_order": ("sweep.csv",),
    "backtest_curves": ("backtest_*.csv",),
    "two_stage_frontier": ("two_stage.csv",),
    "two_stage_error_boxes": ("two_stage.csv",),
    "improvement_ratio": ("two_stage.csv",),
}


class MissingResultsError(FileNotFoundError):
    pass


def _find(results_dir: Path, pattern: str) -> list[Path]:
    return sorted(results_dir.glob(pattern))


def _frontier_plot(files):
    header = ["layer", "target_return", "expected_return", "variance", "error", "status"]
    out = []
    for path in files:
        for r in read_csv(path):
            if path.name == "frontier.csv":
                out.append(["frontier", r["target_return"], r["target_return"], r["variance"], "", "ok"])
            else:
                out.append(["slice", r["b"], r["expected_return"], r["variance"], r["error"], r["status"]])
    return header, out


def _sweep_by_theta(files):
    cols = ["k", "log2_theta", "run", "error", "status"]
    return cols, [[r[c] for c in cols] for r in read_csv(files[0])]


def _sweep_by_order(files):
    cols = ["k", "log2_theta", "m_order", "run", "error", "status"]
    return cols, [[r[c] for c in cols] for r in read_csv(files[0])]


def _backtest_plot(files):
    cols = ["strategy", "task_rank", "quarter", "realized_return", "cumulative_return", "status"]
    out = []
    for path in files:
        out.extend([r.get(c, "") for c in cols] for r in read_csv(path))
    return cols, out


def _two_stage_frontier(files):
    out = []
    for r in read_csv(files[0]):
        out.append([r["k"], r["seed"], "with", r["with_return"], r["with_variance"]])
        out.append([r["k"], r["seed"], "without", r["without_return"], r["without_variance"]])
    return ["k", "seed", "pipeline", "expected_return", "variance"], out


def _two_stage_errors(files):
    out = []
    for r in read_csv(files[0]):
        out.append([r["k"], r["seed"], "with", r["with_error"]])
        out.append([r["k"], r["seed"], "without", r["without_error"]])
    return ["k", "seed", "pipeline", "error"], out


def _ratio_plot(files):
    rows = read_csv(files[0])
    return ["k", "seed", "improvement_ratio"], [[r["k"], r["seed"], r["improvement_ratio"]] for r in rows]


_BUILDERS = {
    "efficient_frontier": _frontier_plot,
    "sweep_error_by_theta": _sweep_by_theta,
    "sweep_error_by_m_order": _sweep_by_order,
    "backtest_curves": _backtest_plot,
    "two_stage_frontier": _two_stage_frontier,
    "two_stage_error_boxes": _two_stage_errors,
    "improvement_ratio": _ratio_plot,
}


def emit_plots(results_dir, out_dir=None) -> dict:
    """Write one plot-data CSV per figure family whose inputs exist, plus ``manifest.json``.

    Families without inputs are listed under ``missing`` together with the
    result files they need. Raises :class:`MissingResultsError` when no
    family can be built.
    """
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir is not None else results_dir / "plots"
    available, missing = {}, {}
    for fam in FIGURE_FAMILIES:
        files = [f for pat in _SOURCES[fam] for f in _find(results_dir, pat)]
        if files:
            available[fam] = files
        else:
            missing[fam] = list(_SOURCES[fam])
    if not available:
        needed = sorted({p for pats in _SOURCES.values() for p in pats})
        raise MissingResultsError(f"no experiment results in {results_dir}; expected any of: {', '.join(needed)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    plots = []
    for fam, files in available.items():
        header, rows = _BUILDERS[fam](files)
        target = out_dir / f"{fam}.csv"
        write_csv(target, header, rows)
        plots.append({"family": fam, "file": target.name, "sources": [f.name for f in files], "rows": len(rows)})
    manifest = {
        "generated_at": dt.datetime.now(dt.timezone.utc).isoformat(),
        "plots": plots,
        "missing": missing,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest
