"""Command-line entry point: ``quboport <subcommand> [options]``.

Option values are resolved in the order built-in default < ``--config``
JSON < command-line flag. Every run writes ``<subcommand>_config.json``
with the resolved values next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .annealer import AnnealSchedule, default_schedule, derive_seed, solve
from .backtest import StrategySpec, run_backtest
from .encoding import EncodingParams, build_fractional_qubo, decode
from .frontier import slicing_range_experiment, trace_frontier
from .market_data import (
    MomentEstimates,
    bundled_fixture_path,
    DEFAULT_UNIVERSE,
    estimate_moments,
    load_prices,
    quarter_windows,
    return_panel,
)
from .penalty import estimate_markowitz_penalty, resolve_penalty
from .qubo import QuboModel
from .two_stage import comparison_row, run_comparison

log = logging.getLogger("quboport")

DEFAULTS = {
    "seed": 0,
    "out_dir": "results",
    "jobs": 1,
    "prices": None,
    "num_assets": 10,
    "tickers": None,
    "moments": None,
    "k": 5,
    "theta": 1.0,
    "m": None,
    "target_return": None,
    "penalty_sign": 1,
    "penalty_samples": None,
    "sweeps": None,
    "t_initial": None,
    "t_final": None,
    "restarts": 8,
    "points": 100,
    "tol": 1e-8,
    "b_low": None,
    "b_high": None,
    "samples": 20,
    "n_samples": None,
    "qubo": None,
    "trace": False,
    "k_values": "5,10,20",
    "runs": 20,
    "compat_overwrite": False,
    "k_set": "5,10,20",
    "theta_set": "1024,32768,1048576,4194304",
    "m_orders": "linear,n_log_n,quadratic",
    "runs_per_cell": 5,
    "scale": None,
    "strategy": "always",
    "task_rank": 1,
    "risk_free": 0.0,
    "candidates": 20,
    "min_history": 8,
    "results": None,
}

STRATEGY_NAMES = {"always": "always_rebalance", "sticky": "sticky"}


# --- argument parsing -------------------------------------------------------

def _global(p):
    p.add_argument("--config", help="JSON file of option values (flags take precedence)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--jobs", type=int)
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _data(p):
    p.add_argument("--prices", help="price CSV (default: bundled fixture)")
    p.add_argument("--num-assets", type=int)
    p.add_argument("--tickers", help="comma-separated tickers (overrides --num-assets)")
    p.add_argument("--moments", help="moments JSON written by ingest (overrides price options)")


def _encoding(p):
    p.add_argument("--k", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--m", type=float, help="penalty coefficient (default: Monte-Carlo estimate)")
    p.add_argument("--target-return", type=float, help="default: seeded draw from the frontier range")
    p.add_argument("--penalty-sign", type=int, choices=(1, -1))
    p.add_argument("--penalty-samples", type=int)


def _schedule(p):
    p.add_argument("--sweeps", type=int)
    p.add_argument("--t-initial", type=float)
    p.add_argument("--t-final", type=float)
    p.add_argument("--restarts", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quboport", description="QUBO mean-variance portfolio toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load prices, write quarterly returns and moments")
    _global(p), _data(p)

    p = sub.add_parser("frontier", help="trace the long-only efficient frontier")
    _global(p), _data(p)
    p.add_argument("--points", type=int)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("slice", help="QUBO solutions at target returns across a slicing range")
    _global(p), _data(p), _encoding(p), _schedule(p)
    p.add_argument("--b-low", type=float)
    p.add_argument("--b-high", type=float)
    p.add_argument("--samples", type=int)

    p = sub.add_parser("estimate-m", help="Monte-Carlo penalty lower bound")
    _global(p), _data(p), _encoding(p)
    p.add_argument("--n-samples", type=int)

    p = sub.add_parser("solve", help="anneal one QUBO")
    _global(p), _data(p), _encoding(p), _schedule(p)
    p.add_argument("--qubo", help="QUBO model JSON (instead of building from moments)")
    p.add_argument("--trace", action="store_true", default=None)

    p = sub.add_parser("two-stage", help="compare solves with and without two-stage search")
    _global(p), _data(p), _encoding(p)
    p.add_argument("--k-values", help="comma-separated K values (default 5,10,20; --k selects one)")
    p.add_argument("--runs", type=int)
    p.add_argument("--compat-overwrite", action="store_true", default=None)

    p = sub.add_parser("sweep", help="(K, theta, M-order) parameter sweep")
    _global(p), _data(p), _schedule(p)
    p.add_argument("--k-set")
    p.add_argument("--theta-set")
    p.add_argument("--m-orders")
    p.add_argument("--runs-per-cell", type=int)
    p.add_argument("--penalty-samples", type=int)
    p.add_argument("--scale", type=float, help="fixed-point scale for precision validation")

    p = sub.add_parser("backtest", help="quarterly Sharpe-ranked backtest")
    _global(p), _data(p), _schedule(p)
    p.add_argument("--strategy", choices=sorted(STRATEGY_NAMES))
    p.add_argument("--task-rank", type=int, choices=(1, 2, 3))
    p.add_argument("--risk-free", type=float)
    p.add_argument("--candidates", type=int)
    p.add_argument("--min-history", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--m", type=float)
    p.add_argument("--penalty-sign", type=int, choices=(1, -1))
    p.add_argument("--penalty-samples", type=int)

    p = sub.add_parser("emit-plots", help="write plot-data CSVs and a manifest from results")
    _global(p)
    p.add_argument("--results", help="results directory (default: --out-dir)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags.

    ``cfg["_provided"]`` holds the keys set by the config file or a flag.
    """
    cfg = dict(DEFAULTS)
    loaded = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
    flags = {k: v for k, v in vars(args).items() if v is not None and k != "config"}
    cfg.update(loaded)
    cfg.update(flags)
    cfg["_provided"] = set(loaded) | set(flags)
    return cfg


# --- helpers ----------------------------------------------------------------

def _csv_list(value, cast):
    if isinstance(value, (list, tuple)):
        return [cast(v) for v in value]
    return [cast(v) for v in str(value).split(",") if v.strip()]


def _universe(cfg):
    if cfg["tickers"]:
        return _csv_list(cfg["tickers"], str)
    if cfg["prices"]:
        return None if cfg["num_assets"] is None else _all_tickers(cfg["prices"])[: cfg["num_assets"]]
    return list(DEFAULT_UNIVERSE[: cfg["num_assets"]])


def _all_tickers(path):
    series, _ = load_prices(path)
    return [s.ticker for s in series]


def _load_series(cfg):
    path = cfg["prices"] or bundled_fixture_path()
    loaded = load_prices(path, _universe(cfg))
    windows = quarter_windows(loaded.series[0].dates)
    return loaded, windows


def _moments(cfg) -> MomentEstimates:
    if cfg["moments"]:
        with open(cfg["moments"], encoding="utf-8") as fh:
            return MomentEstimates.from_dict(json.load(fh))
    loaded, windows = _load_series(cfg)
    panel = return_panel(loaded.series, windows)
    return estimate_moments(panel, [s.ticker for s in loaded.series])


def _target(cfg, moments, trace, seed) -> float:
    if cfg["target_return"] is not None:
        return float(cfg["target_return"])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A26]))
    return float(rng.uniform(trace.r_min, trace.r_max))


def _params(cfg, moments, R, seed) -> tuple[EncodingParams, str]:
    base = EncodingParams(int(cfg["k"]), float(cfg["theta"]), 0.0, R, int(cfg["penalty_sign"]))
    if cfg["m"] is not None:
        return base.replace(M=float(cfg["m"])), "given"
    M, source = resolve_penalty(moments, base, cfg["penalty_samples"], seed)
    return base.replace(M=M), source


def _schedule_for(cfg, model, seed) -> AnnealSchedule:
    sched = default_schedule(model, seed)
    changes = {k: cfg[k] for k in ("sweeps", "t_initial", "t_final", "restarts") if cfg[k] is not None}
    return sched.replace(**changes) if changes else sched


def _fixed_schedule(cfg, seed) -> AnnealSchedule | None:
    """A schedule when every field is given on the command line, else None (per-model default)."""
    if cfg["sweeps"] is None or cfg["t_initial"] is None or cfg["t_final"] is None:
        return None
    return AnnealSchedule(int(cfg["sweeps"]), float(cfg["t_initial"]), float(cfg["t_final"]),
                          int(cfg["restarts"]), seed)


def _write_json(path: Path, data) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    tmp.replace(path)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# --- subcommands ------------------------------------------------------------

def cmd_ingest(cfg, out: Path) -> None:
    loaded, windows = _load_series(cfg)
    tickers = [s.ticker for s in loaded.series]
    panel = return_panel(loaded.series, windows)
    moments = estimate_moments(panel, tickers)
    experiments.write_csv(out / "returns.csv", ["quarter", *tickers],
                          [[w.label, *map(float, row)] for w, row in zip(windows, panel)])
    _write_json(out / "moments.json", moments.to_dict())
    _write_json(out / "ingest.json", {"tickers": tickers, "quarters": len(windows),
                                      "dropped_rows": loaded.dropped_rows})


def cmd_frontier(cfg, out: Path) -> None:
    moments = _moments(cfg)
    trace = trace_frontier(moments, int(cfg["points"]), float(cfg["tol"]))
    header = ["target_return", "variance", "kkt_residual", *[f"w_{t}" for t in moments.tickers]]
    rows = [[p.target_return, p.variance, p.kkt_residual, *map(float, p.weights)] for p in trace.points]
    experiments.write_csv(out / "frontier.csv", header, rows)


def cmd_slice(cfg, out: Path) -> None:
    seed = cfg["seed"]
    moments = _moments(cfg)
    trace = trace_frontier(moments, 100)
    lo = trace.r_min if cfg["b_low"] is None else cfg["b_low"]
    hi = trace.r_max if cfg["b_high"] is None else cfg["b_high"]
    # params.M is only the fallback; each sample estimates its own M
    fallback = cfg["m"] if cfg["m"] is not None else 100.0 * cfg["theta"]
    params = EncodingParams(int(cfg["k"]), float(cfg["theta"]), float(fallback), lo, int(cfg["penalty_sign"]))
    dots = slicing_range_experiment(moments, lo, hi, int(cfg["samples"]), params, _fixed_schedule(cfg, seed),
                                    seed, penalty_samples=cfg["penalty_samples"], trace=trace)
    rows = [[d.b, d.M if d.M is not None else float("nan"), d.expected_return, d.variance, d.error, d.status]
            for d in dots]
    experiments.write_csv(out / "slice.csv", ["b", "m", "expected_return", "variance", "error", "status"], rows)


def cmd_estimate_m(cfg, out: Path) -> None:
    seed = cfg["seed"]
    moments = _moments(cfg)
    trace = trace_frontier(moments, 100)
    R = _target(cfg, moments, trace, seed)
    params = EncodingParams(int(cfg["k"]), float(cfg["theta"]), 0.0, R, int(cfg["penalty_sign"]))
    n_samples = cfg["n_samples"] if cfg["n_samples"] is not None else cfg["penalty_samples"]
    est = estimate_markowitz_penalty(moments, params, n_samples, seed)
    if est.m_lower is None:
        log.warning("no penalty bound derived from %d samples", est.samples_drawn)
    _write_json(out / "estimate_m.json", {**est.to_dict(), "params": params.to_dict()})


def cmd_solve(cfg, out: Path) -> None:
    seed = cfg["seed"]
    result = {}
    if cfg["qubo"]:
        model = QuboModel.from_json(Path(cfg["qubo"]).read_text(encoding="utf-8"))
        moments = params = None
    else:
        moments = _moments(cfg)
        R = _target(cfg, moments, trace_frontier(moments, 100), seed)
        params, source = _params(cfg, moments, R, seed)
        model = build_fractional_qubo(moments, params)
        result["params"] = {**params.to_dict(), "m_source": source}
    sched = _schedule_for(cfg, model, seed)
    res = solve(model, sched, trace=bool(cfg["trace"]))
    log.info("solve took %.3f s", res.wall_time)
    # wall time is left out so reruns are byte-identical
    result["result"] = {k: v for k, v in res.to_dict().items() if k != "wall_time"}
    result["schedule"] = sched.__dict__
    if moments is not None:
        result["solution"] = decode(res.best, moments, params, res.energy).to_dict()
    _write_json(out / "solve.json", result)


def cmd_two_stage(cfg, out: Path) -> None:
    seed = cfg["seed"]
    moments = _moments(cfg)
    trace = trace_frontier(moments, 100)
    ks = [int(cfg["k"])] if "k" in cfg["_provided"] else _csv_list(cfg["k_values"], int)
    rows = []
    for K in ks:
        for run in range(int(cfg["runs"])):
            run_seed = derive_seed(seed, K, run)
            R = _target(cfg, moments, trace, run_seed)
            params, source = _params({**cfg, "k": K}, moments, R, run_seed)
            cmp = run_comparison(moments, params, run_seed, compat_overwrite=bool(cfg["compat_overwrite"]))
            row = comparison_row(cmp, trace, moments, params, run_seed)
            row["run"] = run
            row["m_source"] = source
            rows.append(row)
    header = ["k", "run", "seed", "theta", "m", "m_source", "target_return", "selected_assets",
              "with_return", "with_variance", "with_error", "with_time",
              "without_return", "without_variance", "without_error", "without_time", "improvement_ratio"]
    experiments.write_csv(out / "two_stage.csv", header, [[r[h] for h in header] for r in rows])
    # timings vary run to run; the JSON keeps only the deterministic fields
    stable = [{h: r[h] for h in header if not h.endswith("_time") and h != "improvement_ratio"} for r in rows]
    _write_json(out / "two_stage.json", {"rows": stable})


def cmd_sweep(cfg, out: Path) -> None:
    seed = cfg["seed"]
    moments = _moments(cfg)
    kwargs = {}
    if cfg["scale"] is not None:
        kwargs["scale"] = float(cfg["scale"])
    rows = experiments.sweep(
        moments,
        _csv_list(cfg["k_set"], int),
        _csv_list(cfg["theta_set"], float),
        _csv_list(cfg["m_orders"], str),
        int(cfg["runs_per_cell"]),
        seed,
        schedule=_fixed_schedule(cfg, seed),
        penalty_samples=cfg["penalty_samples"],
        jobs=int(cfg["jobs"]),
        **kwargs,
    )
    experiments.write_csv(out / "sweep.csv", experiments.SWEEP_FIELDS, [r.as_record() for r in rows])
    counts = experiments.null_counts(rows)
    cells = [{"k": k, "theta": th, "m_order": o, "null_results": nulls, "runs": total}
             for (k, th, o), (nulls, total) in sorted(counts.items())]
    _write_json(out / "sweep_cells.json", {"cells": cells})


def cmd_backtest(cfg, out: Path) -> None:
    seed = cfg["seed"]
    loaded, windows = _load_series(cfg)
    strategy = StrategySpec(STRATEGY_NAMES[cfg["strategy"]], int(cfg["task_rank"]))
    params = EncodingParams(int(cfg["k"]), float(cfg["theta"]), float(cfg["m"] or 0.0), 0.0,
                            int(cfg["penalty_sign"]))

    def estimated_m(moments, p, s):
        return resolve_penalty(moments, p, cfg["penalty_samples"], s)[0]

    penalty_fn = estimated_m if cfg["m"] is None else None
    report = run_backtest(loaded.series, windows, strategy, params, _fixed_schedule(cfg, seed), seed,
                          int(cfg["candidates"]), float(cfg["risk_free"]), int(cfg["min_history"]),
                          penalty_fn=penalty_fn)
    stem = f"backtest_{strategy.kind}_task{strategy.task_rank}"
    _write_text(out / f"{stem}.csv", report.to_csv())
    _write_text(out / f"{stem}.json", report.to_json() + "\n")


def cmd_emit_plots(cfg, out: Path) -> None:
    results = Path(cfg["results"]) if cfg["results"] else out
    experiments.emit_plots(results, out / "plots")


COMMANDS = {
    "ingest": cmd_ingest,
    "frontier": cmd_frontier,
    "slice": cmd_slice,
    "estimate-m": cmd_estimate_m,
    "solve": cmd_solve,
    "two-stage": cmd_two_stage,
    "sweep": cmd_sweep,
    "backtest": cmd_backtest,
    "emit-plots": cmd_emit_plots,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    del args.command
    cfg = resolve(args)
    logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: cfg.get(k) for k in sorted(vars(args)) if k not in ("config", "verbose")}
    _write_json(out / f"{command.replace('-', '_')}_config.json", {"command": command, **echo})
    try:
        COMMANDS[command](cfg, out)
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s failed: %s", command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
