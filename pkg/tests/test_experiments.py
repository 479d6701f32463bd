import json
import math

import pytest

from quboport.annealer import AnnealSchedule
from quboport.experiments import (
    ANCHOR_THETA,
    FIGURE_FAMILIES,
    SWEEP_FIELDS,
    MissingResultsError,
    emit_plots,
    m_for_order,
    null_counts,
    read_csv,
    sweep,
    write_csv,
)
from quboport.frontier import trace_frontier
from quboport.market_data import fixture_moments

FAST = AnnealSchedule(300, 1.0, 1e-3, restarts=2)


@pytest.fixture(scope="module")
def moments():
    return fixture_moments(5)


@pytest.fixture(scope="module")
def trace(moments):
    return trace_frontier(moments, 30)


def test_orders_agree_at_anchor():
    vals = {o: m_for_order(o, ANCHOR_THETA, 123.0) for o in ("linear", "n_log_n", "quadratic")}
    assert all(v == pytest.approx(123.0) for v in vals.values())
    assert m_for_order("linear", 8.0, 2.0) == pytest.approx(8.0)
    assert m_for_order("n_log_n", 8.0, 2.0) == pytest.approx(24.0)
    assert m_for_order("quadratic", 8.0, 2.0) == pytest.approx(32.0)
    with pytest.raises(ValueError):
        m_for_order("cubic", 2.0, 1.0)


def test_one_cell_one_run(moments, trace):
    rows = sweep(moments, [3], [4.0], ["linear"], runs_per_cell=1, schedule=FAST, penalty_samples=500, trace=trace)
    assert len(rows) == 1
    assert rows[0].status in ("ok", "all-zero")
    assert len(rows[0].as_record()) == len(SWEEP_FIELDS)


def test_sweep_deterministic(moments, trace):
    kw = dict(runs_per_cell=2, seed=4, schedule=FAST, penalty_samples=500, trace=trace)
    a = sweep(moments, [2], [2.0, 16.0], ["linear", "quadratic"], **kw)
    b = sweep(moments, [2], [2.0, 16.0], ["linear", "quadratic"], **kw)
    assert [r.as_record() for r in a] == [r.as_record() for r in b]
    assert len(a) == 8


def test_precision_cells_are_null_not_errors(moments, trace):
    rows = sweep(moments, [10], [2.0**25], ["quadratic"], runs_per_cell=2, penalty_samples=2000, trace=trace)
    assert all(r.status == "precision" and r.offending_terms > 0 for r in rows)
    assert null_counts(rows) == {(10, 2.0**25, "quadratic"): (2, 2)}
    assert all(math.isnan(r.error) for r in rows)


def test_empty_grid_rejected(moments):
    with pytest.raises(ValueError):
        sweep(moments, [], [1.0])


def test_parallel_matches_serial(moments, trace):
    kw = dict(runs_per_cell=2, seed=1, schedule=FAST, penalty_samples=300, trace=trace)
    serial = sweep(moments, [2], [4.0], ["linear", "n_log_n"], **kw)
    parallel = sweep(moments, [2], [4.0], ["linear", "n_log_n"], jobs=2, **kw)
    assert [r.as_record() for r in serial] == [r.as_record() for r in parallel]


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "x.csv", ["a", "b"], [[1, 0.1], [2, float("nan")]])
    rows = read_csv(tmp_path / "x.csv")
    assert rows[0] == {"a": "1", "b": "0.1"}
    assert rows[1]["b"] == "nan"


def test_emit_plots_empty_dir(tmp_path):
    with pytest.raises(MissingResultsError, match="frontier.csv"):
        emit_plots(tmp_path)


def test_emit_plots_frontier_only(tmp_path):
    write_csv(tmp_path / "frontier.csv", ["target_return", "variance"], [[0.01, 0.002], [0.02, 0.003]])
    manifest = emit_plots(tmp_path)
    assert [p["family"] for p in manifest["plots"]] == ["efficient_frontier"]
    on_disk = json.loads((tmp_path / "plots" / "manifest.json").read_text())
    assert len(on_disk["plots"]) == 1
    assert "generated_at" in on_disk
    assert set(on_disk["missing"]) == set(FIGURE_FAMILIES) - {"efficient_frontier"}


def test_emit_plots_all_families(tmp_path):
    write_csv(tmp_path / "frontier.csv", ["target_return", "variance"], [[0.01, 0.002]])
    write_csv(tmp_path / "slice.csv", ["b", "m", "expected_return", "variance", "error", "status"],
              [[0.01, 5.0, 0.011, 0.0021, 0.01, "ok"]])
    write_csv(tmp_path / "sweep.csv", SWEEP_FIELDS,
              [[5, 1024.0, 10.0, "linear", 0, 0.02, 9.0, "estimate", "ok", 0.1, 0.02, 0.003, 0]])
    write_csv(tmp_path / "backtest_sticky_task1.csv",
              ["strategy", "task_rank", "quarter", "realized_return", "cumulative_return", "status"],
              [["sticky", 1, "2016Q1", 0.01, 0.01, "ok"]])
    cols = ["k", "seed", "with_return", "with_variance", "with_error", "without_return", "without_variance",
            "without_error", "improvement_ratio"]
    write_csv(tmp_path / "two_stage.csv", cols, [[5, 1, 0.02, 0.003, 0.1, 0.02, 0.003, 0.05, 0.9]])
    manifest = emit_plots(tmp_path, tmp_path / "out")
    assert [p["family"] for p in manifest["plots"]] == list(FIGURE_FAMILIES)
    assert manifest["missing"] == {}
    layers = [r["layer"] for r in read_csv(tmp_path / "out" / "efficient_frontier.csv")]
    assert layers == ["frontier", "slice"]
    assert len(read_csv(tmp_path / "out" / "two_stage_error_boxes.csv")) == 2
