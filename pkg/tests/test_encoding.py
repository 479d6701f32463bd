import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quboport.encoding import (
    EncodingParams,
    EncodingSizeError,
    bit_weights,
    build_fractional_qubo,
    build_selection_qubo,
    decode,
    dropped_constant,
    markowitz_objective,
    portfolio_metrics,
    raw_weights,
)
from quboport.market_data import MomentEstimates
from quboport.qubo import DimensionError, brute_force_solve, evaluate


def random_moments(rng, n):
    A = rng.normal(0, 0.1, (n + 2, n))
    return MomentEstimates(tuple(f"A{i}" for i in range(n)), rng.uniform(-0.02, 0.06, n), A.T @ A / (n + 2))


def test_selection_single_asset_example():
    m = MomentEstimates(("X",), np.array([0.1]), np.array([[0.04]]))
    p = EncodingParams(K=1, theta=1.0, M=10.0, R=0.1)
    model = build_selection_qubo(m, p)
    c = dropped_constant(p)
    assert evaluate(model, [1]) + c == pytest.approx(0.04, abs=1e-15)
    assert evaluate(model, [0]) + c == pytest.approx(0.1, abs=1e-15)


def test_penalty_off_selection_is_scaled_covariance():
    rng = np.random.default_rng(2)
    m = random_moments(rng, 4)
    theta = 3.5
    model = build_selection_qubo(m, EncodingParams(1, theta, 0.0, 0.05))
    cov = theta * m.covariance
    assert np.array_equal(model.linear, np.diag(cov))
    off = cov - np.diag(np.diag(cov))
    assert np.array_equal(model.quadratic, off)


def test_selection_matches_direct_formula():
    rng = np.random.default_rng(5)
    m = random_moments(rng, 5)
    p = EncodingParams(1, 2.0, 7.0, 0.03)
    model = build_selection_qubo(m, p)
    for x in rng.integers(0, 2, (100, 5)):
        direct = markowitz_objective(x, m, p)
        assert evaluate(model, x) + dropped_constant(p) == pytest.approx(direct, abs=1e-9)


def test_k1_collapses_to_half_weight_selection():
    m = MomentEstimates(("X",), np.array([0.08]), np.array([[0.05]]))
    p = EncodingParams(1, 1.7, 3.0, 0.02)
    frac = build_fractional_qubo(m, p)
    half = MomentEstimates(("X",), m.expected_returns / 2, m.covariance / 4)
    sel = build_selection_qubo(half, p)
    assert np.array_equal(frac.linear, sel.linear)
    assert np.array_equal(frac.quadratic, sel.quadratic)


def test_two_bit_single_asset():
    m = MomentEstimates(("X",), np.array([0.08]), np.array([[0.05]]))
    p = EncodingParams(2, 1.0, 4.0, 0.05)
    model = build_fractional_qubo(m, p)
    assert raw_weights([1, 1], 1, 2) == pytest.approx([0.75])
    expected = 1.0 * 0.75**2 * 0.05 + 4.0 * (0.75 * 0.08 - 0.05) ** 2
    assert evaluate(model, [1, 1]) + dropped_constant(p) == pytest.approx(expected, abs=1e-15)


def test_exhaustive_round_trip_n3_k3():
    rng = np.random.default_rng(9)
    m = random_moments(rng, 3)
    p = EncodingParams(3, 1.3, 11.0, 0.02)
    model = build_fractional_qubo(m, p)
    c = dropped_constant(p)
    for bits in itertools.product([0, 1], repeat=9):
        direct = markowitz_objective(raw_weights(bits, 3, 3), m, p)
        assert abs(evaluate(model, bits) + c - direct) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**16), st.sampled_from([1, -1]))
def test_round_trip_property(n, K, seed, sign):
    rng = np.random.default_rng(seed)
    m = random_moments(rng, n)
    p = EncodingParams(K, float(rng.uniform(0.1, 10)), float(rng.uniform(0, 50)), float(rng.uniform(0, 0.05)), sign)
    model = build_fractional_qubo(m, p)
    x = rng.integers(0, 2, n * K)
    w = raw_weights(x, n, K)
    direct = p.theta * w @ m.covariance @ w + sign * p.M * (w @ m.expected_returns - p.R) ** 2
    assert evaluate(model, x) + dropped_constant(p) == pytest.approx(direct, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 8), st.integers(0, 2**16))
def test_raw_weights_are_multiples_of_resolution(n, K, seed):
    x = np.random.default_rng(seed).integers(0, 2, n * K)
    w = raw_weights(x, n, K)
    units = w * 2**K
    assert np.array_equal(units, np.round(units))
    assert np.all(w < 1.0)


def test_decode_examples():
    assert raw_weights([1, 0], 1, 2) == pytest.approx([0.25])
    m1 = MomentEstimates(("X",), np.array([0.1]), np.array([[0.04]]))
    sol = decode([1, 1], m1, EncodingParams(2, 1.0, 1.0, 0.1))
    assert sol.raw_weights == pytest.approx([0.75])
    assert sol.normalized_weights == pytest.approx([1.0])

    m2 = MomentEstimates(("X", "Y"), np.array([0.04, 0.08]), np.diag([0.04, 0.09]))
    sol = decode([1, 0, 1, 1], m2, EncodingParams(2, 1.0, 1.0, 0.05))
    assert sol.raw_weights == pytest.approx([0.25, 0.75])
    assert sol.normalized_weights == pytest.approx([0.25, 0.75])
    assert sol.expected_return == pytest.approx(0.25 * 0.04 + 0.75 * 0.08)


def test_bit_order_msb_last():
    assert np.array_equal(bit_weights(3), [0.125, 0.25, 0.5])


def test_decode_all_zero():
    m = MomentEstimates(("X", "Y"), np.array([0.04, 0.08]), np.diag([0.04, 0.09]))
    sol = decode([0, 0, 0, 0], m, EncodingParams(2, 1.0, 1.0, 0.05))
    assert sol.all_zero
    assert sol.expected_return == 0.0 and sol.variance == 0.0


def test_decode_length_mismatch():
    m = MomentEstimates(("X",), np.array([0.1]), np.array([[0.04]]))
    with pytest.raises(DimensionError):
        decode([1, 0, 1], m, EncodingParams(2, 1.0, 1.0, 0.1))


def test_metrics_unit_vector_and_zero():
    m = random_moments(np.random.default_rng(4), 3)
    for i in range(3):
        e = np.eye(3)[i]
        assert portfolio_metrics(e, m) == pytest.approx((m.expected_returns[i], m.covariance[i, i]))
    assert portfolio_metrics(np.zeros(3), m) == (0.0, 0.0)


def test_metrics_match_double_loop():
    rng = np.random.default_rng(6)
    m = random_moments(rng, 6)
    w = rng.uniform(0, 1, 6)
    ret = sum(w[i] * m.expected_returns[i] for i in range(6))
    var = sum(w[i] * w[j] * m.covariance[i, j] for i in range(6) for j in range(6))
    got = portfolio_metrics(w, m)
    assert abs(got[0] - ret) < 1e-12 and abs(got[1] - var) < 1e-12


def test_metrics_wrong_length():
    with pytest.raises(DimensionError):
        portfolio_metrics(np.ones(2), random_moments(np.random.default_rng(0), 3))


@pytest.mark.parametrize("seed", range(5))
def test_large_penalty_drives_selection_to_best_feasibility(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    m = random_moments(rng, n)
    R = float(rng.uniform(0, 0.1))
    best_gap = min(abs(np.dot(x, m.expected_returns) - R) for x in itertools.product([0, 1], repeat=n))
    x, _ = brute_force_solve(build_selection_qubo(m, EncodingParams(1, 1.0, 1e9, R)))
    assert abs(x @ m.expected_returns - R) == pytest.approx(best_gap, abs=1e-9)


def test_param_validation():
    with pytest.raises(ValueError):
        EncodingParams(0, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        EncodingParams(1, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        EncodingParams(1, 1.0, -1.0, 0.0)
    with pytest.raises(ValueError):
        EncodingParams(1, 1.0, 1.0, 0.0, penalty_sign=2)


def test_params_dict_round_trip():
    p = EncodingParams(10, 2.0**22, 123.5, 0.03, -1)
    assert EncodingParams.from_dict(p.to_dict()) == p
    assert set(p.to_dict()) == {"k", "theta", "m", "target_return", "penalty_sign"}


def test_variable_budget():
    m = random_moments(np.random.default_rng(0), 10)
    with pytest.raises(EncodingSizeError):
        build_fractional_qubo(m, EncodingParams(20, 1.0, 1.0, 0.0), variable_budget=100)
