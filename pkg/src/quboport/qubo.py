"""Canonical QUBO models: evaluation, exhaustive solving and precision checks.

A model stores linear coefficients ``a`` and a symmetric quadratic matrix
``B`` with a zero diagonal. The energy of a binary vector ``x`` is::

    E(x) = sum_i a_i x_i + sum_i sum_j B_ij x_i x_j

so every off-diagonal pair contributes ``2 * B_ij`` when both bits are set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAX_BRUTE_FORCE_VARS = 24


class DimensionError(ValueError):
    """Assignment length does not match the model."""


class SizeLimitError(ValueError):
    """Model too large for exhaustive enumeration."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class QuboModel:
    """Immutable quadratic binary objective.

    Any diagonal in ``quadratic`` is folded into ``linear`` (``x*x == x`` for
    binary ``x``) and the matrix is symmetrised, so the stored form is always
    canonical.
    """

    linear: np.ndarray
    quadratic: np.ndarray = field(default=None)

    def __post_init__(self):
        a = np.array(self.linear, dtype=float).reshape(-1)
        n = a.shape[0]
        if n < 1:
            raise ValueError("a QUBO model needs at least one variable")
        if self.quadratic is None:
            b = np.zeros((n, n))
        else:
            b = np.array(self.quadratic, dtype=float)
        if b.shape != (n, n):
            raise DimensionError(f"quadratic must be {n}x{n}, got {b.shape}")
        b = 0.5 * (b + b.T)
        a = a + np.diag(b)
        np.fill_diagonal(b, 0.0)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("QUBO coefficients must be finite")
        object.__setattr__(self, "linear", _frozen(a))
        object.__setattr__(self, "quadratic", _frozen(b))

    @property
    def num_vars(self) -> int:
        return self.linear.shape[0]

    @classmethod
    def zeros(cls, num_vars: int) -> "QuboModel":
        return cls(np.zeros(num_vars))

    def __add__(self, other: "QuboModel") -> "QuboModel":
        if not isinstance(other, QuboModel):
            return NotImplemented
        if other.num_vars != self.num_vars:
            raise DimensionError("cannot add models of different size")
        return QuboModel(self.linear + other.linear, self.quadratic + other.quadratic)

    def __mul__(self, alpha: float) -> "QuboModel":
        return QuboModel(alpha * self.linear, alpha * self.quadratic)

    __rmul__ = __mul__

    def to_dict(self) -> dict:
        rows, cols = np.nonzero(np.triu(self.quadratic, k=1))
        upper = [[int(i), int(j), float(self.quadratic[i, j])] for i, j in zip(rows, cols)]
        return {"n": self.num_vars, "linear": [float(v) for v in self.linear], "quadratic_upper": upper}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "QuboModel":
        n = int(data["n"])
        b = np.zeros((n, n))
        for i, j, value in data.get("quadratic_upper", []):
            if not i < j:
                raise ValueError(f"quadratic_upper entries need i < j, got ({i}, {j})")
            b[i, j] = b[j, i] = value
        return cls(np.asarray(data["linear"], dtype=float), b)

    @classmethod
    def from_json(cls, text: str) -> "QuboModel":
        return cls.from_dict(json.loads(text))


def as_assignment(x: Sequence[int], num_vars: int | None = None) -> np.ndarray:
    """Validate a binary vector and return it as an int8 array."""
    bits = np.asarray(x)
    if bits.ndim != 1:
        raise DimensionError("assignment must be one-dimensional")
    if num_vars is not None and bits.shape[0] != num_vars:
        raise DimensionError(f"assignment has {bits.shape[0]} bits, model has {num_vars} variables")
    if not np.all((bits == 0) | (bits == 1)):
        raise ValueError("assignment entries must be 0 or 1")
    return bits.astype(np.int8)


def evaluate(model: QuboModel, x: Sequence[int]) -> float:
    """Energy of ``x`` under ``model``."""
    xf = as_assignment(x, model.num_vars).astype(float)
    return float(model.linear @ xf + xf @ model.quadratic @ xf)


def flip_delta(model: QuboModel, x: Sequence[int], i: int) -> float:
    """Energy change from flipping bit ``i`` of ``x``.

    ``dE = a_i * d + 2 * d * sum_{j != i} B_ij x_j`` with ``d = 1 - 2 x_i``.
    """
    xf = as_assignment(x, model.num_vars).astype(float)
    d = 1.0 - 2.0 * xf[i]
    return float(d * (model.linear[i] + 2.0 * (model.quadratic[i] @ xf)))


def _enumerate_block(n: int, start: int, stop: int) -> np.ndarray:
    # bit 0 is the most significant, so integer order == lexicographic order
    ints = np.arange(start, stop, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((ints[:, None] >> shifts[None, :]) & 1).astype(float)


def all_energies(model: QuboModel) -> np.ndarray:
    """Energies of every assignment in lexicographic order (small models only)."""
    n = model.num_vars
    if n > MAX_BRUTE_FORCE_VARS:
        raise SizeLimitError(f"{n} variables exceeds the enumeration limit of {MAX_BRUTE_FORCE_VARS}")
    X = _enumerate_block(n, 0, 1 << n)
    return X @ model.linear + np.einsum("ij,ij->i", X @ model.quadratic, X)


def brute_force_solve(model: QuboModel, block_size: int = 1 << 16) -> tuple[np.ndarray, float]:
    """Exhaustive global minimum; ties go to the lexicographically smallest bit string."""
    n = model.num_vars
    if n > MAX_BRUTE_FORCE_VARS:
        raise SizeLimitError(f"{n} variables exceeds the enumeration limit of {MAX_BRUTE_FORCE_VARS}")
    total = 1 << n
    best_idx, best_energy = 0, np.inf
    for start in range(0, total, block_size):
        stop = min(start + block_size, total)
        X = _enumerate_block(n, start, stop)
        energies = X @ model.linear + np.einsum("ij,ij->i", X @ model.quadratic, X)
        k = int(np.argmin(energies))
        if energies[k] < best_energy:
            best_energy, best_idx = float(energies[k]), start + k
    best = _enumerate_block(n, best_idx, best_idx + 1)[0].astype(np.int8)
    return best, evaluate(model, best)


@dataclass(frozen=True)
class PrecisionBudget:
    """Coefficient bit widths of the target annealing hardware."""

    linear_bits: int = 76
    quadratic_bits: int = 64

    def __post_init__(self):
        if self.linear_bits < 1 or self.quadratic_bits < 1:
            raise ValueError("bit budgets must be >= 1")


@dataclass(frozen=True)
class PrecisionReport:
    ok: bool
    offending_terms: list = field(default_factory=list)
    scale: float = 1.0


def integer_bits(value: float, scale: float) -> int:
    """Bits needed for ``round(|value| * scale)`` as an unsigned integer."""
    return int(round(abs(value) * scale)).bit_length()


# Fixed point with 32 fractional bits.
DEFAULT_SCALE = 2.0**32


def validate_precision(model: QuboModel, budget: PrecisionBudget = PrecisionBudget(),
                       scale: float = DEFAULT_SCALE) -> PrecisionReport:
    """List every coefficient whose scaled integer magnitude exceeds the budget.

    Quadratic terms are checked as pair coefficients ``2 * B_ij`` (the
    coefficient of ``x_i x_j`` in the upper-triangular polynomial).
    Offending terms are tuples ``("linear", i, bits)`` or
    ``("quadratic", i, j, bits)`` with ``i < j``.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    offending = []
    # cheap screen before exact integer conversion
    lin_limit = 2.0 ** budget.linear_bits / scale
    for i in np.flatnonzero(np.abs(model.linear) >= 0.5 * lin_limit):
        bits = integer_bits(model.linear[i], scale)
        if bits > budget.linear_bits:
            offending.append(("linear", int(i), bits))
    quad_limit = 2.0 ** budget.quadratic_bits / scale
    upper = 2.0 * np.triu(np.abs(model.quadratic), k=1)
    for i, j in zip(*np.nonzero(upper >= 0.5 * quad_limit)):
        bits = integer_bits(2.0 * model.quadratic[i, j], scale)
        if bits > budget.quadratic_bits:
            offending.append(("quadratic", int(i), int(j), bits))
    return PrecisionReport(ok=not offending, offending_terms=offending, scale=scale)
