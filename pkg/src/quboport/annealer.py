"""Single-flip Metropolis simulated annealing for QUBO models.

Each restart runs an independent chain from a uniform random start. A sweep
proposes flipping every variable once, in index order; the temperature
decays geometrically from ``t_initial`` to ``t_final`` over the sweeps.

Seeding: restart ``r`` draws from ``numpy.random.default_rng(SeedSequence([seed, r]))``.
That generator supplies the start state and then one 32-bit integer that
seeds the compiled chain's own stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np

from .qubo import QuboModel, as_assignment, evaluate

RESYNC_EVERY = 64
DEFAULT_RESTARTS = 8
MAX_SWEEPS = 10**6
T_CLAMP = 1e-9


@dataclass(frozen=True)
class AnnealSchedule:
    sweeps: int
    t_initial: float
    t_final: float
    restarts: int = DEFAULT_RESTARTS
    seed: int = 0
    # stop a chain once it has been frozen (no accepted flip) for this many sweeps
    patience: int | None = None

    def __post_init__(self):
        if self.sweeps < 1 or self.restarts < 1:
            raise ValueError("sweeps and restarts must be positive")
        if not (self.t_initial > 0 and self.t_final > 0):
            raise ValueError("temperatures must be positive")
        if self.t_final > self.t_initial:
            raise ValueError("t_final must not exceed t_initial")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")

    def temperatures(self) -> np.ndarray:
        if self.sweeps == 1:
            return np.array([self.t_initial])
        return np.geomspace(self.t_initial, self.t_final, self.sweeps)

    def replace(self, **changes) -> "AnnealSchedule":
        values = {**self.__dict__, **changes}
        return AnnealSchedule(**values)


@dataclass
class SolveResult:
    best: np.ndarray
    energy: float
    wall_time: float
    restarts_completed: int
    energy_trace: np.ndarray | None = None
    sweeps_run: int = 0

    def to_dict(self) -> dict:
        out = {
            "best": [int(b) for b in self.best],
            "energy": self.energy,
            "wall_time": self.wall_time,
            "restarts_completed": self.restarts_completed,
            "sweeps_run": self.sweeps_run,
        }
        if self.energy_trace is not None:
            out["energy_trace"] = [float(e) for e in self.energy_trace]
        return out


@numba.njit(cache=True)
def _resync(a, B, x, h):
    n = a.shape[0]
    energy = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(n):
            if x[j]:
                acc += B[i, j]
        h[i] = acc
    for i in range(n):
        if x[i]:
            energy += a[i] + h[i]
    return energy


@numba.njit(cache=True)
def _run_chain(a, B, x0, temps, chain_seed, resync_every, patience):
    np.random.seed(chain_seed)
    n = a.shape[0]
    x = x0.copy()
    h = np.zeros(n)
    energy = _resync(a, B, x, h)
    best_x = x.copy()
    best_energy = energy
    trace = np.empty(temps.shape[0])
    stale = 0
    done = temps.shape[0]
    for s in range(temps.shape[0]):
        accepted = 0
        if s > 0 and s % resync_every == 0:
            energy = _resync(a, B, x, h)
        beta = 1.0 / temps[s]
        for i in range(n):
            d = 1.0 - 2.0 * x[i]
            de = d * (a[i] + 2.0 * h[i])
            if de <= 0.0 or np.random.random() < np.exp(-de * beta):
                x[i] = 1 - x[i]
                energy += de
                accepted += 1
                for j in range(n):
                    h[j] += d * B[j, i]
                if energy < best_energy:
                    best_energy = energy
                    best_x[:] = x
        trace[s] = best_energy
        if accepted > 0:
            stale = 0
        else:
            stale += 1
        if patience > 0 and stale >= patience:
            done = s + 1
            break
    return best_x, trace[:done]


def _chain_streams(seed: int, restart: int, n: int) -> tuple[np.ndarray, int]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, restart]))
    x0 = rng.integers(0, 2, size=n).astype(np.int8)
    return x0, int(rng.integers(0, 2**32 - 1))


def solve(model: QuboModel, schedule: AnnealSchedule, initial=None, trace: bool = False) -> SolveResult:
    """Anneal ``model`` and return the best assignment over all restarts.

    ``initial`` optionally fixes the start state of every chain (warm start);
    the per-restart streams still differ. Reported energy is a fresh
    ``evaluate`` of the returned bits.
    """
    start = time.perf_counter()
    n = model.num_vars
    a = np.ascontiguousarray(model.linear)
    B = np.ascontiguousarray(model.quadratic)
    temps = schedule.temperatures()
    warm = None if initial is None else as_assignment(initial, n)

    best_bits, best_energy, best_trace = None, np.inf, None
    sweeps_run = 0
    for r in range(schedule.restarts):
        x0, chain_seed = _chain_streams(schedule.seed, r, n)
        if warm is not None:
            x0 = warm.copy()
        bits, chain_trace = _run_chain(a, B, x0, temps, chain_seed, RESYNC_EVERY, schedule.patience or 0)
        sweeps_run += chain_trace.shape[0]
        energy = evaluate(model, bits)
        if energy < best_energy:
            best_bits, best_energy, best_trace = bits.copy(), energy, chain_trace
    return SolveResult(
        best=best_bits,
        energy=best_energy,
        wall_time=time.perf_counter() - start,
        restarts_completed=schedule.restarts,
        energy_trace=best_trace if trace else None,
        sweeps_run=sweeps_run,
    )


_warmed = False


def warm_up() -> None:
    """Load the compiled kernels once so later timings exclude JIT start-up."""
    global _warmed
    if not _warmed:
        solve(QuboModel(np.array([1.0, -1.0]), np.array([[0.0, 0.5], [0.5, 0.0]])), AnnealSchedule(2, 1.0, 0.5, 1))
        _warmed = True


def probe_max_delta(model: QuboModel, probes: int = 100, seed: int = 0) -> float:
    """Largest |single-flip delta| seen over ``probes`` random states (all flips scanned)."""
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(probes, model.num_vars)).astype(float)
    fields = model.linear[None, :] + 2.0 * X @ model.quadratic
    return float(np.max(np.abs(fields)))


def default_schedule(model: QuboModel, seed: int = 0) -> AnnealSchedule:
    t_initial = max(probe_max_delta(model, seed=seed), T_CLAMP)
    return AnnealSchedule(
        sweeps=min(200 * model.num_vars, MAX_SWEEPS),
        t_initial=t_initial,
        t_final=1e-3 * t_initial,
        restarts=DEFAULT_RESTARTS,
        seed=seed,
    )


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a sub-task, e.g. ``derive_seed(seed, quarter, target)``."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])
