"""Price ingestion, quarterly returns and moment estimation.

CSV contract: header ``date,ticker,adj_close``, ISO dates, UTF-8. Rows may
appear in any order.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

# Tickers from the asset table used by the original study.
DEFAULT_UNIVERSE = (
    "MMM", "AXP", "AMGN", "AAPL", "BA", "CAT", "CVX", "CSCO", "KO", "GS",
    "HD", "HON", "IBM", "INTC", "JNJ", "JPM", "MCD", "MRK", "MSFT", "NKE",
    "PG", "CRM", "TRV", "UNH", "V", "WBA", "WMT", "DIS", "VZ",
)

FIXTURE_SEED = 20240101


class MissingAssetError(KeyError):
    pass


class PriceFormatError(ValueError):
    pass


class CoverageError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PriceSeries:
    ticker: str
    dates: tuple
    prices: np.ndarray

    def __post_init__(self):
        if len(self.dates) != len(self.prices):
            raise PriceFormatError(f"{self.ticker}: dates and prices differ in length")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise PriceFormatError(f"{self.ticker}: dates are not strictly increasing")
        prices = np.asarray(self.prices, dtype=float)
        if np.any(~(prices > 0)):
            raise PriceFormatError(f"{self.ticker}: prices must be positive")
        prices.setflags(write=False)
        object.__setattr__(self, "prices", prices)

    def __len__(self):
        return len(self.dates)

    def price_at(self, when: dt.date) -> float:
        """Last observed price at or before ``when``."""
        idx = np.searchsorted(np.array(self.dates, dtype="datetime64[D]"),
                              np.datetime64(when, "D"), side="right") - 1
        if idx < 0:
            raise CoverageError(f"{self.ticker}: no price at or before {when}")
        return float(self.prices[idx])

    def scaled(self, c: float) -> "PriceSeries":
        return PriceSeries(self.ticker, self.dates, self.prices * c)


@dataclass(frozen=True)
class QuarterWindow:
    start: dt.date
    end: dt.date
    label: str

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"window {self.label}: start must precede end")


@dataclass(frozen=True, eq=False)
class MomentEstimates:
    tickers: tuple
    expected_returns: np.ndarray
    covariance: np.ndarray = field(repr=False)

    def __post_init__(self):
        r = np.asarray(self.expected_returns, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        n = r.shape[0]
        if cov.shape != (n, n):
            raise ValueError(f"covariance must be {n}x{n}")
        if len(self.tickers) != n:
            raise ValueError("ticker count does not match moments")
        if not np.all(np.isfinite(r)):
            raise ValueError("expected returns must be finite")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-14):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if n and np.linalg.eigvalsh(cov).min() < -1e-8:
            raise ValueError("covariance is not positive semidefinite")
        r.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "expected_returns", r)
        object.__setattr__(self, "covariance", cov)

    @property
    def n(self) -> int:
        return len(self.tickers)

    def subset(self, idx: Sequence[int]) -> "MomentEstimates":
        idx = list(idx)
        return MomentEstimates(
            tuple(self.tickers[i] for i in idx),
            self.expected_returns[idx],
            self.covariance[np.ix_(idx, idx)],
        )

    def to_dict(self) -> dict:
        return {
            "tickers": list(self.tickers),
            "expected_returns": self.expected_returns.tolist(),
            "covariance": self.covariance.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MomentEstimates":
        return cls(tuple(data["tickers"]), np.asarray(data["expected_returns"]), np.asarray(data["covariance"]))


class LoadedPrices(NamedTuple):
    series: list
    dropped_rows: dict


def load_prices(path, universe: Sequence[str] | None = None) -> LoadedPrices:
    """Read a price CSV and align the requested tickers on their common dates.

    Returns the aligned series (in ``universe`` order) and a per-ticker count
    of rows dropped because their date was not shared by every ticker.
    """
    rows: dict[str, list[tuple[dt.date, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"date", "ticker", "adj_close"} <= set(reader.fieldnames):
            raise PriceFormatError("price CSV needs header date,ticker,adj_close")
        for lineno, rec in enumerate(reader, start=2):
            try:
                day = dt.date.fromisoformat(rec["date"].strip())
                price = float(rec["adj_close"])
            except (TypeError, ValueError) as exc:
                raise PriceFormatError(f"line {lineno}: {exc}") from exc
            rows.setdefault(rec["ticker"].strip(), []).append((day, price))

    if universe is None:
        universe = sorted(rows)
    missing = [t for t in universe if t not in rows]
    if missing:
        raise MissingAssetError(f"missing assets: {', '.join(missing)}")

    per_ticker = {}
    for t in universe:
        obs = sorted(rows[t])
        if any(b[0] <= a[0] for a, b in zip(obs, obs[1:])):
            raise PriceFormatError(f"{t}: duplicate dates")
        per_ticker[t] = dict(obs)

    common = set.intersection(*(set(d) for d in per_ticker.values()))
    dates = tuple(sorted(common))
    dropped = {t: len(per_ticker[t]) - len(dates) for t in universe}
    if any(dropped.values()):
        log.info("dropped rows outside the common date set: %s", {t: c for t, c in dropped.items() if c})
    series = [PriceSeries(t, dates, np.array([per_ticker[t][d] for d in dates])) for t in universe]
    return LoadedPrices(series, dropped)


def quarter_label(day: dt.date) -> str:
    return f"{day.year}Q{(day.month - 1) // 3 + 1}"


def quarter_windows(boundaries: Sequence[dt.date]) -> list[QuarterWindow]:
    """Contiguous windows between consecutive boundary dates, labelled by the end quarter."""
    return [QuarterWindow(s, e, quarter_label(e)) for s, e in zip(boundaries, boundaries[1:])]


def quarterly_returns(series: PriceSeries, windows: Sequence[QuarterWindow]) -> np.ndarray:
    """Simple return over each window from the last price at or before each boundary."""
    if not windows:
        return np.zeros(0)
    first, last = series.dates[0], series.dates[-1]
    out = np.empty(len(windows))
    for k, w in enumerate(windows):
        if w.start < first or w.end > last:
            raise CoverageError(f"{series.ticker}: window {w.label} outside {first}..{last}")
        p0 = series.price_at(w.start)
        p1 = series.price_at(w.end)
        out[k] = (p1 - p0) / p0
    return out


def return_panel(series: Sequence[PriceSeries], windows: Sequence[QuarterWindow]) -> np.ndarray:
    """Array of shape (num_windows, num_assets)."""
    return np.column_stack([quarterly_returns(s, windows) for s in series])


def estimate_moments(returns, tickers: Sequence[str] | None = None) -> MomentEstimates:
    """Sample mean and covariance (1/(W-1)) of a (W, n) return panel."""
    panel = np.asarray(returns, dtype=float)
    if panel.ndim != 2:
        raise ValueError("returns must be a 2-D (observations, assets) panel")
    W, n = panel.shape
    if W < 2:
        raise InsufficientDataError(f"need at least 2 observations, got {W}")
    if tickers is None:
        tickers = tuple(f"A{i}" for i in range(n))
    mean = panel.mean(axis=0)
    cov = np.cov(panel, rowvar=False, ddof=1).reshape(n, n)
    return MomentEstimates(tuple(tickers), mean, cov)


def synthetic_prices(tickers: Sequence[str] = DEFAULT_UNIVERSE, quarters: int = 40,
                     seed: int = FIXTURE_SEED, start: dt.date = dt.date(2013, 12, 31)) -> list[PriceSeries]:
    """Correlated geometric random walks sampled at quarter ends.

    One market factor plus idiosyncratic noise; drifts and volatilities are
    drawn per asset so the universe has a non-trivial efficient frontier.
    """
    rng = np.random.default_rng(seed)
    n = len(tickers)
    drift = rng.normal(0.02, 0.015, n)
    beta = rng.uniform(0.4, 1.4, n)
    idio = rng.uniform(0.04, 0.12, n)
    market = rng.normal(0.0, 0.06, quarters)
    noise = rng.normal(0.0, 1.0, (quarters, n)) * idio
    log_ret = drift - 0.5 * (beta**2 * 0.06**2 + idio**2) + market[:, None] * beta + noise
    start_px = rng.uniform(20.0, 300.0, n)
    levels = start_px * np.exp(np.vstack([np.zeros(n), np.cumsum(log_ret, axis=0)]))
    dates = tuple(_quarter_ends(start, quarters + 1))
    return [PriceSeries(t, dates, np.round(levels[:, i], 6)) for i, t in enumerate(tickers)]


def _quarter_ends(start: dt.date, count: int) -> list[dt.date]:
    out = []
    year, month = start.year, start.month
    for _ in range(count):
        nxt = dt.date(year + (month // 12), month % 12 + 1, 1)
        out.append(nxt - dt.timedelta(days=1))
        month += 3
        if month > 12:
            month -= 12
            year += 1
    return out


def write_prices_csv(series: Sequence[PriceSeries], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "ticker", "adj_close"])
        for s in series:
            for d, p in zip(s.dates, s.prices):
                w.writerow([d.isoformat(), s.ticker, repr(float(p))])


def bundled_fixture_path() -> Path:
    return Path(str(resources.files("quboport") / "data" / "prices.csv"))


def load_fixture(num_assets: int | None = None) -> LoadedPrices:
    """The bundled synthetic price file, optionally truncated to the first ``num_assets`` tickers."""
    universe = DEFAULT_UNIVERSE if num_assets is None else DEFAULT_UNIVERSE[:num_assets]
    return load_prices(bundled_fixture_path(), universe)


def fixture_moments(num_assets: int = 10) -> MomentEstimates:
    """Moments over all 40 quarters of the bundled fixture for the first ``num_assets`` tickers."""
    series, _ = load_fixture(num_assets)
    windows = quarter_windows(series[0].dates)
    return estimate_moments(return_panel(series, windows), [s.ticker for s in series])
