"""Daily closing-price series: CSV ingestion, rolling windows, synthetic generation."""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientHistoryError, PriceParseError, PriceValidationError

__all__ = [
    "PriceSeries",
    "PriceWindow",
    "SyntheticSpec",
    "load_price_csv",
    "write_price_csv",
    "window",
    "generate_synthetic",
    "trading_days",
    "series_from_closes",
]


def _frozen_array(values: Iterable[float]) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PriceSeries:
    """Closing prices of one instrument indexed by trading day."""

    ticker: str
    dates: tuple[dt.date, ...]
    closes: np.ndarray = field(repr=False)

    def __post_init__(self):
        closes = _frozen_array(self.closes)
        object.__setattr__(self, "closes", closes)
        object.__setattr__(self, "dates", tuple(self.dates))
        if len(self.dates) != len(closes):
            raise PriceValidationError("dates and closes differ in length")
        for prev, cur in zip(self.dates, self.dates[1:]):
            if cur <= prev:
                raise PriceValidationError(f"dates not strictly increasing at {cur.isoformat()}")
        if closes.size and not np.all(closes > 0):
            raise PriceValidationError("all closes must be positive")
        if not np.all(np.isfinite(closes)):
            raise PriceValidationError("closes must be finite")

    def __len__(self) -> int:
        return len(self.dates)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PriceSeries):
            return NotImplemented
        return (
            self.ticker == other.ticker
            and self.dates == other.dates
            and np.array_equal(self.closes, other.closes)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def observations(self) -> list[tuple[dt.date, float]]:
        return list(zip(self.dates, self.closes.tolist()))

    def index_of(self, date: dt.date) -> int:
        i = bisect.bisect_left(self.dates, date)
        if i == len(self.dates) or self.dates[i] != date:
            raise PriceValidationError(f"{date.isoformat()} is not a trading date of {self.ticker}")
        return i


@dataclass(frozen=True)
class PriceWindow:
    """The `depth` closes ending at `end_index` inclusive; the last one is P0."""

    prices: np.ndarray = field(repr=False)
    end_index: int
    depth: int

    def __post_init__(self):
        object.__setattr__(self, "prices", _frozen_array(self.prices))
        if self.prices.size != self.depth:
            raise ValueError(f"window holds {self.prices.size} prices, expected {self.depth}")

    @property
    def p0(self) -> float:
        return float(self.prices[-1])

    def __len__(self) -> int:
        return self.depth


@dataclass(frozen=True)
class SyntheticSpec:
    length: int
    start_price: float
    daily_move_distribution: tuple[tuple[float, float], ...]
    seed: int = 0
    ticker: str = "SYNTH"
    start_date: dt.date = dt.date(2000, 1, 3)

    def __post_init__(self):
        moves = tuple((float(s), float(p)) for s, p in self.daily_move_distribution)
        object.__setattr__(self, "daily_move_distribution", moves)
        if self.length < 1:
            raise ValueError("length must be positive")
        if not self.start_price > 0:
            raise ValueError("start_price must be positive")
        if not moves:
            raise ValueError("daily_move_distribution is empty")
        if any(s <= 0 for s, _ in moves):
            raise ValueError("multiplicative steps must be positive")
        if any(p < 0 for _, p in moves):
            raise ValueError("probabilities must be nonnegative")
        if abs(math.fsum(p for _, p in moves) - 1.0) > 1e-12:
            raise ValueError("step probabilities must sum to 1")


def _parse_rows(text: str, source: str) -> tuple[list[dt.date], list[float]]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise PriceParseError(f"{source} is empty", line=1) from None
    columns = [h.strip().lower() for h in header]
    if "date" not in columns or "close" not in columns:
        raise PriceParseError("header must contain 'date' and 'close' columns", line=1)
    di, ci = columns.index("date"), columns.index("close")

    rows: list[tuple[int, dt.date, float]] = []
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) <= max(di, ci):
            raise PriceParseError(f"expected at least {max(di, ci) + 1} fields", line=line)
        try:
            date = dt.date.fromisoformat(row[di].strip())
        except ValueError:
            raise PriceParseError(f"bad ISO date {row[di]!r}", line=line) from None
        try:
            close = float(row[ci])
        except ValueError:
            raise PriceParseError(f"bad price {row[ci]!r}", line=line) from None
        if not math.isfinite(close) or close <= 0:
            raise PriceValidationError(f"close must be a positive number, got {row[ci].strip()}", line=line)
        rows.append((line, date, close))

    seen: dict[dt.date, int] = {}
    for line, date, _ in rows:
        if date in seen:
            raise PriceValidationError(
                f"duplicate date {date.isoformat()} (first seen on line {seen[date]})", line=line
            )
        seen[date] = line
    rows.sort(key=lambda r: r[1])
    return [r[1] for r in rows], [r[2] for r in rows]


def load_price_csv(path: str | Path, ticker: str | None = None) -> PriceSeries:
    """Read a ``date,close`` CSV; rows may come in any order, extra columns are ignored."""
    path = Path(path)
    text = path.read_text(encoding="utf-8-sig")
    dates, closes = _parse_rows(text, str(path))
    return PriceSeries(ticker or path.stem, tuple(dates), np.array(closes))


def write_price_csv(series: PriceSeries, path: str | Path) -> None:
    # repr() keeps floats bit-exact on reload
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("date,close\n")
        for date, close in zip(series.dates, series.closes.tolist()):
            fh.write(f"{date.isoformat()},{close!r}\n")


def window(series: PriceSeries, end_index: int, depth: int, horizon: int = 0) -> PriceWindow:
    """Return the `depth` closes ending at `end_index` (inclusive).

    `horizon` only enters the error message: a loan at `end_index` needs that
    many closes after it as well.
    """
    if depth < 1:
        raise ValueError("depth must be positive")
    required = depth + horizon
    if end_index < depth - 1:
        raise InsufficientHistoryError(
            f"end index {end_index} has only {end_index + 1} closes of history; "
            f"depth {depth} needs at least {depth} (series length >= {required} with horizon {horizon})",
            required=required,
        )
    if end_index >= len(series):
        raise InsufficientHistoryError(
            f"end index {end_index} is past the end of a series of length {len(series)}",
            required=end_index + 1 + horizon,
        )
    return PriceWindow(series.closes[end_index - depth + 1 : end_index + 1], end_index, depth)


def trading_days(start: dt.date, count: int) -> list[dt.date]:
    """`count` consecutive weekdays starting at (or after) `start`."""
    out: list[dt.date] = []
    day = start
    while len(out) < count:
        if day.weekday() < 5:
            out.append(day)
        day += dt.timedelta(days=1)
    return out


def generate_synthetic(spec: SyntheticSpec) -> PriceSeries:
    steps = np.array([s for s, _ in spec.daily_move_distribution])
    probs = np.array([p for _, p in spec.daily_move_distribution])
    rng = np.random.default_rng(spec.seed)
    draws = rng.choice(steps.size, size=spec.length - 1, p=probs / probs.sum())
    closes = np.empty(spec.length)
    closes[0] = spec.start_price
    price = float(spec.start_price)
    for i, k in enumerate(draws, start=1):
        price = price * steps[k]
        closes[i] = price
    return PriceSeries(spec.ticker, tuple(trading_days(spec.start_date, spec.length)), closes)


def series_from_closes(closes: Sequence[float], ticker: str = "SERIES",
                       start_date: dt.date = dt.date(2000, 1, 3)) -> PriceSeries:
    return PriceSeries(ticker, tuple(trading_days(start_date, len(closes))), np.asarray(closes, dtype=float))
