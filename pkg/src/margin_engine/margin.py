"""Margin accounting, individualized maintenance ratios and the deduced (m*, w*) system."""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .cpnr import CpnrGrid, LoanQuery, cpnr
from .markov import MarkovFit, StateSpace, TransitionModel, fit_window, state_of
from .prices import PriceSeries, window

__all__ = [
    "M_GRID",
    "W_GRID",
    "REQUIRED_SYSTEM",
    "OptimizerConfig",
    "MarginSchedule",
    "MarginSystem",
    "IndifferencePoint",
    "DynamicsPoint",
    "initial_margin_adequate",
    "margin_schedule",
    "individualized_maintenance",
    "indifference_set",
    "deduce_margin_system",
    "deduce_for_fit",
    "margin_dynamics",
]

M_GRID: tuple[float, ...] = tuple(round(0.01 * i, 2) for i in range(1, 101))
W_GRID: tuple[float, ...] = tuple(round(1.0 + 0.01 * i, 2) for i in range(1, 51))

# slack for m0 + 1 >= w on decimal grids (0.3 + 1 vs 1.3 and friends)
ADEQUACY_TOL = 1e-9


@dataclass(frozen=True)
class OptimizerConfig:
    cpnr_target: float = 0.05
    r: float = 0.0
    horizon: int = 30
    m_grid: tuple[float, ...] = M_GRID
    w_grid: tuple[float, ...] = W_GRID

    def __post_init__(self):
        if not 0 < self.cpnr_target < 1:
            raise ValueError("cpnr_target must lie in (0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for name in ("m_grid", "w_grid"):
            grid = tuple(float(x) for x in getattr(self, name))
            if not grid:
                raise ValueError(f"{name} is empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"{name} must be strictly ascending")
            object.__setattr__(self, name, grid)


@dataclass(frozen=True)
class MarginSchedule:
    required: tuple[float, ...]
    remaining: tuple[float, ...]


@dataclass(frozen=True)
class MarginSystem:
    m: float
    w: float
    cpnr_at_construction: float | None = None

    def __post_init__(self):
        if not 0 < self.m <= 1:
            raise ValueError(f"initial margin ratio {self.m} outside (0, 1]")
        if not 1 < self.w <= 1.5 + 1e-12:
            raise ValueError(f"maintenance ratio {self.w} outside (1, 1.5]")
        if not initial_margin_adequate(self.m, self.w):
            raise ValueError(f"initial margin {self.m} inadequate for maintenance ratio {self.w}")


class IndifferencePoint(NamedTuple):
    m: float
    w: float
    cpnr: float


class DynamicsPoint(NamedTuple):
    date: dt.date
    m: float | None
    w: float | None


def initial_margin_adequate(m0: float, w: float) -> bool:
    """True iff cash plus stock covers the maintenance ratio on day 0: m0 + 1 >= w."""
    if m0 < 0 or w <= 0:
        raise ValueError("need m0 >= 0 and w > 0")
    return m0 + 1.0 >= w - ADEQUACY_TOL


REQUIRED_SYSTEM = MarginSystem(0.5, 1.3)


def margin_schedule(prices: Sequence[float], q0: float, w: float, r: float, R: float | None = None) -> MarginSchedule:
    """Required margin and remaining margin for each day 0..T of a price path.

    ``required_i = w P0 (1+R)^i - P_i`` and
    ``remaining_i = Q0 (1+r)^i - w P0 (1+R)^i + P_i``; R defaults to r.
    """
    p = np.asarray(prices, dtype=float)
    if p.size == 0 or np.any(p <= 0):
        raise ValueError("prices must be a nonempty positive path")
    if q0 < 0:
        raise ValueError("q0 must be nonnegative")
    loan_rate = r if R is None else R
    days = np.arange(p.size)
    loan = w * p[0] * (1.0 + loan_rate) ** days
    required = loan - p
    remaining = q0 * (1.0 + r) ** days - loan + p
    return MarginSchedule(tuple(required.tolist()), tuple(remaining.tolist()))


def individualized_maintenance(model: TransitionModel, space: StateSpace, p0: float, q0: float,
                               config: OptimizerConfig, h: int | None = None) -> float | None:
    """Smallest grid w meeting both the CPNR target and initial-margin adequacy.

    The scan runs upward and stops at the first success; CPNR is not assumed
    monotone in w.
    """
    if q0 < 0:
        raise ValueError("q0 must be nonnegative")
    h = state_of(space, p0) if h is None else h
    m0 = q0 / p0
    for w in config.w_grid:
        if not initial_margin_adequate(m0, w):
            break  # grid ascends, so every later w fails too
        res = cpnr(model, space, LoanQuery(p0, q0, w, config.r, config.horizon, h))
        if res.cpnr <= config.cpnr_target:
            return w
    return None


def indifference_set(model: TransitionModel, space: StateSpace, p0: float, config: OptimizerConfig,
                     h: int | None = None) -> list[IndifferencePoint]:
    """Pairs (m_i, w_i) where w_i is the individualized ratio for Q0 = m_i * P0."""
    h = state_of(space, p0) if h is None else h
    grid = CpnrGrid(model, space, p0, h, config.r, config.horizon)
    m = np.asarray(config.m_grid)[:, None]
    w = np.asarray(config.w_grid)[None, :]
    _, _, ratio = grid.evaluate(m * p0, w)
    ok = (ratio <= config.cpnr_target) & (m + 1.0 >= w - ADEQUACY_TOL)
    out = []
    for i, row in enumerate(ok):
        hits = np.flatnonzero(row)
        if hits.size:
            j = int(hits[0])
            out.append(IndifferencePoint(config.m_grid[i], config.w_grid[j], float(ratio[i, j])))
    return out


def deduce_margin_system(points: Sequence[Sequence[float]]) -> MarginSystem | None:
    """Member of the indifference set closest, in least squares, to the set's centroid.

    Ties go to the smaller m, then the smaller w.  Accepts (m, w) pairs or
    (m, w, cpnr) triples; the cpnr, when given, is carried into the result.
    """
    if not points:
        return None
    ms = [float(p[0]) for p in points]
    ws = [float(p[1]) for p in points]
    # fsum is exactly rounded, which keeps the result independent of input order
    m_bar = math.fsum(ms) / len(ms)
    w_bar = math.fsum(ws) / len(ws)
    best = min(range(len(points)), key=lambda i: ((ms[i] - m_bar) ** 2 + (ws[i] - w_bar) ** 2, ms[i], ws[i]))
    chosen = points[best]
    level = float(chosen[2]) if len(chosen) > 2 else None
    return MarginSystem(ms[best], ws[best], level)


def deduce_for_fit(fit: MarkovFit, config: OptimizerConfig) -> tuple[MarginSystem | None, list[IndifferencePoint]]:
    points = indifference_set(fit.model, fit.space, fit.p0, config, h=fit.h)
    return deduce_margin_system(points), points


def margin_dynamics(series: PriceSeries, start: int, count: int, config: OptimizerConfig,
                    depth: int = 800, group: int = 25) -> list[DynamicsPoint]:
    """Deduced (m*, w*) for `count` consecutive dates from index `start`, refitting each date.

    Dates with an empty indifference set come back with ``m`` and ``w`` set to None.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for idx in range(start, start + count):
        fit = fit_window(window(series, idx, depth), group, config.horizon)
        system, _ = deduce_for_fit(fit, config)
        if system is None:
            out.append(DynamicsPoint(series.dates[idx], None, None))
        else:
            out.append(DynamicsPoint(series.dates[idx], system.m, system.w))
    return out
