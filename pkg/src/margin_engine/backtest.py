"""Out-of-sample margin-loan simulation and the quantile reports built from it."""

from __future__ import annotations

import datetime as dt
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Literal, Sequence, TypeVar

import numpy as np

from .errors import InadequateMarginError, InsufficientHistoryError
from .margin import REQUIRED_SYSTEM, MarginSystem, OptimizerConfig, deduce_for_fit, initial_margin_adequate
from .markov import fit_window
from .prices import PriceSeries, window

__all__ = [
    "STOCK_LEVELS",
    "SUMMARY_LEVELS",
    "CALL_LEVELS",
    "QUANTILE_METHOD",
    "LoanOutcome",
    "BacktestConfig",
    "QuantileTable",
    "SummaryTable",
    "StockReport",
    "SystemSummary",
    "ComparisonReport",
    "CorpusReport",
    "simulate_loan_default",
    "simulate_loan_topup",
    "quantile_analysis",
    "loan_dates",
    "run_out_of_sample",
    "pass_test",
    "compare_systems",
    "corpus_report",
    "worker_count",
]

STOCK_LEVELS = (0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95)
SUMMARY_LEVELS = (0.70, 0.80, 0.90, 0.95)
CALL_LEVELS = (0.30, 0.50, 0.80, 0.90, 0.95, 0.99)
QUANTILE_METHOD = "linear interpolation between order statistics at zero-based position p*(N-1)"

Mode = Literal["default", "topup"]
T_ = TypeVar("T_")
R_ = TypeVar("R_")


def worker_count() -> int:
    """Worker cap from MARGIN_ENGINE_THREADS; 0 or unset means one per CPU."""
    raw = os.environ.get("MARGIN_ENGINE_THREADS", "0").strip() or "0"
    n = int(raw)
    return n if n > 0 else (os.cpu_count() or 1)


def _map(fn: Callable[[T_], R_], items: Iterable[T_]) -> list[R_]:
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    # map() preserves input order, so results do not depend on scheduling
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# single loans

@dataclass(frozen=True)
class LoanOutcome:
    horizon: int
    m: float
    w: float
    p0: float
    q0: float
    tau: int | None
    tau_star: int | None
    margin_called: bool
    return_amount: float
    negative_return: bool
    cost: float | None = None
    num_calls: int | None = None
    start_date: dt.date | None = None
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "start_date": self.start_date.isoformat() if self.start_date else None,
            "horizon": self.horizon,
            "m": self.m,
            "w": self.w,
            "p0": self.p0,
            "q0": self.q0,
            "tau": self.tau,
            "tau_star": self.tau_star,
            "margin_called": self.margin_called,
            "return_amount": self.return_amount,
            "negative_return": self.negative_return,
            "cost": self.cost,
            "num_calls": self.num_calls,
            "fallback": self.fallback or None,
        }


def _check_loan(prices: np.ndarray, q0: float, w: float) -> None:
    if prices.size < 2:
        raise ValueError("a loan path needs P0 and at least one later close")
    if np.any(prices <= 0):
        raise ValueError("prices must be positive")
    if q0 < 0:
        raise ValueError("q0 must be nonnegative")
    if not initial_margin_adequate(q0 / prices[0], w):
        raise InadequateMarginError(
            f"initial margin adequacy m0 + 1 >= w fails: m0={q0 / prices[0]:.6g}, w={w:.6g}"
        )


def simulate_loan_default(prices: Sequence[float], q0: float, w: float, r: float) -> LoanOutcome:
    """The investor defaults at the first call; collateral is sold one trading day later."""
    p = np.asarray(prices, dtype=float)
    _check_loan(p, q0, w)
    T = p.size - 1
    p0 = float(p[0])
    growth = (1.0 + r) ** np.arange(T + 1)
    remaining = q0 * growth - w * p0 * growth + p
    called = np.flatnonzero(remaining[1:] <= 0.0)
    if called.size:
        tau = int(called[0]) + 1
        tau_star = min(tau + 1, T)
        end = tau_star
    else:
        tau = tau_star = None
        end = T
    ret = float(p[end] + q0 * growth[end] - p0 * growth[end])
    return LoanOutcome(T, q0 / p0, w, p0, q0, tau, tau_star, tau is not None, ret, ret < 0)


def simulate_loan_topup(prices: Sequence[float], q0: float, w: float, r: float) -> LoanOutcome:
    """The investor meets every call by depositing exactly the shortfall.

    ``cost`` is the terminal value of the initial margin plus all deposits.
    """
    p = np.asarray(prices, dtype=float)
    _check_loan(p, q0, w)
    T = p.size - 1
    p0 = float(p[0])
    account = float(q0)
    calls = 0
    first = None
    for i in range(1, T + 1):
        account *= 1.0 + r
        requirement = w * p0 * (1.0 + r) ** i - p[i]
        shortfall = requirement - account
        if shortfall > 0.0:
            account = float(requirement)
            calls += 1
            if first is None:
                first = i
    ret = float(p[T] + account - p0 * (1.0 + r) ** T)
    return LoanOutcome(T, q0 / p0, w, p0, q0, first, None, calls > 0, ret, ret < 0,
                       cost=account, num_calls=calls)


# --------------------------------------------------------------------------
# quantile tables

def _level_label(p: float) -> str:
    return f"q{int(round(p * 100)):02d}"


@dataclass(frozen=True)
class QuantileTable:
    levels: tuple[float, ...]
    minimum: float
    maximum: float
    mean: float
    quantiles: tuple[float, ...]

    @property
    def labels(self) -> list[str]:
        return ["min", "max", "mean"] + [_level_label(p) for p in self.levels]

    @property
    def values(self) -> list[float]:
        return [self.minimum, self.maximum, self.mean, *self.quantiles]

    def __getitem__(self, label: str) -> float:
        return self.values[self.labels.index(label)]

    def to_dict(self) -> dict:
        return dict(zip(self.labels, self.values))


def quantile_analysis(samples: Sequence[float], levels: Sequence[float] = STOCK_LEVELS) -> QuantileTable:
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("quantile analysis needs at least one sample")
    levels = tuple(float(p) for p in levels)
    if any(not 0 <= p <= 1 for p in levels):
        raise ValueError("quantile levels must lie in [0, 1]")
    q = np.quantile(x, levels, method="linear") if levels else np.array([])
    return QuantileTable(levels, float(x.min()), float(x.max()), math.fsum(x.tolist()) / x.size,
                         tuple(float(v) for v in q))


def _stock_statistic_names() -> list[str]:
    return ["minimum", "maximum", "mean"] + [_level_label(p) for p in STOCK_LEVELS]


@dataclass(frozen=True)
class SummaryTable:
    """Rows of quantile tables sharing one set of columns."""

    title: str
    rows: tuple[tuple[str, QuantileTable], ...]
    extra: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return self.rows[0][1].labels if self.rows else []

    def row(self, name: str) -> QuantileTable:
        return dict(self.rows)[name]

    def to_dict(self) -> dict:
        out = {"title": self.title, "columns": self.columns,
               "rows": [{"statistic": name, **table.to_dict()} for name, table in self.rows]}
        for key, values in self.extra.items():
            out[key] = values
        return out


def _two_level(title: str, per_stock: Sequence[QuantileTable], levels=SUMMARY_LEVELS) -> SummaryTable:
    """For each per-stock statistic, a quantile analysis across stocks."""
    names = _stock_statistic_names()
    matrix = np.array([t.values for t in per_stock])
    rows = tuple((name, quantile_analysis(matrix[:, i], levels)) for i, name in enumerate(names))
    return SummaryTable(title, rows)


# --------------------------------------------------------------------------
# out-of-sample runs

@dataclass(frozen=True)
class BacktestConfig:
    depth: int = 800
    group: int = 25
    horizon: int = 30
    loans_per_stock: int = 200
    cpnr_target: float = 0.05
    r: float = 0.0
    mode: Mode = "default"
    system: str | MarginSystem = "deduced"

    def __post_init__(self):
        if self.mode not in ("default", "topup"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not isinstance(self.system, MarginSystem) and self.system not in ("deduced", "required"):
            raise ValueError(f"unknown system source {self.system!r}")
        if min(self.depth, self.group, self.horizon, self.loans_per_stock) < 1:
            raise ValueError("depth, group, horizon and loans_per_stock must be positive")

    @property
    def required_length(self) -> int:
        return self.depth + self.loans_per_stock - 1 + self.horizon

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(cpnr_target=self.cpnr_target, r=self.r, horizon=self.horizon)

    def describe_system(self) -> str:
        if isinstance(self.system, MarginSystem):
            return f"fixed:{self.system.m:g},{self.system.w:g}"
        return self.system


def loan_dates(series: PriceSeries, config: BacktestConfig) -> range:
    """Indices of the consecutive start dates: the earliest block with full history and future."""
    if len(series) < config.required_length:
        raise InsufficientHistoryError(
            f"{series.ticker}: {len(series)} closes, need at least {config.required_length} "
            f"(depth {config.depth} + {config.loans_per_stock} loans - 1 + horizon {config.horizon})",
            required=config.required_length,
        )
    first = config.depth - 1
    return range(first, first + config.loans_per_stock)


@dataclass(frozen=True)
class _Plan:
    index: int
    deduced: MarginSystem | None


def _deduced_plan(series: PriceSeries, config: BacktestConfig, idx: int) -> _Plan:
    fit = fit_window(window(series, idx, config.depth, config.horizon), config.group, config.horizon)
    system, _ = deduce_for_fit(fit, config.optimizer)
    return _Plan(idx, system)


def _resolve(system: str | MarginSystem, plan: _Plan) -> tuple[MarginSystem, bool]:
    if isinstance(system, MarginSystem):
        return system, False
    if system == "required":
        return REQUIRED_SYSTEM, False
    if plan.deduced is None:
        # empty indifference set: fall back to the regulator's pair and flag the loan
        return REQUIRED_SYSTEM, True
    return plan.deduced, False


def _simulate(series: PriceSeries, config: BacktestConfig, idx: int, system: MarginSystem,
              mode: Mode, fallback: bool) -> LoanOutcome:
    path = series.closes[idx : idx + config.horizon + 1]
    q0 = system.m * float(path[0])
    sim = simulate_loan_default if mode == "default" else simulate_loan_topup
    out = sim(path, q0, system.w, config.r)
    return replace(out, m=system.m, start_date=series.dates[idx], fallback=fallback)


def _plans(series: PriceSeries, config: BacktestConfig, need_deduced: bool) -> list[_Plan]:
    dates = loan_dates(series, config)
    if not need_deduced:
        return [_Plan(i, None) for i in dates]
    return _map(lambda i: _deduced_plan(series, config, i), dates)


@dataclass(frozen=True)
class StockReport:
    ticker: str
    config: BacktestConfig
    outcomes: tuple[LoanOutcome, ...]

    @property
    def n_loans(self) -> int:
        return len(self.outcomes)

    @property
    def n_negative(self) -> int:
        return sum(o.negative_return for o in self.outcomes)

    @property
    def n_called(self) -> int:
        return sum(o.margin_called for o in self.outcomes)

    @property
    def n_fallback(self) -> int:
        return sum(o.fallback for o in self.outcomes)

    @property
    def negative_frequency(self) -> float:
        return self.n_negative / self.n_loans

    def initial_ratio_table(self) -> QuantileTable:
        return quantile_analysis([o.m for o in self.outcomes])

    def maintenance_ratio_table(self) -> QuantileTable:
        return quantile_analysis([o.w for o in self.outcomes])

    def cost_table(self) -> QuantileTable | None:
        costs = [o.cost for o in self.outcomes if o.cost is not None]
        return quantile_analysis(costs) if costs else None

    def to_dict(self) -> dict:
        cost = self.cost_table()
        return {
            "ticker": self.ticker,
            "mode": self.config.mode,
            "system": self.config.describe_system(),
            "cpnr_target": self.config.cpnr_target,
            "r": self.config.r,
            "depth": self.config.depth,
            "group": self.config.group,
            "horizon": self.config.horizon,
            "quantile_method": QUANTILE_METHOD,
            "n_loans": self.n_loans,
            "n_margin_calls": self.n_called,
            "n_negative_returns": self.n_negative,
            "negative_return_frequency": self.negative_frequency,
            "passed": pass_test(self, self.config.cpnr_target),
            "n_fallback_dates": self.n_fallback or None,
            "initial_margin_ratio": self.initial_ratio_table().to_dict(),
            "maintenance_margin_ratio": self.maintenance_ratio_table().to_dict(),
            "cost": cost.to_dict() if cost else None,
            "loans": [o.to_dict() for o in self.outcomes],
        }

    def tables(self) -> list[SummaryTable]:
        rows = [("initial_margin_ratio", self.initial_ratio_table()),
                ("maintenance_margin_ratio", self.maintenance_ratio_table())]
        cost = self.cost_table()
        if cost:
            rows.append(("cost", cost))
        return [SummaryTable(f"{self.ticker} per-loan statistics", tuple(rows))]


def run_out_of_sample(series: PriceSeries, config: BacktestConfig) -> StockReport:
    need = config.system == "deduced"
    plans = _plans(series, config, need)
    outcomes = []
    for plan in plans:
        system, fallback = _resolve(config.system, plan)
        outcomes.append(_simulate(series, config, plan.index, system, config.mode, fallback))
    return StockReport(series.ticker, config, tuple(outcomes))


def pass_test(report: StockReport, target: float) -> bool:
    """Stock passes when its share of negative-return loans is at most `target`."""
    if report.n_loans < 1:
        raise ValueError("report holds no loans")
    # integer comparison avoids 10/200 <= 0.05 hinging on rounding
    return report.n_negative <= target * report.n_loans + 1e-9


# --------------------------------------------------------------------------
# required vs deduced

@dataclass(frozen=True)
class SystemSummary:
    """One margin system over a stock's loans: call counts from default mode, costs from top-up mode."""

    name: str
    default: StockReport
    topup: StockReport

    @property
    def margin_calls(self) -> int:
        return self.default.n_called

    @property
    def costs(self) -> QuantileTable:
        return self.topup.cost_table()

    def to_dict(self) -> dict:
        return {
            "system": self.name,
            "margin_calls": self.margin_calls,
            "negative_returns": self.default.n_negative,
            "negative_return_frequency": self.default.negative_frequency,
            "passed": pass_test(self.default, self.default.config.cpnr_target),
            "initial_margin_ratio": self.default.initial_ratio_table().to_dict(),
            "maintenance_margin_ratio": self.default.maintenance_ratio_table().to_dict(),
            "cost": self.costs.to_dict(),
        }


def _relative_difference(deduced: float, required: float) -> float:
    if required == 0:
        return 0.0 if deduced == 0 else math.copysign(math.inf, deduced)
    return (deduced - required) / required


@dataclass(frozen=True)
class ComparisonReport:
    ticker: str
    n_loans: int
    required: SystemSummary
    deduced: SystemSummary

    @property
    def cost_rd(self) -> dict[str, float]:
        """Relative cost difference per statistic, (deduced - required) / required."""
        names = _stock_statistic_names()
        req, ded = self.required.costs.values, self.deduced.costs.values
        return {name: _relative_difference(d, r) for name, d, r in zip(names, ded, req)}

    def to_dict(self) -> dict:
        return {
            "ticker": self.ticker,
            "n_loans": self.n_loans,
            "quantile_method": QUANTILE_METHOD,
            "required": self.required.to_dict(),
            "deduced": self.deduced.to_dict(),
            "cost_rd": self.cost_rd,
        }

    def tables(self) -> list[SummaryTable]:
        # RD shares the cost columns, so it sits in the table as a third row
        rd = list(self.cost_rd.values())
        rd_row = QuantileTable(STOCK_LEVELS, rd[0], rd[1], rd[2], tuple(rd[3:]))
        rows = (("deduced_cost", self.deduced.costs), ("required_cost", self.required.costs), ("cost_rd", rd_row))
        return [SummaryTable(f"{self.ticker} loan costs", rows)]


def compare_systems(series: PriceSeries, config: BacktestConfig) -> ComparisonReport:
    """Run the required (0.5, 1.3) and the deduced system over identical loan dates."""
    plans = _plans(series, config, True)

    def run(source: str, mode: Mode) -> StockReport:
        cfg = replace(config, system=source, mode=mode)
        outs = []
        for plan in plans:
            system, fallback = _resolve(source, plan)
            outs.append(_simulate(series, cfg, plan.index, system, mode, fallback))
        return StockReport(series.ticker, cfg, tuple(outs))

    required = SystemSummary("required", run("required", "default"), run("required", "topup"))
    deduced = SystemSummary("deduced", run("deduced", "default"), run("deduced", "topup"))
    return ComparisonReport(series.ticker, len(plans), required, deduced)


@dataclass(frozen=True)
class CorpusReport:
    """Cross-stock tables: margin ratios, call counts and costs under both systems."""

    comparisons: tuple[ComparisonReport, ...]
    cpnr_target: float

    @property
    def stocks_passed(self) -> list[str]:
        return [c.ticker for c in self.comparisons
                if pass_test(c.deduced.default, self.cpnr_target)]

    @property
    def mean_calls_required(self) -> float:
        return math.fsum(c.required.margin_calls for c in self.comparisons) / len(self.comparisons)

    @property
    def mean_calls_deduced(self) -> float:
        return math.fsum(c.deduced.margin_calls for c in self.comparisons) / len(self.comparisons)

    def initial_ratio_table(self) -> SummaryTable:
        return _two_level("initial margin ratios under the deduced system",
                          [c.deduced.default.initial_ratio_table() for c in self.comparisons])

    def maintenance_ratio_table(self) -> SummaryTable:
        return _two_level("maintenance margin ratios under the deduced system",
                          [c.deduced.default.maintenance_ratio_table() for c in self.comparisons])

    def margin_call_table(self) -> SummaryTable:
        rows = []
        for name in ("required", "deduced"):
            counts = [getattr(c, name).margin_calls for c in self.comparisons]
            rows.append((name, quantile_analysis(counts, CALL_LEVELS)))
        return SummaryTable(f"margin calls among {self.comparisons[0].n_loans} loans per stock", tuple(rows))

    def cost_tables(self) -> tuple[SummaryTable, SummaryTable, dict[str, float]]:
        """Deduced and required cost tables plus RD of their 0.95 columns per statistic."""
        ded = _two_level("loan costs, deduced system", [c.deduced.costs for c in self.comparisons])
        req = _two_level("loan costs, required system", [c.required.costs for c in self.comparisons])
        rd = {name: _relative_difference(ded.row(name)["q95"], req.row(name)["q95"])
              for name, _ in ded.rows}
        return ded, req, rd

    def cost_comparison_table(self) -> SummaryTable:
        """Deduced and required rows interleaved per statistic; RD sits on the required row."""
        ded, req, rd = self.cost_tables()
        rows = []
        for (name, d), (_, r) in zip(ded.rows, req.rows):
            rows += [(f"{name}:deduced", d), (f"{name}:required", r)]
        return SummaryTable("loan costs, deduced vs required",
                            tuple(rows), extra={"rd": {f"{name}:required": v for name, v in rd.items()}})

    def to_dict(self) -> dict:
        ded, req, rd = self.cost_tables()
        calls = self.margin_call_table()
        return {
            "n_stocks": len(self.comparisons),
            "cpnr_target": self.cpnr_target,
            "quantile_method": QUANTILE_METHOD,
            "stocks_passed": self.stocks_passed,
            "n_stocks_passed": len(self.stocks_passed),
            "mean_calls_required": self.mean_calls_required,
            "mean_calls_deduced": self.mean_calls_deduced,
            "initial_margin_ratio": self.initial_ratio_table().to_dict(),
            "maintenance_margin_ratio": self.maintenance_ratio_table().to_dict(),
            "margin_calls": calls.to_dict(),
            "cost": {"deduced": ded.to_dict(), "required": req.to_dict(), "rd": rd},
            "stocks": [c.to_dict() for c in self.comparisons],
        }

    def tables(self) -> list[SummaryTable]:
        return [self.initial_ratio_table(), self.maintenance_ratio_table(), self.margin_call_table(),
                self.cost_comparison_table()]


def corpus_report(comparisons: Sequence[ComparisonReport], cpnr_target: float = 0.05) -> CorpusReport:
    if not comparisons:
        raise ValueError("corpus report needs at least one stock")
    return CorpusReport(tuple(comparisons), cpnr_target)
