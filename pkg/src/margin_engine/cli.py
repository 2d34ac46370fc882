"""Command-line entry point: ``margin-engine <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import sys
from typing import Sequence

from . import __version__
from .backtest import BacktestConfig, compare_systems, corpus_report, run_out_of_sample
from .cpnr import LoanQuery, cpnr
from .errors import MarginEngineError
from .margin import MarginSystem, OptimizerConfig, deduce_for_fit, individualized_maintenance, margin_dynamics
from .markov import fit_window, markov_chi_square_test
from .prices import PriceSeries, SyntheticSpec, generate_synthetic, load_price_csv, window, write_price_csv
from .report import emit_report

EXIT_OK, EXIT_VALIDATION, EXIT_USAGE = 0, 1, 2


class _UsageError(Exception):
    pass


def _iso_date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def _system(text: str) -> str | MarginSystem:
    if text in ("deduced", "required"):
        return text
    if text.startswith("fixed:"):
        try:
            m, w = (float(x) for x in text[len("fixed:"):].split(","))
            return MarginSystem(m, w)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad fixed system {text!r}: {exc}") from None
    raise argparse.ArgumentTypeError("system must be deduced, required or fixed:m,w")


def _steps(text: str) -> tuple[tuple[float, float], ...]:
    try:
        pairs = [item.split(":") for item in text.split(",")]
        return tuple((float(s), float(p)) for s, p in pairs)
    except ValueError:
        raise argparse.ArgumentTypeError("steps look like 0.99:0.5,1.01:0.5") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_help()}\n{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = _Parser(add_help=False)
    common.add_argument("--depth", type=int, default=800, help="closes used to fit the chain")
    common.add_argument("--group", type=int, default=25, help="distinct prices per state")
    common.add_argument("--horizon", type=int, default=30, help="loan period in trading days")
    common.add_argument("--target", type=float, default=0.05, help="CPNR target")
    common.add_argument("--r", type=float, default=0.0001, help="daily riskless rate")
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--out", default="-", help="output path, - for stdout")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="report format")

    parser = _Parser(prog="margin-engine", description="Active margin requirements from a Markov price chain.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, help_: str, prices: str | None = "one"):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, formatter_class=fmt)
        if prices == "one":
            p.add_argument("--prices", required=True, help="CSV with date,close columns")
        elif prices == "many":
            p.add_argument("--prices", required=True, action="append", help="CSV with date,close; repeatable")
        return p

    add("ingest", "validate a price file and summarise it")

    p = add("markov-test", "chi-square test of the Markov property on one window")
    p.add_argument("--date", type=_iso_date, help="window end date (default: last date)")

    p = add("cpnr", "CPNR of one margin loan")
    p.add_argument("--date", type=_iso_date, help="transaction date (default: last date)")
    p.add_argument("--q0", type=float, required=True, help="initial margin amount")
    p.add_argument("--w", type=float, required=True, help="maintenance margin ratio")

    p = add("margin", "individualized w*(Q0), or the deduced (m*, w*) and indifference set")
    p.add_argument("--date", type=_iso_date, help="transaction date (default: last date)")
    p.add_argument("--q0", type=float, help="initial margin amount")

    p = add("dynamics", "deduced system over consecutive dates")
    p.add_argument("--date", type=_iso_date, help="first date (default: first with full history)")
    p.add_argument("--count", type=int, default=1, help="number of dates")

    p = add("backtest", "out-of-sample loans under one margin system")
    p.add_argument("--mode", choices=("default", "topup"), default="default", help="liquidate at first call or top up")
    p.add_argument("--system", type=_system, default="deduced", help="deduced | required | fixed:m,w")
    p.add_argument("--loans", type=int, default=200, help="loans per stock")

    p = add("compare", "required (0.5, 1.3) versus deduced system over the same loans", prices="many")
    p.add_argument("--loans", type=int, default=200, help="loans per stock")

    p = add("synth", "write a synthetic multiplicative random-walk price CSV", prices=None)
    p.add_argument("--length", type=int, default=1030, help="number of closes")
    p.add_argument("--start-price", type=float, default=10.0, help="first close")
    p.add_argument("--steps", type=_steps, default=((0.99, 0.5), (1.01, 0.5)), help="step:prob list")
    p.add_argument("--ticker", default="SYNTH", help="ticker label")
    return parser


def _date_index(series: PriceSeries, date: dt.date | None, default: int) -> int:
    return default if date is None else series.index_of(date)


def _optimizer(args) -> OptimizerConfig:
    return OptimizerConfig(cpnr_target=args.target, r=args.r, horizon=args.horizon)


def _backtest_config(args, **kw) -> BacktestConfig:
    return BacktestConfig(depth=args.depth, group=args.group, horizon=args.horizon,
                          cpnr_target=args.target, r=args.r, **kw)


def _run(args) -> object:
    cmd = args.command
    if cmd == "synth":
        spec = SyntheticSpec(args.length, args.start_price, args.steps, args.seed, args.ticker)
        return generate_synthetic(spec)

    if cmd == "compare":
        cfg = _backtest_config(args, loans_per_stock=args.loans)
        comps = [compare_systems(load_price_csv(path), cfg) for path in args.prices]
        return comps[0] if len(comps) == 1 else corpus_report(comps, args.target)

    series = load_price_csv(args.prices)
    if cmd == "ingest":
        return {
            "ticker": series.ticker,
            "length": len(series),
            "first_date": series.dates[0] if len(series) else None,
            "last_date": series.dates[-1] if len(series) else None,
            "min_close": float(series.closes.min()) if len(series) else None,
            "max_close": float(series.closes.max()) if len(series) else None,
        }
    if cmd == "backtest":
        return run_out_of_sample(series, _backtest_config(args, loans_per_stock=args.loans,
                                                          mode=args.mode, system=args.system))
    if cmd == "dynamics":
        start = _date_index(series, args.date, args.depth - 1)
        points = margin_dynamics(series, start, args.count, _optimizer(args), args.depth, args.group)
        return {"cpnr_target": args.target,
                "dates": [{"date": p.date, "m": p.m, "w": p.w, "gap": p.m is None or None} for p in points]}

    idx = _date_index(series, args.date, len(series) - 1)
    fit = fit_window(window(series, idx, args.depth), args.group, args.horizon)
    if cmd == "markov-test":
        return markov_chi_square_test(fit.counts)
    if cmd == "cpnr":
        return cpnr(fit.model, fit.space, LoanQuery(fit.p0, args.q0, args.w, args.r, args.horizon, fit.h))
    if cmd == "margin":
        config = _optimizer(args)
        base = {"date": series.dates[idx], "p0": fit.p0, "state": fit.h, "n_states": fit.space.n,
                "cpnr_target": args.target}
        if args.q0 is not None:
            w = individualized_maintenance(fit.model, fit.space, fit.p0, args.q0, config, h=fit.h)
            return {**base, "q0": args.q0, "w_star": w, "feasible": w is not None}
        system, points = deduce_for_fit(fit, config)
        return {**base,
                "deduced": None if system is None else {"m": system.m, "w": system.w,
                                                        "cpnr": system.cpnr_at_construction},
                "indifference_set": [{"m": p.m, "w": p.w, "cpnr": p.cpnr} for p in points]}
    raise _UsageError(f"unknown command {cmd}")


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        result = _run(args)
        if isinstance(result, PriceSeries):
            if args.out in ("-", None):
                sys.stdout.write("date,close\n")
                sys.stdout.writelines(f"{d.isoformat()},{c!r}\n" for d, c in result.observations)
            else:
                write_price_csv(result, args.out)
        else:
            emit_report(result, args.format, args.out)
    except (MarginEngineError, ValueError, OSError, TypeError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return EXIT_VALIDATION
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
