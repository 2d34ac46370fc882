"""Canonical JSON and CSV emission for module reports."""

from __future__ import annotations

import dataclasses
import datetime as dt
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, TextIO

import numpy as np

from .backtest import QuantileTable, SummaryTable

__all__ = ["to_plain", "canonical_json", "tables_csv", "emit_report"]

DECIMALS = 6


def to_plain(obj: Any) -> Any:
    """Convert a report into dicts, lists and scalars, dropping empty sections."""
    if hasattr(obj, "to_dict"):
        return to_plain(obj.to_dict())
    if isinstance(obj, dict):
        out = {}
        for key, value in obj.items():
            value = to_plain(value)
            if value is None or (isinstance(value, (dict, list)) and not value):
                continue
            out[str(key)] = value
        return out
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (dt.date, dt.datetime)):
        return obj.isoformat()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return to_plain(dataclasses.asdict(obj))
    return obj


def _encode(value: Any, out: list[str]) -> None:
    if value is None:
        out.append("null")
    elif isinstance(value, bool):
        out.append("true" if value else "false")
    elif isinstance(value, int):
        out.append(str(value))
    elif isinstance(value, float):
        if not math.isfinite(value):
            out.append("null")
        else:
            text = f"{value:.{DECIMALS}f}"
            out.append("0.000000" if text == "-0.000000" else text)
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, dict):
        out.append("{")
        for i, key in enumerate(sorted(value)):
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _encode(value[key], out)
        out.append("}")
    elif isinstance(value, list):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialise {type(value).__name__}")


def canonical_json(report: Any) -> str:
    """Sorted keys, floats fixed to six decimals, no whitespace, trailing newline."""
    out: list[str] = []
    _encode(to_plain(report), out)
    return "".join(out) + "\n"


def _fmt(x: float) -> str:
    return f"{x:.{DECIMALS}f}" if math.isfinite(x) else ""


def _summary_tables(report: Any) -> list[SummaryTable]:
    if isinstance(report, SummaryTable):
        return [report]
    if isinstance(report, QuantileTable):
        return [SummaryTable("", (("value", report),))]
    if hasattr(report, "tables"):
        return list(report.tables())
    raise TypeError(f"{type(report).__name__} has no tabular form")


def tables_csv(report: Any) -> str:
    """One statistic per row; several tables are separated by a ``# title`` line."""
    tables = _summary_tables(report)
    buf = io.StringIO()
    for i, table in enumerate(tables):
        if len(tables) > 1:
            if i:
                buf.write("\n")
            buf.write(f"# {table.title}\n")
        extra_cols = list(table.extra)
        buf.write(",".join(["statistic", *table.columns, *extra_cols]) + "\n")
        for name, row in table.rows:
            cells = [name, *(_fmt(v) for v in row.values)]
            cells += [_fmt(table.extra[c][name]) if name in table.extra[c] else "" for c in extra_cols]
            buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def emit_report(report: Any, fmt: str = "json", dest: str | Path | TextIO | None = None) -> None:
    if fmt == "json":
        text = canonical_json(report)
    elif fmt == "csv":
        text = tables_csv(report)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if dest is None or dest == "-":
        sys.stdout.write(text)
    elif hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
