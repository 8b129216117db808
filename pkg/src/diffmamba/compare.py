"""Win-ratio tables between two evaluation grids."""

from __future__ import annotations

import csv
import json
import os

from .errors import DataError

INF_WIN = "inf"
INF_LOSS = "-inf"
FIELDS = ("row", "col", "score_a", "score_b", "ratio", "winner", "color")


def _grid(report) -> dict:
    grid = report.get("grid") if isinstance(report, dict) else getattr(report, "grid", None)
    if not grid:
        raise DataError("report has no evaluation grid")
    return grid


def _name(report, default: str) -> str:
    return (report.get("name") if isinstance(report, dict) else getattr(report, "name", None)) or default


def win_ratio(a: float, b: float):
    """``a/b`` when a wins, ``-b/a`` when b wins, 1 for a tie; infinite sentinels guard zero scores."""
    if a == b:
        return 1.0
    if a > b:
        return INF_WIN if b == 0 else a / b
    return INF_LOSS if a == 0 else -(b / a)


def win_ratio_table(report_a, report_b, keys=None) -> list[dict]:
    ga, gb = _grid(report_a), _grid(report_b)
    rows = list(keys) if keys else sorted(ga)
    cells = []
    for r in rows:
        if r not in ga or r not in gb:
            raise DataError(f"row {r!r} missing from one of the reports")
        if set(ga[r]) != set(gb[r]):
            raise DataError(f"column sets differ for row {r!r}: {sorted(ga[r])} vs {sorted(gb[r])}")
        for c in sorted(ga[r], key=lambda k: (len(k), k)):
            a, b = float(ga[r][c]), float(gb[r][c])
            ratio = win_ratio(a, b)
            winner = "tie" if a == b else ("a" if a > b else "b")
            cells.append({
                "row": r, "col": c, "score_a": a, "score_b": b, "ratio": ratio, "winner": winner,
                "color": {"a": "green", "b": "red", "tie": "gray"}[winner],
            })
    return cells


def write_table(prefix, cells: list[dict], name_a: str = "a", name_b: str = "b") -> tuple[str, str]:
    prefix = os.fspath(prefix)
    csv_path, json_path = prefix + ".csv", prefix + ".json"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS, lineterminator="\n")
        w.writeheader()
        for c in cells:
            w.writerow(c)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"a": name_a, "b": name_b, "cells": cells}, fh, indent=2, sort_keys=True)
    return csv_path, json_path
