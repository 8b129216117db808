import csv
import json

import pytest

from diffmamba.compare import INF_LOSS, INF_WIN, win_ratio, win_ratio_table, write_table
from diffmamba.errors import DataError

GRID = {f"qa{i}": {"0k": 0.5, "1k": 0.4, "2k": 0.2} for i in range(1, 6)}


def test_identical_reports():
    cells = win_ratio_table({"grid": GRID}, {"grid": GRID})
    assert len(cells) == 15 and all(c["ratio"] == 1.0 and c["color"] == "gray" for c in cells)


def test_ratios():
    assert win_ratio(0.6, 0.3) == pytest.approx(2.0)
    assert win_ratio(0.3, 0.6) == pytest.approx(-2.0)
    assert win_ratio(0.4, 0.0) == INF_WIN
    assert win_ratio(0.0, 0.4) == INF_LOSS


def test_grid_mismatch():
    with pytest.raises(DataError):
        win_ratio_table({"grid": GRID}, {"grid": {"qa1": {"0k": 1.0}}})
    with pytest.raises(DataError):
        win_ratio_table({"grid": {}}, {"grid": GRID})


def test_serialized_grid(tmp_path):
    b = {r: {c: v * (1.5 if r == "qa1" else 0.5) for c, v in cols.items()} for r, cols in GRID.items()}
    cells = win_ratio_table({"grid": GRID, "name": "diff"}, {"grid": b, "name": "mamba"})
    csv_path, json_path = write_table(tmp_path / "t", cells, "diff", "mamba")
    rows = list(csv.DictReader(open(csv_path)))
    assert len(rows) == 15 and {r["color"] for r in rows} == {"green", "red"}
    assert rows[0]["col"] == "0k"
    data = json.load(open(json_path))
    assert data["a"] == "diff" and data["cells"][0]["winner"] in ("a", "b")
