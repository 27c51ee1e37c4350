# backend/tests/test_cost_metric.py
import json

import numpy as np
import pytest

from ope_pipeline.errors import DatasetFormatError, InputError
from ope_pipeline.wdro_module.cost_metric import CostMetric, load_cost, save_cost


def test_default_metric_values():
    cost = CostMetric.normalized(10, 2)
    assert cost.n_points == 20
    assert cost.point(1, 5) == 15
    assert cost.unpoint(15) == (1, 5)
    assert cost(cost.point(0, 3), cost.point(1, 5)) == pytest.approx(3 / 12)
    assert cost.diam == pytest.approx(10 / 12)
    assert cost.kind == "normalized"


def test_default_metric_is_read_only():
    cost = CostMetric.normalized(3, 2)
    with pytest.raises(ValueError):
        cost.table[0, 1] = 5.0


@pytest.mark.parametrize(
    "table",
    [
        [[0.0, 1.0, 1.0], [2.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
        [[0.0, -1.0, 1.0], [-1.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
        [[0.5, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
        [[0.0, 1.0, 3.0], [1.0, 0.0, 1.0], [3.0, 1.0, 0.0]],
        [[0.0, np.inf, 1.0], [np.inf, 0.0, 1.0], [1.0, 1.0, 0.0]],
    ],
    ids=["asymmetric", "negative", "diagonal", "zero-gap", "triangle", "infinite"],
)
def test_invalid_tables_are_rejected(table):
    with pytest.raises(InputError):
        CostMetric.from_table(table, 3, 1)


def test_wrong_shape_is_rejected():
    with pytest.raises(InputError):
        CostMetric.from_table(np.zeros((4, 4)), 3, 1)


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.random((6, 2))
    table = np.linalg.norm(x[:, None] - x[None, :], axis=2)
    cost = CostMetric.from_table(table, 3, 2)
    path = tmp_path / "cost.jsonl"
    save_cost(cost, path)
    lines = path.read_text().splitlines()
    assert json.loads(lines[0]) == {"kind": "cost", "n_states": 3, "n_actions": 2}
    assert len(lines) == 1 + 6 * 5 // 2
    np.testing.assert_array_equal(load_cost(path).table, cost.table)


def _write(path, *objs):
    path.write_text("\n".join(json.dumps(o) for o in objs) + "\n")
    return path


HEADER = {"kind": "cost", "n_states": 3, "n_actions": 1}


def test_missing_pair_is_reported(tmp_path):
    path = _write(tmp_path / "c.jsonl", HEADER, {"i": 0, "j": 1, "c": 1.0}, {"i": 0, "j": 2, "c": 1.0})
    with pytest.raises(DatasetFormatError, match=r"\(1, 2\)"):
        load_cost(path)


def test_duplicate_and_unordered_pairs_report_line(tmp_path):
    dup = _write(tmp_path / "d.jsonl", HEADER, {"i": 0, "j": 1, "c": 1.0}, {"i": 0, "j": 1, "c": 1.0})
    with pytest.raises(DatasetFormatError) as info:
        load_cost(dup)
    assert info.value.line == 3
    unordered = _write(tmp_path / "u.jsonl", HEADER, {"i": 1, "j": 0, "c": 1.0})
    with pytest.raises(DatasetFormatError) as info:
        load_cost(unordered)
    assert info.value.line == 2


def test_bad_header_is_line_one(tmp_path):
    with pytest.raises(DatasetFormatError) as info:
        load_cost(_write(tmp_path / "h.jsonl", {"kind": "header"}))
    assert info.value.line == 1


def test_loaded_table_is_validated(tmp_path):
    path = _write(
        tmp_path / "t.jsonl", HEADER,
        {"i": 0, "j": 1, "c": 1.0}, {"i": 0, "j": 2, "c": 3.0}, {"i": 1, "j": 2, "c": 1.0},
    )
    with pytest.raises(InputError, match="triangle"):
        load_cost(path)
